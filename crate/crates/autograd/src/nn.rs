//! Layers over node-major feature batches.
//!
//! Spatial activations are laid out `[n, c, h, w]`, where `n` is the number
//! of rooms/items processed together.

use rand::Rng;

use crate::ops::ConvGeom;
use crate::params::{Init, ParamId, ParamStore};
use crate::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.add(&format!("{name}.weight"), &[in_dim, out_dim], Init::FanIn(in_dim), rng);
        let bias = ps.add(&format!("{name}.bias"), &[out_dim], Init::FanIn(in_dim), rng);
        Self { weight, bias, in_dim, out_dim }
    }

    /// `[n, in] -> [n, out]`
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.dims(), 2);
        let n = x.shape()[0];
        let b = ps.get(self.bias).reshape(&[1, self.out_dim]).expand(&[n, self.out_dim]);
        x.matmul(ps.get(self.weight)).add(&b)
    }
}

fn add_channel_bias(y: &Tensor, bias: &Tensor) -> Tensor {
    let (n, c, p) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    y.add(&bias.reshape(&[1, c, 1]).expand(&[n, c, p]))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = ps.add(&format!("{name}.weight"), &[out_ch, fan_in], Init::FanIn(fan_in), rng);
        let bias = ps.add(&format!("{name}.bias"), &[out_ch], Init::FanIn(fan_in), rng);
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(ps: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self::new(ps, name, in_ch, out_ch, 3, 1, 1, rng)
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.dims(), 4, "conv input must be [n,c,h,w], got {:?}", x.shape());
        let s = x.shape();
        assert_eq!(s[1], self.in_ch, "conv expected {} channels, got {:?}", self.in_ch, s);
        let geom = ConvGeom { n: s[0], c: s[1], h: s[2], w: s[3], k: self.kernel, stride: self.stride, pad: self.pad };
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let y = ps
            .get(self.weight)
            .matmul(&x.im2col(geom))
            .reshape(&[self.out_ch, s[0], ho * wo])
            .transpose01();
        add_channel_bias(&y, ps.get(self.bias)).reshape(&[s[0], self.out_ch, ho, wo])
    }
}

/// Learnable transposed convolution (kernel 4, stride 2, padding 1 doubles
/// the spatial size).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn upsample2x(ps: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        let (kernel, stride, pad) = (4, 2, 1);
        let fan_in = in_ch * kernel * kernel / (stride * stride);
        let weight = ps.add(&format!("{name}.weight"), &[in_ch, out_ch * kernel * kernel], Init::FanIn(fan_in), rng);
        let bias = ps.add(&format!("{name}.bias"), &[out_ch], Init::FanIn(fan_in), rng);
        Self { weight, bias, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn output_size(&self, h: usize) -> usize {
        (h - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.dims(), 4);
        let s = x.shape();
        assert_eq!(s[1], self.in_ch);
        let (n, h, w) = (s[0], s[2], s[3]);
        let (ho, wo) = (self.output_size(h), self.output_size(w));
        let geom = ConvGeom { n, c: self.out_ch, h: ho, w: wo, k: self.kernel, stride: self.stride, pad: self.pad };
        debug_assert_eq!((geom.out_h(), geom.out_w()), (h, w));
        let x_cols = x
            .reshape(&[n, self.in_ch, h * w])
            .transpose01()
            .reshape(&[self.in_ch, n * h * w]);
        let y = ps
            .get(self.weight)
            .matmul_t(&x_cols, true, false)
            .col2im(geom)
            .reshape(&[n, self.out_ch, ho * wo]);
        add_channel_bias(&y, ps.get(self.bias)).reshape(&[n, self.out_ch, ho, wo])
    }
}

/// Layer normalization over each item's whole `[c, ...]` feature, with a
/// per-channel gain and bias (so the parameters do not depend on spatial size).
#[derive(Clone, Debug)]
pub struct ChannelLayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl ChannelLayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let gain = ps.add(&format!("{name}.gain"), &[channels], Init::Ones, rng);
        let bias = ps.add(&format!("{name}.bias"), &[channels], Init::Zeros, rng);
        Self { gain, bias, channels, eps: 1e-5 }
    }

    /// `x`: `[n, c, p]`
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.dims(), 3);
        let shape = x.shape().to_vec();
        let (n, c, p) = (shape[0], shape[1], shape[2]);
        assert_eq!(c, self.channels);
        let d = (c * p) as f64;
        let mean = x.sum_to(&[n, 1, 1]).scale(1.0 / d).expand(&shape);
        let centered = x.sub(&mean);
        let var = centered.square().sum_to(&[n, 1, 1]).scale(1.0 / d);
        let inv = var.add_scalar(self.eps).powf(-0.5).expand(&shape);
        let normed = centered.mul(&inv);
        let gain = ps.get(self.gain).reshape(&[1, c, 1]).expand(&shape);
        let bias = ps.get(self.bias).reshape(&[1, c, 1]).expand(&shape);
        normed.mul(&gain).add(&bias)
    }
}
