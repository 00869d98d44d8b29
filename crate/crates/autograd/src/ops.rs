//! Differentiable operations.
//!
//! Every backward rule below is written in terms of other ops in this file,
//! which is what makes double backward (gradient penalties) work.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use crate::tensor::{numel, Tensor};

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal cumulative distribution.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Probabilists' Hermite polynomial He_n(x).
fn hermite_he(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return prev;
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// n-th derivative of the exact GeLU, x * Phi(x).
fn gelu_derivative(order: usize, x: f64) -> f64 {
    match order {
        0 => x * normal_cdf(x),
        1 => normal_cdf(x) + x * normal_pdf(x),
        n => {
            // (x Phi)^(n) = x phi^(n-1) + n phi^(n-2), phi^(k) = (-1)^k He_k phi
            let sign = |k: usize| if k % 2 == 0 { 1.0 } else { -1.0 };
            let phi = normal_pdf(x);
            x * sign(n - 1) * hermite_he(n - 1, x) * phi + n as f64 * sign(n - 2) * hermite_he(n - 2, x) * phi
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset for every element of a broadcast from `src` to `dst`.
fn broadcast_offsets(src: &[usize], dst: &[usize]) -> Vec<usize> {
    assert_eq!(src.len(), dst.len(), "broadcast needs equal rank: {src:?} -> {dst:?}");
    for (s, d) in src.iter().zip(dst) {
        assert!(*s == *d || *s == 1, "cannot broadcast {src:?} to {dst:?}");
    }
    let src_strides = strides(src);
    let eff: Vec<usize> = src
        .iter()
        .zip(&src_strides)
        .map(|(&s, &st)| if s == 1 { 0 } else { st })
        .collect();
    let total = numel(dst);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// Geometry of a 2-D convolution over a node-major batch `[n, c, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_shape(&self) -> [usize; 2] {
        [
            self.c * self.k * self.k,
            self.n * self.out_h() * self.out_w(),
        ]
    }

    fn input_shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

/// Output columns `ox` whose input column `ox*stride + kj - pad` lies in
/// `[0, w)`, as a half-open range.
fn valid_cols(g: &ConvGeom, kj: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    // largest ox with ox*stride + kj - pad <= w - 1
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col_raw(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.n * ho * wo;
    let mut out = vec![0.0; g.c * g.k * g.k * cols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kj, wo);
                if lo >= hi {
                    continue;
                }
                let ix_lo = lo * g.stride + kj - g.pad;
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let d = &mut dst[(n * ho + oy) * wo + lo..(n * ho + oy) * wo + hi];
                        if g.stride == 1 {
                            d.copy_from_slice(&src_row[ix_lo..ix_lo + (hi - lo)]);
                        } else {
                            for (k, v) in d.iter_mut().enumerate() {
                                *v = src_row[ix_lo + k * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col_raw`]: scatter-add patches back into the image.
fn col2im_raw(cols_data: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = g.n * ho * wo;
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kj, wo);
                if lo >= hi {
                    continue;
                }
                let ix_lo = lo * g.stride + kj - g.pad;
                for n in 0..g.n {
                    let plane_off = (n * g.c + c) * g.h * g.w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row_off = plane_off + iy as usize * g.w;
                        let s = &src[(n * ho + oy) * wo + lo..(n * ho + oy) * wo + hi];
                        if g.stride == 1 {
                            let d = &mut out[row_off + ix_lo..row_off + ix_lo + (hi - lo)];
                            for (a, b) in d.iter_mut().zip(s) {
                                *a += b;
                            }
                        } else {
                            for (k, v) in s.iter().enumerate() {
                                out[row_off + ix_lo + k * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn gemm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> (Vec<f64>, usize, usize) {
    assert_eq!(a.dims(), 2, "matmul lhs must be 2-d, got {:?}", a.shape());
    assert_eq!(b.dims(), 2, "matmul rhs must be 2-d, got {:?}", b.shape());
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    assert_eq!(k, k2, "matmul inner dims differ: {:?}{} x {:?}{}", a.shape(), if ta { "ᵀ" } else { "" }, b.shape(), if tb { "ᵀ" } else { "" });
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: pointers and strides describe the row-major buffers above,
        // all of which outlive the call; `c` has m*n elements.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa as isize,
                csa as isize,
                b.data().as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    (c, m, n)
}

impl Tensor {
    // ---- elementwise binary -------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "add");
        Tensor::from_op(
            "add",
            zip_map(self, other, |a, b| a + b),
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())],
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "sub");
        Tensor::from_op(
            "sub",
            zip_map(self, other, |a, b| a - b),
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.neg())],
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "mul");
        Tensor::from_op(
            "mul",
            zip_map(self, other, |a, b| a * b),
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                vec![
                    ctx.needs_grad[0].then(|| ctx.grad.mul(b)),
                    ctx.needs_grad[1].then(|| ctx.grad.mul(a)),
                ]
            },
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "div");
        Tensor::from_op(
            "div",
            zip_map(self, other, |a, b| a / b),
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            |ctx| {
                let b = &ctx.parents[1];
                vec![
                    ctx.needs_grad[0].then(|| ctx.grad.div(b)),
                    ctx.needs_grad[1]
                        .then(|| ctx.grad.mul(ctx.output).div(b).neg()),
                ]
            },
        )
    }

    // ---- scalar / unary -----------------------------------------------------

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(
            "scale",
            self.data().iter().map(|v| v * c).collect(),
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.scale(c))],
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(
            "add_scalar",
            self.data().iter().map(|v| v + c).collect(),
            self.shape().to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.clone())],
        )
    }

    /// Elementwise map with derivative `deriv(x, y)` built from tensor ops.
    fn unary<F, D>(&self, name: &'static str, f: F, deriv: D) -> Tensor
    where
        F: Fn(f64) -> f64,
        D: Fn(&Tensor, &Tensor) -> Tensor + Send + Sync + 'static,
    {
        Tensor::from_op(
            name,
            self.data().iter().map(|&v| f(v)).collect(),
            self.shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.mul(&deriv(&ctx.parents[0], ctx.output)))],
        )
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y.clone())
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| x.recip())
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| y.square().neg().add_scalar(1.0))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(
            "sigmoid",
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y.mul(&y.neg().add_scalar(1.0)),
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        self.unary(
            "softplus",
            |v| v.max(0.0) + (-v.abs()).exp().ln_1p(),
            |x, _| x.sigmoid(),
        )
    }

    /// Row-wise `log(softmax(x))` of a `[rows, cols]` tensor.
    pub fn log_softmax(&self) -> Tensor {
        assert_eq!(self.dims(), 2);
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        // the shift is a constant; it cancels analytically
        let max: Vec<f64> = self
            .data()
            .chunks(cols)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shifted = self.sub(&Tensor::new(max, &[rows, 1]).expand(&[rows, cols]));
        let lse = shifted.exp().sum_to(&[rows, 1]).ln().expand(&[rows, cols]);
        shifted.sub(&lse)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |v| v * v, |x, _| x.scale(2.0))
    }

    pub fn recip(&self) -> Tensor {
        self.unary("recip", |v| 1.0 / v, |_, y| y.square().neg())
    }

    /// `1/x`, with `0` mapped to `0` (and a zero derivative there).
    pub fn safe_recip(&self) -> Tensor {
        self.unary(
            "safe_recip",
            |v| if v == 0.0 { 0.0 } else { 1.0 / v },
            |_, y| y.square().neg(),
        )
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary("powf", move |v| v.powf(p), move |x, _| x.powf(p - 1.0).scale(p))
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&self) -> Tensor {
        self.gelu_nth(0)
    }

    fn gelu_nth(&self, order: usize) -> Tensor {
        self.unary(
            "gelu",
            move |v| gelu_derivative(order, v),
            move |x, _| x.gelu_nth(order + 1),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let mask: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { slope })
            .collect();
        let mask = Tensor::new(mask, self.shape());
        self.mul(&mask)
    }

    // ---- shape --------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        let orig = self.shape().to_vec();
        Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.reshape(&orig))],
        )
    }

    /// Broadcast size-1 axes up to `shape` (ranks must match).
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let offs = broadcast_offsets(self.shape(), shape);
        let src = self.data();
        let data = offs.iter().map(|&o| src[o]).collect();
        let orig = self.shape().to_vec();
        Tensor::from_op(
            "expand",
            data,
            shape.to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.sum_to(&orig))],
        )
    }

    /// Sum over axes so the result has `shape` (the inverse of `expand`).
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let offs = broadcast_offsets(shape, self.shape());
        let mut data = vec![0.0; numel(shape)];
        for (v, &o) in self.data().iter().zip(&offs) {
            data[o] += v;
        }
        let orig = self.shape().to_vec();
        Tensor::from_op(
            "sum_to",
            data,
            shape.to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.expand(&orig))],
        )
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.numel(), 1);
        self.reshape(&vec![1; shape.len()]).expand(shape)
    }

    pub fn sum_all(&self) -> Tensor {
        let ones = vec![1; self.dims()];
        self.sum_to(&ones).reshape(&[1])
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Swap the first two axes of a 3-d tensor.
    pub fn transpose01(&self) -> Tensor {
        assert_eq!(self.dims(), 3, "transpose01 wants 3-d, got {:?}", self.shape());
        let (a, b, r) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..a {
            for j in 0..b {
                let s = (i * b + j) * r;
                let d = (j * a + i) * r;
                data[d..d + r].copy_from_slice(&src[s..s + r]);
            }
        }
        Tensor::from_op(
            "transpose01",
            data,
            vec![b, a, r],
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.transpose01())],
        )
    }

    /// Matrix transpose.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.dims(), 2);
        let (m, n) = (self.shape()[0], self.shape()[1]);
        self.reshape(&[m, n, 1]).transpose01().reshape(&[n, m])
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, inner) = outer_inner(&shape, axis);
        let full = shape[axis];
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Tensor::from_op(
            "narrow",
            data,
            out_shape,
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.pad_axis(axis, start, full))],
        )
    }

    /// Zero-pad along `axis` so this block lands at `start` of a length-`total` axis.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let shape = self.shape().to_vec();
        let len = shape[axis];
        assert!(start + len <= total);
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0; numel(&out_shape)];
        let src = self.data();
        for o in 0..outer {
            let d = (o * total + start) * inner;
            let s = o * len * inner;
            data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
        }
        Tensor::from_op(
            "pad_axis",
            data,
            out_shape,
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.narrow(axis, start, len))],
        )
    }

    pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.dims(), first.len());
            for (ax, (&a, &b)) in p.shape().iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "cat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, inner) = outer_inner(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let s = o * len * inner;
                data.extend_from_slice(&p.data()[s..s + len * inner]);
            }
        }
        Tensor::from_op("cat", data, out_shape, parts.to_vec(), move |ctx| {
            let mut start = 0;
            lens.iter()
                .map(|&len| {
                    let g = ctx.grad.narrow(axis, start, len);
                    start += len;
                    Some(g)
                })
                .collect()
        })
    }

    /// Gather rows (along axis 0).
    pub fn index_select0(&self, idx: &[usize]) -> Tensor {
        let rows = self.shape()[0];
        let inner = self.numel() / rows.max(1);
        let src = self.data();
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            assert!(i < rows, "index {i} out of range for {rows} rows");
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        Tensor::from_op("index_select0", data, shape, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.index_add0(&idx, rows))]
        })
    }

    /// Scatter-add rows into a zero tensor with `rows` rows.
    pub fn index_add0(&self, idx: &[usize], rows: usize) -> Tensor {
        assert_eq!(self.shape()[0], idx.len());
        let inner = if idx.is_empty() { numel(&self.shape()[1..]) } else { self.numel() / idx.len() };
        let mut shape = self.shape().to_vec();
        shape[0] = rows;
        let mut data = vec![0.0; rows * inner];
        let src = self.data();
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < rows);
            for (d, s) in data[i * inner..(i + 1) * inner]
                .iter_mut()
                .zip(&src[k * inner..(k + 1) * inner])
            {
                *d += s;
            }
        }
        let idx: Arc<Vec<usize>> = Arc::new(idx.to_vec());
        Tensor::from_op("index_add0", data, shape, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.index_select0(&idx))]
        })
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        self.matmul_t(other, false, false)
    }

    /// `op(self) @ op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (data, m, n) = gemm(self, other, ta, tb);
        Tensor::from_op(
            "matmul",
            data,
            vec![m, n],
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (a, b, g) = (&ctx.parents[0], &ctx.parents[1], ctx.grad);
                let ga = ctx.needs_grad[0].then(|| {
                    if ta {
                        b.matmul_t(g, tb, true)
                    } else {
                        g.matmul_t(b, false, !tb)
                    }
                });
                let gb = ctx.needs_grad[1].then(|| {
                    if tb {
                        g.matmul_t(a, true, ta)
                    } else {
                        a.matmul_t(g, !ta, false)
                    }
                });
                vec![ga, gb]
            },
        )
    }

    /// Unfold conv patches: `[n,c,h,w] -> [c*k*k, n*ho*wo]`.
    pub fn im2col(&self, geom: ConvGeom) -> Tensor {
        assert_eq!(self.shape(), geom.input_shape(), "im2col input shape");
        let data = im2col_raw(self.data(), &geom);
        Tensor::from_op(
            "im2col",
            data,
            geom.col_shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.col2im(geom))],
        )
    }

    /// Adjoint of [`Tensor::im2col`]: fold patches back, summing overlaps.
    pub fn col2im(&self, geom: ConvGeom) -> Tensor {
        assert_eq!(self.shape(), geom.col_shape(), "col2im input shape");
        let data = col2im_raw(self.data(), &geom);
        Tensor::from_op(
            "col2im",
            data,
            geom.input_shape().to_vec(),
            vec![self.clone()],
            move |ctx| vec![Some(ctx.grad.im2col(geom))],
        )
    }

    /// Row-wise softmax restricted to `mask`; rows with an empty mask are all zero.
    pub fn masked_softmax(&self, mask: &[bool]) -> Tensor {
        assert_eq!(self.dims(), 2);
        assert_eq!(mask.len(), self.numel());
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = r * cols..(r + 1) * cols;
            let max = x[row.clone()]
                .iter()
                .zip(&mask[row.clone()])
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for i in row.clone() {
                if mask[i] {
                    data[i] = (x[i] - max).exp();
                    sum += data[i];
                }
            }
            for v in &mut data[row] {
                *v /= sum;
            }
        }
        Tensor::from_op(
            "masked_softmax",
            data,
            vec![rows, cols],
            vec![self.clone()],
            move |ctx| {
                let (y, g) = (ctx.output, ctx.grad);
                let dot = g.mul(y).sum_to(&[rows, 1]).expand(&[rows, cols]);
                vec![Some(y.mul(&g.sub(&dot)))]
            },
        )
    }

    /// Euclidean norm of all entries, with a zero (sub)gradient at the origin.
    pub fn l2_norm(&self) -> Tensor {
        let value = self.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_op(
            "l2_norm",
            vec![value],
            vec![1],
            vec![self.clone()],
            |ctx| {
                let x = &ctx.parents[0];
                let inv = ctx.output.safe_recip();
                let coef = ctx.grad.mul(&inv).broadcast_scalar(x.shape());
                vec![Some(x.mul(&coef))]
            },
        )
    }
}
