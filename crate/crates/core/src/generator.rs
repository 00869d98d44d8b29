//! Graph-Transformer generator.
//!
//! Per-room inputs are expanded to `C×8×8` volumes, refined by one
//! Conv-MPN round per resolution (each with its own graph Transformer
//! encoder), upsampled to `32×32` and turned into room masks in `[-1, 1]`.
//! All tensors are node-major `[M, C, H, W]`; graphs are never batched
//! together, so no stage can mix rooms of different layouts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bubblegan_autograd::nn::{ChannelLayerNorm, Conv2d, ConvTranspose2d, Linear};
use bubblegan_autograd::{Init, ParamId, ParamStore, Tensor};

use crate::graph::{build_node_input_with_dim, BubbleDiagram, NodeInput, Topology, NUM_ROOM_TYPES};
use crate::metrics::LayoutModel;
use crate::synth::{Rect, GRID};

pub const MASK_SIZE: usize = GRID as usize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask has no positive pixel")]
    EmptyMask,
    #[error("invalid generator config: {0}")]
    Config(String),
}

/// How a Conv-MPN round combines the encoder output with pooled messages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateVariant {
    /// `CNN[g + GTE; pool(N); pool(N̄)]`
    #[default]
    Eq2,
    /// `CNN[GTE; pool(N); pool(N̄)]` (no identity term)
    Eq3,
    /// `CNN[g + GTE]` (no pooled branches)
    Eq4,
}

impl fmt::Display for UpdateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateVariant::Eq2 => "eq2",
            UpdateVariant::Eq3 => "eq3",
            UpdateVariant::Eq4 => "eq4",
        })
    }
}

impl FromStr for UpdateVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eq2" => Ok(UpdateVariant::Eq2),
            "eq3" => Ok(UpdateVariant::Eq3),
            "eq4" => Ok(UpdateVariant::Eq4),
            _ => Err(format!("unknown variant '{s}' (expected eq2, eq3 or eq4)")),
        }
    }
}

/// Settings shared by every graph Transformer block, in the generator and
/// in the pre-training encoder alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub attention_heads: usize,
    pub use_cna: bool,
    pub use_nna: bool,
    pub use_gmb: bool,
    pub pre_norm: bool,
    /// `s + GMB(norm(s))` instead of replacing `s` by `GMB(norm(s))`.
    pub gmb_residual: bool,
    pub alpha_init: f64,
    pub beta_init: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            attention_heads: 1,
            use_cna: true,
            use_nna: true,
            use_gmb: true,
            pre_norm: true,
            gmb_residual: true,
            alpha_init: 0.0,
            beta_init: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub channels: usize,
    /// Side of the first feature volume; doubled until it reaches 32.
    pub base_resolution: usize,
    pub gte_blocks: usize,
    pub variant: UpdateVariant,
    pub block: BlockConfig,
    /// Hidden width of the two-layer Conv-MPN CNN.
    pub mpn_hidden: usize,
    pub head_channels: [usize; 2],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_dim: 128,
            channels: 16,
            base_resolution: 8,
            gte_blocks: 8,
            variant: UpdateVariant::Eq2,
            block: BlockConfig::default(),
            mpn_hidden: 32,
            head_channels: [256, 128],
        }
    }
}

impl GeneratorConfig {
    pub fn resolutions(&self) -> Vec<usize> {
        let mut res = vec![self.base_resolution];
        while *res.last().unwrap() < MASK_SIZE {
            res.push(res.last().unwrap() * 2);
        }
        res
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.gte_blocks == 0 {
            return bad("gte_blocks must be at least 1");
        }
        if self.channels == 0 || self.mpn_hidden == 0 || self.head_channels.contains(&0) {
            return bad("channel counts must be positive");
        }
        let heads = self.block.attention_heads;
        if heads == 0 || self.channels % heads != 0 {
            return bad("attention_heads must divide channels");
        }
        if self.base_resolution == 0 || MASK_SIZE % self.base_resolution != 0 || !(MASK_SIZE / self.base_resolution).is_power_of_two() {
            return bad("base_resolution must be 32 / 2^k");
        }
        Ok(())
    }
}

/// Per-room segmentation mask, `32×32` row-major, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutMask {
    values: Vec<f64>,
}

impl LayoutMask {
    pub fn new(values: Vec<f64>) -> Result<Self, GenError> {
        if values.len() != MASK_SIZE * MASK_SIZE {
            return Err(GenError::ShapeMismatch(format!("mask needs {} values, got {}", MASK_SIZE * MASK_SIZE, values.len())));
        }
        Ok(Self { values })
    }

    /// `+1` inside the rectangle, `-1` elsewhere.
    pub fn from_rect(r: &Rect) -> Self {
        let values = (0..MASK_SIZE * MASK_SIZE)
            .map(|k| if r.contains((k % MASK_SIZE) as i32, (k / MASK_SIZE) as i32) { 1.0 } else { -1.0 })
            .collect();
        Self { values }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * MASK_SIZE + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Tightest half-open rectangle around the pixels with value `> 0`.
pub fn fit_rectangle(mask: &LayoutMask) -> Result<Rect, GenError> {
    let (mut x0, mut y0, mut x1, mut y1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
    for (k, &v) in mask.values.iter().enumerate() {
        if v > 0.0 {
            let (x, y) = ((k % MASK_SIZE) as i32, (k / MASK_SIZE) as i32);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x0 == i32::MAX {
        return Err(GenError::EmptyMask);
    }
    Ok(Rect { x0, y0, x1, y1 })
}

/// Row-wise `1/sqrt(card(set))`; rows with an empty set get 1 (they are
/// masked out anyway).
fn card_scale(mask: &[bool], m: usize) -> Tensor {
    let mut data = vec![0.0; m * m];
    for r in 0..m {
        let card = mask[r * m..(r + 1) * m].iter().filter(|&&b| b).count();
        let s = if card > 0 { 1.0 / (card as f64).sqrt() } else { 1.0 };
        data[r * m..(r + 1) * m].fill(s);
    }
    Tensor::new(data, &[m, m])
}

/// Per-head attention maps (`[M, M]`) and head-sliced node vectors
/// (`[M, d/heads]`), flattening every node volume to one vector.
pub fn attention_maps(x: &Tensor, mask: &[bool], heads: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let m = x.shape()[0];
    let c = x.shape()[1];
    let p = x.numel() / (m * c);
    assert_eq!(mask.len(), m * m);
    assert_eq!(c % heads, 0, "heads must divide channels");
    let scale = card_scale(mask, m);
    let ch = c / heads;
    let mut maps = Vec::with_capacity(heads);
    let mut values = Vec::with_capacity(heads);
    for h in 0..heads {
        let xh = if heads == 1 {
            x.reshape(&[m, c * p])
        } else {
            x.reshape(&[m, c, p]).narrow(1, h * ch, ch).reshape(&[m, ch * p])
        };
        let logits = xh.matmul_t(&xh, false, true).mul(&scale);
        maps.push(logits.masked_softmax(mask));
        values.push(xh);
    }
    (maps, values)
}

/// `scale · Σ_s softmax_s(g_r·g_s / sqrt(card)) g_s` over the masked set of
/// each node; exactly zero for nodes whose set is empty.
pub fn node_attention(x: &Tensor, mask: &[bool], scale: &Tensor, heads: usize) -> Tensor {
    let shape = x.shape().to_vec();
    let (m, c) = (shape[0], shape[1]);
    let p = x.numel() / (m * c);
    let (maps, values) = attention_maps(x, mask, heads);
    let parts: Vec<Tensor> = maps
        .iter()
        .zip(&values)
        .map(|(a, v)| a.matmul(v).reshape(&[m, c / heads, p]))
        .collect();
    let out = if heads == 1 { parts[0].clone() } else { Tensor::cat(&parts, 1) };
    out.reshape(&shape).mul(&scale.broadcast_scalar(&shape))
}

/// Graph convolution `GeLU(Â g P)`: `Â` mixes nodes, `P` mixes channels at
/// every pixel. For `1×1` volumes this is the plain matrix form.
pub fn gmb(x: &Tensor, a_hat: &Tensor, p: &Tensor) -> Result<Tensor, GenError> {
    let shape = x.shape().to_vec();
    let (m, c) = (shape[0], shape[1]);
    let hw = x.numel() / (m * c);
    if a_hat.shape() != [m, m] || p.shape() != [c, c] {
        return Err(GenError::ShapeMismatch(format!(
            "gmb: features {:?}, adjacency {:?}, P {:?}",
            shape,
            a_hat.shape(),
            p.shape()
        )));
    }
    let ag = a_hat.matmul(&x.reshape(&[m, c * hw]));
    let by_channel = ag.reshape(&[m, c, hw]).transpose01().reshape(&[c, m * hw]);
    let mixed = p.matmul_t(&by_channel, true, false);
    Ok(mixed.reshape(&[c, m, hw]).transpose01().reshape(&shape).gelu())
}

/// Sum of `x` over each node's set, as given by a 0/1 matrix.
pub fn sum_pool(x: &Tensor, selector: &Tensor) -> Tensor {
    let m = x.shape()[0];
    selector.matmul(&x.reshape(&[m, x.numel() / m])).reshape(x.shape())
}

#[derive(Clone, Debug)]
pub struct GteBlock {
    norm_attn: Option<ChannelLayerNorm>,
    norm_gmb: Option<ChannelLayerNorm>,
    alpha: Option<ParamId>,
    beta: Option<ParamId>,
    p: Option<ParamId>,
    heads: usize,
    residual: bool,
    channels: usize,
}

impl GteBlock {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let attn = cfg.use_cna || cfg.use_nna;
        let norm_attn = (cfg.pre_norm && attn).then(|| ChannelLayerNorm::new(ps, &format!("{prefix}.norm1"), channels, rng));
        let alpha = cfg.use_cna.then(|| ps.add(&format!("{prefix}.alpha"), &[1], Init::Constant(cfg.alpha_init), rng));
        let beta = cfg.use_nna.then(|| ps.add(&format!("{prefix}.beta"), &[1], Init::Constant(cfg.beta_init), rng));
        let norm_gmb = (cfg.pre_norm && cfg.use_gmb).then(|| ChannelLayerNorm::new(ps, &format!("{prefix}.norm2"), channels, rng));
        let p = cfg.use_gmb.then(|| ps.add(&format!("{prefix}.gmb.p"), &[channels, channels], Init::FanIn(channels), rng));
        Self { norm_attn, norm_gmb, alpha, beta, p, heads: cfg.attention_heads, residual: cfg.gmb_residual, channels }
    }

    fn normed(norm: &Option<ChannelLayerNorm>, ps: &ParamStore, x: &Tensor) -> Tensor {
        match norm {
            Some(n) => {
                let m = x.shape()[0];
                let c = x.shape()[1];
                n.forward(ps, &x.reshape(&[m, c, x.numel() / (m * c)])).reshape(x.shape())
            }
            None => x.clone(),
        }
    }

    /// `g + CNA(g) + NNA(g)`.
    pub fn attend(&self, ps: &ParamStore, x: &Tensor, topo: &Topology) -> Tensor {
        assert_eq!(x.shape()[1], self.channels);
        if self.alpha.is_none() && self.beta.is_none() {
            return x.clone();
        }
        let h = Self::normed(&self.norm_attn, ps, x);
        let mut s = x.clone();
        if let Some(alpha) = self.alpha {
            s = s.add(&node_attention(&h, &topo.connected_mask(), ps.get(alpha), self.heads));
        }
        if let Some(beta) = self.beta {
            s = s.add(&node_attention(&h, &topo.non_connected_mask(), ps.get(beta), self.heads));
        }
        s
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, topo: &Topology) -> Tensor {
        let s = self.attend(ps, x, topo);
        match self.p {
            Some(p) => {
                let h = Self::normed(&self.norm_gmb, ps, &s);
                let g = gmb(&h, &topo.adjacency_with_self_loops(), ps.get(p)).expect("block shapes are consistent");
                if self.residual {
                    s.add(&g)
                } else {
                    g
                }
            }
            None => s,
        }
    }
}

/// `L` stacked blocks.
#[derive(Clone, Debug)]
pub struct Gte {
    pub blocks: Vec<GteBlock>,
}

impl Gte {
    pub fn new(ps: &mut ParamStore, prefix: &str, channels: usize, num_blocks: usize, cfg: &BlockConfig, rng: &mut impl Rng) -> Self {
        let blocks = (0..num_blocks)
            .map(|b| GteBlock::new(ps, &format!("{prefix}.block{b}"), channels, cfg, rng))
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor, topo: &Topology) -> Tensor {
        self.blocks.iter().fold(x.clone(), |h, b| b.forward(ps, &h, topo))
    }
}

#[derive(Clone, Debug)]
struct Level {
    gte: Gte,
    cnn: [Conv2d; 2],
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    expand: Linear,
    levels: Vec<Level>,
    ups: Vec<ConvTranspose2d>,
    head: [Conv2d; 3],
}

impl Generator {
    /// Copy whose parameters are constants; forward passes through it build
    /// no gradient graph for the weights.
    pub fn frozen(&self) -> Self {
        Self { params: self.params.frozen(), ..self.clone() }
    }

    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self, GenError> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let c = config.channels;
        let b = config.base_resolution;
        let expand = Linear::new(&mut ps, "gen.expand", config.noise_dim + NUM_ROOM_TYPES, c * b * b, rng);
        let n_levels = config.resolutions().len();
        let cnn_in = match config.variant {
            UpdateVariant::Eq4 => c,
            _ => 3 * c,
        };
        let mut levels = Vec::with_capacity(n_levels);
        let mut ups = Vec::with_capacity(n_levels - 1);
        for k in 0..n_levels {
            let gte = Gte::new(&mut ps, &format!("gen.level{k}.gte"), c, config.gte_blocks, &config.block, rng);
            let cnn = [
                Conv2d::same3(&mut ps, &format!("gen.level{k}.cnn0"), cnn_in, config.mpn_hidden, rng),
                Conv2d::same3(&mut ps, &format!("gen.level{k}.cnn1"), config.mpn_hidden, c, rng),
            ];
            levels.push(Level { gte, cnn });
            if k + 1 < n_levels {
                ups.push(ConvTranspose2d::upsample2x(&mut ps, &format!("gen.up{k}"), c, c, rng));
            }
        }
        let [h0, h1] = config.head_channels;
        let head = [
            Conv2d::same3(&mut ps, "gen.head0", c, h0, rng),
            Conv2d::same3(&mut ps, "gen.head1", h0, h1, rng),
            Conv2d::same3(&mut ps, "gen.head2", h1, 1, rng),
        ];
        Ok(Self { config, params: ps, expand, levels, ups, head })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn sample_inputs(&self, diagram: &BubbleDiagram, rng: &mut impl Rng) -> Vec<NodeInput> {
        diagram
            .room_types()
            .iter()
            .map(|&t| build_node_input_with_dim(t, self.config.noise_dim, rng))
            .collect()
    }

    /// Shared affine map from node inputs to `[M, C, b, b]`.
    pub fn expand_to_volume(&self, inputs: &[NodeInput]) -> Result<Tensor, GenError> {
        let dim = self.config.noise_dim + NUM_ROOM_TYPES;
        if let Some(bad) = inputs.iter().find(|i| i.0.len() != dim) {
            return Err(GenError::ShapeMismatch(format!("node input of length {}, expected {dim}", bad.0.len())));
        }
        let m = inputs.len();
        let data: Vec<f64> = inputs.iter().flat_map(|i| i.0.iter().copied()).collect();
        let b = self.config.base_resolution;
        Ok(self
            .expand
            .forward(&self.params, &Tensor::new(data, &[m, dim]))
            .reshape(&[m, self.config.channels, b, b]))
    }

    pub fn conv_mpn_round(&self, level: usize, x: &Tensor, topo: &Topology) -> Tensor {
        let lv = &self.levels[level];
        let encoded = lv.gte.forward(&self.params, x, topo);
        let input = match self.config.variant {
            UpdateVariant::Eq4 => encoded,
            v => {
                let first = if v == UpdateVariant::Eq3 { encoded.sub(x) } else { encoded };
                let pooled_conn = sum_pool(x, &topo.adjacency());
                let pooled_non = sum_pool(x, &topo.complement());
                Tensor::cat(&[first, pooled_conn, pooled_non], 1)
            }
        };
        let h = lv.cnn[0].forward(&self.params, &input).gelu();
        lv.cnn[1].forward(&self.params, &h)
    }

    pub fn upsample(&self, level: usize, x: &Tensor) -> Result<Tensor, GenError> {
        let up = self
            .ups
            .get(level)
            .ok_or_else(|| GenError::ShapeMismatch(format!("no upsampling after level {level}")))?;
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.channels || s[2] * 2 > MASK_SIZE {
            return Err(GenError::ShapeMismatch(format!("cannot upsample {s:?}")));
        }
        Ok(up.forward(&self.params, x))
    }

    /// `[M, C, 32, 32] -> [M, 1, 32, 32]` in `[-1, 1]`.
    pub fn generation_head(&self, x: &Tensor) -> Result<Tensor, GenError> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.channels || s[2] != MASK_SIZE || s[3] != MASK_SIZE {
            return Err(GenError::ShapeMismatch(format!("head expects [M, {}, 32, 32], got {s:?}", self.config.channels)));
        }
        let h = self.head[0].forward(&self.params, x).gelu();
        let h = self.head[1].forward(&self.params, &h).gelu();
        Ok(self.head[2].forward(&self.params, &h).tanh())
    }

    /// Full differentiable pipeline: `[M, 1, 32, 32]` masks.
    pub fn forward(&self, inputs: &[NodeInput], topo: &Topology) -> Result<Tensor, GenError> {
        if inputs.len() != topo.len() {
            return Err(GenError::ShapeMismatch(format!("{} inputs for {} rooms", inputs.len(), topo.len())));
        }
        let mut x = self.expand_to_volume(inputs)?;
        for level in 0..self.levels.len() {
            x = self.conv_mpn_round(level, &x, topo);
            if level + 1 < self.levels.len() {
                x = self.upsample(level, &x)?;
            }
        }
        self.generation_head(&x)
    }

    pub fn generate(&self, diagram: &BubbleDiagram, rng: &mut impl Rng) -> Vec<LayoutMask> {
        let inputs = self.sample_inputs(diagram, rng);
        let masks = self
            .forward(&inputs, &Topology::from_diagram(diagram))
            .expect("inputs built from the diagram");
        masks_from_tensor(&masks)
    }

    /// Parameter names of level-0 GTE blocks with the level prefix removed.
    pub fn gte_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter_map(|(n, _)| n.strip_prefix("gen.level0.gte.").map(str::to_string))
            .collect()
    }

    /// Load encoder blocks (`block{b}.…`) into the GTE of every level.
    pub fn import_gte(&mut self, entries: &[(String, Tensor)]) -> Result<(), GenError> {
        let expected = self.gte_param_names();
        if entries.len() != expected.len() {
            return Err(GenError::ShapeMismatch(format!(
                "encoder has {} block tensors, generator GTE has {}",
                entries.len(),
                expected.len()
            )));
        }
        for level in 0..self.levels.len() {
            for (name, t) in entries {
                let target = format!("gen.level{level}.gte.{name}");
                let id = self
                    .params
                    .id_of(&target)
                    .ok_or_else(|| GenError::ShapeMismatch(format!("generator has no parameter '{target}'")))?;
                if self.params.get(id).shape() != t.shape() {
                    return Err(GenError::ShapeMismatch(format!(
                        "'{name}': encoder {:?} vs generator {:?}",
                        t.shape(),
                        self.params.get(id).shape()
                    )));
                }
            }
        }
        for level in 0..self.levels.len() {
            for (name, t) in entries {
                let id = self.params.id_of(&format!("gen.level{level}.gte.{name}")).unwrap();
                self.params.set(id, t.to_vec());
            }
        }
        Ok(())
    }
}

pub fn masks_from_tensor(t: &Tensor) -> Vec<LayoutMask> {
    let px = MASK_SIZE * MASK_SIZE;
    t.data()
        .chunks(px)
        .map(|c| LayoutMask { values: c.to_vec() })
        .collect()
}

impl LayoutModel for Generator {
    fn layout(&self, diagram: &BubbleDiagram, seed: u64) -> Vec<Option<Rect>> {
        self.generate(diagram, &mut ChaCha8Rng::seed_from_u64(seed))
            .iter()
            .map(|m| fit_rectangle(m).ok())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RoomType;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub(crate) fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            noise_dim: 8,
            channels: 4,
            gte_blocks: 2,
            mpn_hidden: 4,
            head_channels: [4, 4],
            ..GeneratorConfig::default()
        }
    }

    fn random_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn fit_rectangle_examples() {
        let mut v = vec![-1.0; 1024];
        v[2 * 32 + 3] = 0.5;
        v[5 * 32 + 7] = 0.1;
        let r = fit_rectangle(&LayoutMask::new(v).unwrap()).unwrap();
        assert_eq!((r.y0, r.y1, r.x0, r.x1), (2, 6, 3, 8));
        assert_eq!(fit_rectangle(&LayoutMask::new(vec![0.0; 1024]).unwrap()), Err(GenError::EmptyMask));
        assert_eq!(fit_rectangle(&LayoutMask::new(vec![1.0; 1024]).unwrap()).unwrap(), Rect::full());
        let rect = Rect::new(4, 9, 11, 12).unwrap();
        assert_eq!(fit_rectangle(&LayoutMask::from_rect(&rect)).unwrap(), rect);
    }

    #[test]
    fn attention_with_zero_scale_is_exactly_zero() {
        let x = random_tensor(&mut rng(1), &[3, 2, 2, 2]);
        let topo = Topology::from_edges(3, [(0, 1)]);
        let out = node_attention(&x, &topo.connected_mask(), &Tensor::scalar(0.0), 1);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_neighbor_gets_full_weight() {
        let x = random_tensor(&mut rng(2), &[2, 3, 1, 1]);
        let topo = Topology::from_edges(2, [(0, 1)]);
        let out = node_attention(&x, &topo.connected_mask(), &Tensor::scalar(1.0), 1);
        // node 0 sees only node 1 and vice versa
        assert_eq!(&out.data()[..3], &x.data()[3..]);
        assert_eq!(&out.data()[3..], &x.data()[..3]);
    }

    #[test]
    fn equal_logits_average_neighbors() {
        // node 0 has neighbors 1..=3, all orthogonal to it: equal logits
        let mut data = vec![0.0; 16];
        data[0] = 1.0; // node 0 = e0
        data[4 + 1] = 2.0; // node 1 = 2 e1
        data[8 + 2] = -1.0; // node 2 = -e2
        data[12 + 3] = 0.5; // node 3 = 0.5 e3
        let x = Tensor::new(data.clone(), &[4, 4, 1, 1]);
        let topo = Topology::from_edges(4, [(0, 1), (0, 2), (0, 3)]);
        let out = node_attention(&x, &topo.connected_mask(), &Tensor::scalar(1.0), 1);
        let expected: Vec<f64> = (0..4).map(|j| (data[4 + j] + data[8 + j] + data[12 + j]) / 3.0).collect();
        for j in 0..4 {
            assert!((out.data()[j] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gmb_with_identities_is_gelu() {
        let x = random_tensor(&mut rng(3), &[3, 4, 1, 1]);
        let eye = |n: usize| Tensor::new((0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect(), &[n, n]);
        let out = gmb(&x, &eye(3), &eye(4)).unwrap();
        assert_eq!(out.data(), x.gelu().data());
        let zero = gmb(&Tensor::zeros(&[3, 4, 1, 1]), &eye(3), &eye(4)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(gmb(&x, &eye(2), &eye(4)).is_err());
    }

    #[test]
    fn identity_sum_at_init() {
        let mut ps = ParamStore::new();
        let block = GteBlock::new(&mut ps, "b", 4, &BlockConfig::default(), &mut rng(4));
        let x = random_tensor(&mut rng(5), &[3, 4, 2, 2]);
        let topo = Topology::from_edges(3, [(0, 2)]);
        assert_eq!(block.attend(&ps, &x, &topo).data(), x.data());
        assert_eq!(block.forward(&ps, &x, &topo).shape(), x.shape());
    }

    #[test]
    fn isolated_nodes_have_no_connected_attention() {
        let x = random_tensor(&mut rng(6), &[2, 2, 2, 2]);
        let topo = Topology::from_edges(2, []);
        let one = Tensor::scalar(1.0);
        assert!(node_attention(&x, &topo.connected_mask(), &one, 1).data().iter().all(|&v| v == 0.0));
        assert!(node_attention(&x, &topo.non_connected_mask(), &one, 1).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shapes_through_the_pipeline() {
        let g = Generator::new(tiny_config(), &mut rng(7)).unwrap();
        let d = BubbleDiagram::new(vec![RoomType::Kitchen, RoomType::Bedroom, RoomType::Closet, RoomType::Bathroom], [(0, 1), (1, 2)]).unwrap();
        let topo = Topology::from_diagram(&d);
        let inputs = g.sample_inputs(&d, &mut rng(8));
        let x = g.expand_to_volume(&inputs).unwrap();
        assert_eq!(x.shape(), &[4, 4, 8, 8]);
        let x = g.conv_mpn_round(0, &x, &topo);
        assert_eq!(x.shape(), &[4, 4, 8, 8]);
        let x = g.upsample(0, &x).unwrap();
        assert_eq!(x.shape(), &[4, 4, 16, 16]);
        let x = g.upsample(1, &g.conv_mpn_round(1, &x, &topo)).unwrap();
        assert_eq!(x.shape(), &[4, 4, 32, 32]);
        let masks = g.generation_head(&x).unwrap();
        assert_eq!(masks.shape(), &[4, 1, 32, 32]);
        assert!(masks.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(g.upsample(2, &x).is_err());
        assert!(g.generation_head(&Tensor::zeros(&[1, 4, 16, 16])).is_err());
    }

    #[test]
    fn expand_is_affine() {
        let g = Generator::new(tiny_config(), &mut rng(9)).unwrap();
        let mut r = rng(10);
        let a = build_node_input_with_dim(RoomType::Kitchen, 8, &mut r);
        let b = build_node_input_with_dim(RoomType::Closet, 8, &mut r);
        let sum = NodeInput(a.0.iter().zip(&b.0).map(|(x, y)| x + y).collect());
        let zero = NodeInput(vec![0.0; 18]);
        let f = |i: &NodeInput| g.expand_to_volume(std::slice::from_ref(i)).unwrap().to_vec();
        let (fa, fb, fs, f0) = (f(&a), f(&b), f(&sum), f(&zero));
        for k in 0..fa.len() {
            assert!((fs[k] - (fa[k] + fb[k] - f0[k])).abs() < 1e-12);
        }
        assert!(g.expand_to_volume(&[NodeInput(vec![0.0; 5])]).is_err());
    }

    #[test]
    fn variants_differ() {
        let d = BubbleDiagram::new(vec![RoomType::Kitchen, RoomType::Bedroom, RoomType::Closet], [(0, 1)]).unwrap();
        let out = |variant| {
            let mut cfg = tiny_config();
            cfg.variant = variant;
            let g = Generator::new(cfg, &mut rng(11)).unwrap();
            let x = random_tensor(&mut rng(12), &[3, 4, 8, 8]);
            g.conv_mpn_round(0, &x, &Topology::from_diagram(&d)).to_vec()
        };
        assert_ne!(out(UpdateVariant::Eq2), out(UpdateVariant::Eq4));
        assert_ne!(out(UpdateVariant::Eq2), out(UpdateVariant::Eq3));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.block.attention_heads = 3;
        assert!(matches!(Generator::new(cfg, &mut rng(0)), Err(GenError::Config(_))));
        let mut cfg = tiny_config();
        cfg.gte_blocks = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.base_resolution = 12;
        assert!(cfg.validate().is_err());
        assert_eq!(GeneratorConfig::default().resolutions(), vec![8, 16, 32]);
    }

    #[test]
    fn multi_head_splits_channels() {
        let x = random_tensor(&mut rng(13), &[3, 4, 2, 2]);
        let topo = Topology::from_edges(3, [(0, 1), (1, 2)]);
        let (maps, _) = attention_maps(&x, &topo.non_connected_mask(), 2);
        assert_eq!(maps.len(), 2);
        let out = node_attention(&x, &topo.connected_mask(), &Tensor::scalar(0.5), 2);
        assert_eq!(out.shape(), x.shape());
    }
}
