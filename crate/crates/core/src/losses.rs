//! Training objectives and the layout-to-graph estimator behind the cycle
//! loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use bubblegan_autograd::nn::{Conv2d, Linear};
use bubblegan_autograd::{ParamStore, Tensor};

use crate::generator::MASK_SIZE;
use crate::graph::{one_hot, RoomType, WeightedAdjacency, NUM_ROOM_TYPES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Wasserstein terms `(fake − real, −fake)`; the penalty is added by the caller.
pub fn adversarial_losses(real_score: &Tensor, fake_score: &Tensor) -> (Tensor, Tensor) {
    (fake_score.sub(real_score), fake_score.neg())
}

/// Multi-hot vector of the room types present.
pub fn presence_target(types: &[RoomType]) -> [f64; NUM_ROOM_TYPES] {
    let mut t = [0.0; NUM_ROOM_TYPES];
    for &r in types {
        t[r.id()] = 1.0;
    }
    t
}

/// Mean binary cross-entropy with logits. Pooled logits (`[10]`) are
/// scored against the multi-hot presence vector, per-room logits
/// (`[M, 10]`) against each room's one-hot type.
pub fn classification_loss(logits: &Tensor, types: &[RoomType]) -> Tensor {
    let target: Vec<f64> = if logits.dims() == 2 {
        assert_eq!(logits.shape(), [types.len(), NUM_ROOM_TYPES]);
        types.iter().flat_map(|&t| one_hot(t)).collect()
    } else {
        assert_eq!(logits.numel(), NUM_ROOM_TYPES);
        presence_target(types).to_vec()
    };
    let y = Tensor::new(target, logits.shape());
    // BCE(σ(l), y) = softplus(l) − y·l
    logits.softplus().sub(&logits.mul(&y)).mean_all()
}

/// `‖G^gt − G^gen‖_F`.
pub fn gcyc_loss(g_gt: &WeightedAdjacency, g_gen: &Tensor) -> Result<Tensor, LossError> {
    let m = g_gt.size();
    if g_gen.shape() != [m, m] {
        return Err(LossError::ShapeMismatch(format!("G^gt is {m}x{m}, G^gen is {:?}", g_gen.shape())));
    }
    Ok(Tensor::new(g_gt.to_f64(), &[m, m]).sub(g_gen).l2_norm())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub channels: usize,
    pub embed_dim: usize,
    pub pair_hidden: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { channels: 8, embed_dim: 32, pair_hidden: 32 }
    }
}

/// Predicts the weighted adjacency of a set of room masks: a strided CNN
/// embeds each mask, a pairwise MLP scores every ordered pair, and the
/// result is symmetrized with a zero diagonal.
#[derive(Clone, Debug)]
pub struct LayoutToGraph {
    pub config: EstimatorConfig,
    pub params: ParamStore,
    convs: [Conv2d; 3],
    embed: Linear,
    left: Linear,
    right: Linear,
    out: Linear,
}

impl LayoutToGraph {
    pub fn new(config: EstimatorConfig, rng: &mut impl Rng) -> Self {
        let mut ps = ParamStore::new();
        let c = config.channels;
        // 32 -> 16 -> 8 -> 4
        let convs = [
            Conv2d::new(&mut ps, "est.conv0", 1, c, 3, 2, 1, rng),
            Conv2d::new(&mut ps, "est.conv1", c, 2 * c, 3, 2, 1, rng),
            Conv2d::new(&mut ps, "est.conv2", 2 * c, 2 * c, 3, 2, 1, rng),
        ];
        let flat = 2 * c * (MASK_SIZE / 8) * (MASK_SIZE / 8);
        let embed = Linear::new(&mut ps, "est.embed", flat, config.embed_dim, rng);
        let left = Linear::new(&mut ps, "est.left", config.embed_dim, config.pair_hidden, rng);
        let right = Linear::new(&mut ps, "est.right", config.embed_dim, config.pair_hidden, rng);
        let out = Linear::new(&mut ps, "est.out", config.pair_hidden, 1, rng);
        Self { config, params: ps, convs, embed, left, right, out }
    }

    pub fn frozen(&self) -> Self {
        Self { params: self.params.frozen(), ..self.clone() }
    }

    /// Masks `[M, 1, 32, 32]` to a symmetric `[M, M]` matrix with zero diagonal.
    pub fn forward(&self, masks: &Tensor) -> Tensor {
        let m = masks.shape()[0];
        assert_eq!(masks.shape(), [m, 1, MASK_SIZE, MASK_SIZE]);
        let mut h = masks.clone();
        for conv in &self.convs {
            h = conv.forward(&self.params, &h).gelu();
        }
        let e = self.embed.forward(&self.params, &h.reshape(&[m, h.numel() / m])).gelu();
        let k = self.config.pair_hidden;
        let a = self.left.forward(&self.params, &e).reshape(&[m, 1, k]).expand(&[m, m, k]);
        let b = self.right.forward(&self.params, &e).reshape(&[1, m, k]).expand(&[m, m, k]);
        let s = self.out.forward(&self.params, &a.add(&b).gelu().reshape(&[m * m, k])).reshape(&[m, m]);
        let off_diag = Tensor::new((0..m * m).map(|i| if i / m == i % m { 0.0 } else { 0.5 }).collect(), &[m, m]);
        s.add(&s.t()).mul(&off_diag)
    }
}
