//! Node-classification critic and the WGAN-GP gradient penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use bubblegan_autograd::nn::{Conv2d, Linear};
use bubblegan_autograd::{grad, ParamStore, Tensor};

use crate::generator::{sum_pool, MASK_SIZE};
use crate::graph::{one_hot, RoomType, Topology, NUM_ROOM_TYPES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CriticError {
    #[error("{observations} observations for a diagram with {rooms} rooms")]
    LengthMismatch { observations: usize, rooms: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub channels: usize,
    /// Channels of the reshaped type embedding (`8` → an 8192-d expansion).
    pub type_channels: usize,
    pub mpn_hidden: usize,
    pub room_dim: usize,
    pub leaky_slope: f64,
    /// Classify each room instead of the pooled graph vector.
    pub per_room_classes: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { channels: 16, type_channels: 8, mpn_hidden: 32, room_dim: 128, leaky_slope: 0.2, per_room_classes: false }
    }
}

/// Real score plus room-type logits: `[10]` pooled, or `[M, 10]` per room.
#[derive(Clone, Debug)]
pub struct CriticOutput {
    pub score: Tensor,
    pub class_logits: Tensor,
}

#[derive(Clone, Debug)]
struct MpnRound {
    cnn: [Conv2d; 2],
    down: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub config: CriticConfig,
    pub params: ParamStore,
    type_embed: Linear,
    embed: [Conv2d; 3],
    rounds: [MpnRound; 2],
    tail: [Conv2d; 3],
    score_head: Linear,
    class_head: Linear,
}

/// `[M, 10]` one-hot rows.
pub fn type_matrix(types: &[RoomType]) -> Tensor {
    let data = types.iter().flat_map(|&t| one_hot(t)).collect();
    Tensor::new(data, &[types.len(), NUM_ROOM_TYPES])
}

impl Critic {
    /// Copy whose parameters are constants; forward passes through it build
    /// no gradient graph for the weights.
    pub fn frozen(&self) -> Self {
        Self { params: self.params.frozen(), ..self.clone() }
    }

    pub fn new(config: CriticConfig, rng: &mut impl Rng) -> Self {
        let mut ps = ParamStore::new();
        let c = config.channels;
        let s = MASK_SIZE;
        let type_embed = Linear::new(&mut ps, "critic.type_embed", NUM_ROOM_TYPES, config.type_channels * s * s, rng);
        let embed = [
            Conv2d::same3(&mut ps, "critic.embed0", config.type_channels + 1, c, rng),
            Conv2d::same3(&mut ps, "critic.embed1", c, c, rng),
            Conv2d::same3(&mut ps, "critic.embed2", c, c, rng),
        ];
        let round = |ps: &mut ParamStore, k: usize, rng: &mut _| MpnRound {
            cnn: [
                Conv2d::same3(ps, &format!("critic.mpn{k}.cnn0"), 3 * c, config.mpn_hidden, rng),
                Conv2d::same3(ps, &format!("critic.mpn{k}.cnn1"), config.mpn_hidden, c, rng),
            ],
            down: Conv2d::new(ps, &format!("critic.mpn{k}.down"), c, c, 3, 2, 1, rng),
        };
        let rounds = [round(&mut ps, 0, rng), round(&mut ps, 1, rng)];
        // 8 -> 4 -> 2 -> 1 px
        let tail = [
            Conv2d::new(&mut ps, "critic.tail0", c, 2 * c, 3, 2, 1, rng),
            Conv2d::new(&mut ps, "critic.tail1", 2 * c, 4 * c, 3, 2, 1, rng),
            Conv2d::new(&mut ps, "critic.tail2", 4 * c, config.room_dim, 2, 1, 0, rng),
        ];
        let score_head = Linear::new(&mut ps, "critic.score", config.room_dim, 1, rng);
        let class_head = Linear::new(&mut ps, "critic.class", config.room_dim, NUM_ROOM_TYPES, rng);
        Self { config, params: ps, type_embed, embed, rounds, tail, score_head, class_head }
    }

    fn act(&self, x: &Tensor) -> Tensor {
        x.leaky_relu(self.config.leaky_slope)
    }

    /// Masks `[M, 1, 32, 32]` and one-hot types `[M, 10]` to `[M, C, 32, 32]`.
    pub fn embed_room_input(&self, masks: &Tensor, types: &Tensor) -> Result<Tensor, CriticError> {
        let m = types.shape()[0];
        let s = MASK_SIZE;
        if masks.shape() != [m, 1, s, s] || types.shape() != [m, NUM_ROOM_TYPES] {
            return Err(CriticError::ShapeMismatch(format!("masks {:?}, types {:?}", masks.shape(), types.shape())));
        }
        let t = self
            .type_embed
            .forward(&self.params, types)
            .reshape(&[m, self.config.type_channels, s, s]);
        let x = Tensor::cat(&[masks.clone(), t], 1);
        let h = self.act(&self.embed[0].forward(&self.params, &x));
        let h = self.act(&self.embed[1].forward(&self.params, &h));
        Ok(self.act(&self.embed[2].forward(&self.params, &h)))
    }

    /// Per-room 128-d vectors `d_r`, `[M, room_dim]`.
    pub fn room_vectors(&self, masks: &Tensor, types: &Tensor, topo: &Topology) -> Result<Tensor, CriticError> {
        let m = types.shape()[0];
        if topo.len() != m {
            return Err(CriticError::LengthMismatch { observations: m, rooms: topo.len() });
        }
        let mut h = self.embed_room_input(masks, types)?;
        let (conn, non) = (topo.adjacency(), topo.complement());
        for round in &self.rounds {
            let x = Tensor::cat(&[h.clone(), sum_pool(&h, &conn), sum_pool(&h, &non)], 1);
            let x = self.act(&round.cnn[0].forward(&self.params, &x));
            let x = self.act(&round.cnn[1].forward(&self.params, &x));
            h = self.act(&round.down.forward(&self.params, &x));
        }
        for (k, conv) in self.tail.iter().enumerate() {
            h = conv.forward(&self.params, &h);
            if k + 1 < self.tail.len() {
                h = self.act(&h);
            }
        }
        Ok(h.reshape(&[m, self.config.room_dim]))
    }

    pub fn forward(&self, masks: &Tensor, types: &Tensor, topo: &Topology) -> Result<CriticOutput, CriticError> {
        let d = self.room_vectors(masks, types, topo)?;
        let m = d.shape()[0];
        let pooled = d.sum_to(&[1, self.config.room_dim]);
        let score = self.score_head.forward(&self.params, &pooled).reshape(&[1]);
        let class_logits = if self.config.per_room_classes {
            self.class_head.forward(&self.params, &d).reshape(&[m, NUM_ROOM_TYPES])
        } else {
            self.class_head.forward(&self.params, &pooled).reshape(&[NUM_ROOM_TYPES])
        };
        Ok(CriticOutput { score, class_logits })
    }

    /// Penalty for one graph with a fresh interpolation coefficient.
    pub fn gradient_penalty(
        &self,
        real: &Tensor,
        fake: &Tensor,
        types: &Tensor,
        topo: &Topology,
        lambda_gp: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor, CriticError> {
        let eps: f64 = rng.random();
        let mut err = None;
        let penalty = gradient_penalty(
            |x| match self.forward(x, types, topo) {
                Ok(out) => out.score,
                Err(e) => {
                    err = Some(e);
                    Tensor::scalar(0.0)
                }
            },
            real,
            fake,
            eps,
            lambda_gp,
        );
        match err {
            Some(e) => Err(e),
            None => Ok(penalty),
        }
    }
}

/// `λ (‖∇_x̂ f(x̂)‖₂ − 1)²` at `x̂ = ε·real + (1−ε)·fake`.
///
/// The result stays differentiable with respect to whatever parameters `f`
/// closes over; the inputs themselves are treated as constants.
pub fn gradient_penalty(
    mut critic: impl FnMut(&Tensor) -> Tensor,
    real: &Tensor,
    fake: &Tensor,
    eps: f64,
    lambda_gp: f64,
) -> Tensor {
    assert_eq!(real.shape(), fake.shape());
    let mixed: Vec<f64> = real.data().iter().zip(fake.data()).map(|(r, f)| eps * r + (1.0 - eps) * f).collect();
    let x_hat = Tensor::leaf(mixed, real.shape());
    let score = critic(&x_hat).sum_all();
    let norm = match grad(&score, &[&x_hat], true).pop().flatten() {
        Some(g) => g.l2_norm(),
        // the score does not depend on the input at all
        None => Tensor::scalar(0.0),
    };
    norm.add_scalar(-1.0).square().scale(lambda_gp).reshape(&[1])
}
