//! Adversarial training loop: critic update, generator update, and the
//! estimator update that keeps `G^gen` meaningful.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bubblegan_autograd::optim::Adam;
use bubblegan_autograd::{backward, GradBuffer, ParamStore, Tensor};

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::discriminator::{type_matrix, Critic, CriticConfig, CriticError};
use crate::exec::Exec;
use crate::generator::{GenError, Generator, GeneratorConfig, LayoutMask, MASK_SIZE};
use crate::graph::{shortest_path_matrix, Topology};
use crate::losses::{adversarial_losses, classification_loss, gcyc_loss, EstimatorConfig, LayoutToGraph, LossError};
use crate::synth::{exclude, Bucket, LayoutSample};

pub const GAN_COMPONENT: &str = "gan";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {term} at step {step}: {value}")]
    NonFiniteLoss { step: u64, term: &'static str, value: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    /// Learning rate of the layout-to-graph estimator.
    pub lr_est: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_gp: f64,
    pub critic_steps_per_gen: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_est: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 32,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda_gp: 10.0,
            critic_steps_per_gen: 1,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr_g > 0.0 && self.lr_d > 0.0 && self.lr_est > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda_gp >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.critic_steps_per_gen == 0 {
            return bad("batch_size and critic_steps_per_gen must be positive");
        }
        Ok(())
    }
}

/// Architecture of all three networks; echoed into every checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub estimator: EstimatorConfig,
}

/// Per-step loss values. The adversarial pair is reported for both players;
/// `l_class` and `l_gcyc` are the generator-side terms, and `total` is the
/// generator objective `l_gan_g + λ₁ l_class + λ₂ l_gcyc`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_gp: f64,
    pub l_class: f64,
    pub l_gcyc: f64,
    pub total: f64,
    /// Critic objective including penalty and classification on reals.
    pub critic_total: f64,
    /// Estimator fit on real layouts.
    pub l_est: f64,
}

impl LossBreakdown {
    fn check(&self, step: u64) -> Result<(), TrainError> {
        let terms = [
            ("l_gan_d", self.l_gan_d),
            ("l_gan_g", self.l_gan_g),
            ("l_gp", self.l_gp),
            ("l_class", self.l_class),
            ("l_gcyc", self.l_gcyc),
            ("total", self.total),
            ("critic_total", self.critic_total),
            ("l_est", self.l_est),
        ];
        match terms.into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, value)) => Err(TrainError::NonFiniteLoss { step, term, value }),
            None => Ok(()),
        }
    }
}

pub struct GanModels {
    pub config: ModelConfig,
    pub generator: Generator,
    pub critic: Critic,
    pub estimator: LayoutToGraph,
    opt_g: Adam,
    opt_d: Adam,
    opt_e: Adam,
    pub step: u64,
}

impl GanModels {
    pub fn new(config: ModelConfig, train: &TrainConfig, rng: &mut impl Rng) -> Result<Self, TrainError> {
        let generator = Generator::new(config.generator.clone(), rng)?;
        let critic = Critic::new(config.critic.clone(), rng);
        let estimator = LayoutToGraph::new(config.estimator.clone(), rng);
        let opt_g = Adam::new(&generator.params, train.lr_g, train.beta1, train.beta2);
        let opt_d = Adam::new(&critic.params, train.lr_d, train.beta1, train.beta2);
        let opt_e = Adam::new(&estimator.params, train.lr_est, train.beta1, train.beta2);
        Ok(Self { config, generator, critic, estimator, opt_g, opt_d, opt_e, step: 0 })
    }

    pub fn save(&self, dir: &Path, train: &TrainConfig) -> Result<(), TrainError> {
        let config = serde_json::json!({ "model": self.config, "train": train });
        checkpoint::save(
            dir,
            GAN_COMPONENT,
            self.step,
            config,
            &[
                ("generator", &self.generator.params),
                ("critic", &self.critic.params),
                ("estimator", &self.estimator.params),
            ],
        )?;
        Ok(())
    }

    /// Rebuild all three networks from a checkpoint. Optimizer moments are
    /// not stored, so resumed training restarts Adam from zero.
    pub fn load(dir: &Path) -> Result<(Self, TrainConfig), TrainError> {
        let ck = Checkpoint::load(dir)?;
        ck.expect_component(GAN_COMPONENT)?;
        let parse = |key: &str| ck.manifest.config.get(key).cloned().unwrap_or(serde_json::Value::Null);
        let model: ModelConfig =
            serde_json::from_value(parse("model")).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let train: TrainConfig =
            serde_json::from_value(parse("train")).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut models = Self::new(model, &train, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.restore_into("generator", &mut models.generator.params)?;
        ck.restore_into("critic", &mut models.critic.params)?;
        ck.restore_into("estimator", &mut models.estimator.params)?;
        models.step = ck.manifest.step;
        Ok((models, train))
    }
}

/// `[M, 1, 32, 32]` ground-truth masks.
pub fn real_masks(sample: &LayoutSample) -> Tensor {
    let m = sample.rects.len();
    let data = sample.rects.iter().flat_map(|r| LayoutMask::from_rect(r).values().to_vec()).collect();
    Tensor::new(data, &[m, 1, MASK_SIZE, MASK_SIZE])
}

struct GraphResult {
    grads: GradBuffer,
    terms: [f64; 4],
}

fn sum_results(results: Vec<Result<GraphResult, TrainError>>) -> Result<(GradBuffer, [f64; 4]), TrainError> {
    let n = results.len() as f64;
    let mut it = results.into_iter();
    let first = it.next().expect("nonempty batch")?;
    let (mut grads, mut terms) = (first.grads, first.terms);
    for r in it {
        let r = r?;
        grads.add(&r.grads);
        for (t, v) in terms.iter_mut().zip(r.terms) {
            *t += v;
        }
    }
    grads.scale(1.0 / n);
    Ok((grads, terms.map(|t| t / n)))
}

fn grads_of(loss: &Tensor, store: &ParamStore) -> GradBuffer {
    store.collect_grads(&backward(loss))
}

/// One critic round, one generator round and one estimator round on `batch`.
///
/// Every graph gets its own RNG seeded from `rng` before the batch fans out,
/// and gradients are reduced in batch order, so the result does not depend
/// on `exec`.
pub fn train_step(
    models: &mut GanModels,
    batch: &[LayoutSample],
    config: &TrainConfig,
    rng: &mut impl Rng,
    exec: Exec,
) -> Result<LossBreakdown, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let step = models.step;
    let mut out = LossBreakdown::default();
    let topos: Vec<Topology> = batch.iter().map(|s| Topology::from_diagram(&s.diagram)).collect();
    let reals: Vec<Tensor> = batch.iter().map(real_masks).collect();
    let types: Vec<Tensor> = batch.iter().map(|s| type_matrix(s.diagram.room_types())).collect();

    for _ in 0..config.critic_steps_per_gen {
        let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
        let gen = models.generator.frozen();
        let critic = &models.critic;
        let results = exec.map_range(batch.len(), |k| -> Result<GraphResult, TrainError> {
            let mut r = ChaCha8Rng::seed_from_u64(seeds[k]);
            let inputs = gen.sample_inputs(&batch[k].diagram, &mut r);
            let fake = gen.forward(&inputs, &topos[k])?;
            let real_out = critic.forward(&reals[k], &types[k], &topos[k])?;
            let fake_out = critic.forward(&fake, &types[k], &topos[k])?;
            let (l_d, _) = adversarial_losses(&real_out.score, &fake_out.score);
            let gp = critic.gradient_penalty(&reals[k], &fake, &types[k], &topos[k], config.lambda_gp, &mut r)?;
            let mut loss = l_d.add(&gp);
            if config.lambda1 > 0.0 {
                let cls = classification_loss(&real_out.class_logits, batch[k].diagram.room_types());
                loss = loss.add(&cls.scale(config.lambda1));
            }
            Ok(GraphResult { grads: grads_of(&loss, &critic.params), terms: [l_d.item(), gp.item(), loss.item(), 0.0] })
        });
        let (grads, [l_d, gp, total, _]) = sum_results(results)?;
        out.l_gan_d = l_d;
        out.l_gp = gp;
        out.critic_total = total;
        out.check(step)?;
        if !grads.all_finite() {
            return Err(TrainError::NonFiniteLoss { step, term: "critic gradient", value: grads.norm() });
        }
        models.opt_d.step(&mut models.critic.params, &grads);
    }

    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let critic = models.critic.frozen();
    let estimator = models.estimator.frozen();
    let gen = &models.generator;
    let results = exec.map_range(batch.len(), |k| -> Result<GraphResult, TrainError> {
        let mut r = ChaCha8Rng::seed_from_u64(seeds[k]);
        let inputs = gen.sample_inputs(&batch[k].diagram, &mut r);
        let fake = gen.forward(&inputs, &topos[k])?;
        let fake_out = critic.forward(&fake, &types[k], &topos[k])?;
        let (_, l_g) = adversarial_losses(&fake_out.score, &fake_out.score);
        let mut loss = l_g.clone();
        let mut terms = [l_g.item(), 0.0, 0.0, 0.0];
        if config.lambda1 > 0.0 {
            let cls = classification_loss(&fake_out.class_logits, batch[k].diagram.room_types());
            terms[1] = cls.item();
            loss = loss.add(&cls.scale(config.lambda1));
        }
        if config.lambda2 > 0.0 {
            let g_gt = shortest_path_matrix(&batch[k].diagram);
            let cyc = gcyc_loss(&g_gt, &estimator.forward(&fake))?;
            terms[2] = cyc.item();
            loss = loss.add(&cyc.scale(config.lambda2));
        }
        terms[3] = loss.item();
        Ok(GraphResult { grads: grads_of(&loss, &gen.params), terms })
    });
    let (grads, [l_g, cls, cyc, total]) = sum_results(results)?;
    out.l_gan_g = l_g;
    out.l_class = cls;
    out.l_gcyc = cyc;
    out.total = total;
    out.check(step)?;
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteLoss { step, term: "generator gradient", value: grads.norm() });
    }
    models.opt_g.step(&mut models.generator.params, &grads);

    if config.lambda2 > 0.0 {
        let est = &models.estimator;
        let results = exec.map_range(batch.len(), |k| -> Result<GraphResult, TrainError> {
            let g_gt = shortest_path_matrix(&batch[k].diagram);
            let loss = gcyc_loss(&g_gt, &est.forward(&reals[k]))?;
            Ok(GraphResult { grads: grads_of(&loss, &est.params), terms: [loss.item(), 0.0, 0.0, 0.0] })
        });
        let (grads, [l_est, ..]) = sum_results(results)?;
        out.l_est = l_est;
        out.check(step)?;
        models.opt_e.step(&mut models.estimator.params, &grads);
    }

    models.step += 1;
    Ok(out)
}

/// Batch indices for one step: the whole set when it fits, otherwise a
/// uniform sample without replacement.
pub fn sample_batch(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    if batch_size >= n {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, batch_size).into_vec();
        idx.sort_unstable();
        idx
    }
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    step: u64,
    #[serde(flatten)]
    losses: &'a LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: LossBreakdown,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_log: PathBuf,
}

/// Train on every sample outside `held_out` (or on all samples when it is
/// `None`), logging one JSON record per step to `metrics.jsonl` and writing
/// checkpoints under `checkpoints/`.
pub fn run_training(
    models: &mut GanModels,
    dataset: &[LayoutSample],
    held_out: Option<Bucket>,
    config: &TrainConfig,
    out_dir: &Path,
    exec: Exec,
) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    let train_set = match held_out {
        Some(b) => exclude(dataset, b),
        None => dataset.to_vec(),
    };
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let metrics_log = out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&metrics_log).map_err(io(&metrics_log))?);
    let ckpt_root = out_dir.join("checkpoints");

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut checkpoints = Vec::new();
    let mut last = LossBreakdown::default();
    for _ in 0..config.max_steps {
        let idx = sample_batch(train_set.len(), config.batch_size, &mut rng);
        let batch: Vec<LayoutSample> = idx.iter().map(|&i| train_set[i].clone()).collect();
        last = train_step(models, &batch, config, &mut rng, exec)?;
        let line = serde_json::to_string(&MetricsRecord { step: models.step, losses: &last }).expect("plain struct");
        writeln!(log, "{line}").map_err(io(&metrics_log))?;
        if config.checkpoint_every > 0 && models.step % config.checkpoint_every == 0 && models.step < config.max_steps {
            log.flush().map_err(io(&metrics_log))?;
            let dir = ckpt_root.join(format!("step-{:06}", models.step));
            models.save(&dir, config)?;
            checkpoints.push(dir);
        }
    }
    log.flush().map_err(io(&metrics_log))?;
    let dir = ckpt_root.join("final");
    models.save(&dir, config)?;
    checkpoints.push(dir);
    Ok(TrainSummary { steps: config.max_steps, last, checkpoints, metrics_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::sample_floorplan;

    pub(crate) fn tiny_models() -> ModelConfig {
        ModelConfig {
            generator: GeneratorConfig {
                noise_dim: 4,
                channels: 2,
                base_resolution: 16,
                gte_blocks: 1,
                mpn_hidden: 2,
                head_channels: [2, 2],
                ..GeneratorConfig::default()
            },
            critic: CriticConfig { channels: 2, type_channels: 1, mpn_hidden: 2, room_dim: 4, ..CriticConfig::default() },
            estimator: EstimatorConfig { channels: 1, embed_dim: 4, pair_hidden: 4 },
        }
    }

    fn batch(seed: u64) -> Vec<LayoutSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![sample_floorplan(&mut rng, 3).unwrap(), sample_floorplan(&mut rng, 2).unwrap()]
    }

    fn run(config: &TrainConfig, steps: usize, exec: Exec) -> (GanModels, Vec<LossBreakdown>) {
        let mut models = GanModels::new(tiny_models(), config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = batch(1);
        let losses = (0..steps).map(|_| train_step(&mut models, &b, config, &mut rng, exec).unwrap()).collect();
        (models, losses)
    }

    #[test]
    fn step_updates_all_models() {
        let config = TrainConfig::default();
        let before = GanModels::new(tiny_models(), &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (after, losses) = run(&config, 1, Exec::default());
        let changed = |a: &ParamStore, b: &ParamStore| a.iter().zip(b.iter()).any(|((_, x), (_, y))| x.data() != y.data());
        assert!(changed(&before.generator.params, &after.generator.params));
        assert!(changed(&before.critic.params, &after.critic.params));
        assert!(changed(&before.estimator.params, &after.estimator.params));
        let l = losses[0];
        assert!((l.total - (l.l_gan_g + l.l_class + 0.1 * l.l_gcyc)).abs() < 1e-12);
        assert_eq!(after.step, 1);
    }

    #[test]
    fn zero_weights_zero_terms() {
        let config = TrainConfig { lambda1: 0.0, lambda2: 0.0, ..TrainConfig::default() };
        let (_, losses) = run(&config, 2, Exec::default());
        for l in losses {
            assert_eq!(l.l_class, 0.0);
            assert_eq!(l.l_gcyc, 0.0);
            assert_eq!(l.total, l.l_gan_g);
        }
    }

    #[test]
    fn bit_reproducible_and_exec_independent() {
        let config = TrainConfig::default();
        let (_, a) = run(&config, 2, Exec::Parallel);
        let (_, b) = run(&config, 2, Exec::Parallel);
        let (_, c) = run(&config, 2, Exec::Sequential);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn dataset_untouched() {
        let config = TrainConfig::default();
        let mut models = GanModels::new(tiny_models(), &config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = batch(2);
        let copy = b.clone();
        train_step(&mut models, &b, &config, &mut ChaCha8Rng::seed_from_u64(0), Exec::default()).unwrap();
        assert_eq!(b, copy);
    }

    #[test]
    fn sample_batch_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_batch(3, 8, &mut rng), vec![0, 1, 2]);
        let idx = sample_batch(10, 4, &mut rng);
        assert_eq!(idx.len(), 4);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(TrainConfig { lr_g: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda2: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
