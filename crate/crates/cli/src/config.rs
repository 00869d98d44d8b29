//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid
//! by command-line flags. The fully resolved value is written next to every
//! run's outputs as `config.resolved.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use bubblegan_core::exec::Exec;
use bubblegan_core::generator::UpdateVariant;
use bubblegan_core::pretrain::PretrainConfig;
use bubblegan_core::synth::{Bucket, RoomCountRange};
use bubblegan_core::training::{ModelConfig, TrainConfig};

use crate::CliError;

pub const RESOLVED_NAME: &str = "config.resolved.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub min_rooms: usize,
    pub max_rooms: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let r = RoomCountRange::default();
        Self { count: 1000, min_rooms: r.min, max_rooms: r.max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub extractor_seed: u64,
    /// Random mask plans per diagram when measuring reconstruction accuracy.
    pub recovery_plans: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 64, extractor_seed: 0, recovery_plans: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub samples: usize,
    pub image_scale: u32,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { samples: 4, image_scale: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Held-out room-count bucket.
    pub bucket: Bucket,
    /// Train and evaluate on the same samples instead of a bucket split.
    pub overfit: bool,
    /// Pre-train the GTE encoder before adversarial training.
    pub use_pretrain: bool,
    pub parallel: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bucket: Bucket::R10to12,
            overfit: false,
            use_pretrain: true,
            parallel: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

/// Command-line values that override the file layer; `None`/`false` leave
/// the underlying value alone.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bucket: Option<Bucket>,
    pub train_steps: Option<u64>,
    pub pretrain_steps: Option<u64>,
    pub mask_ratio: Option<f64>,
    pub variant: Option<UpdateVariant>,
    pub no_cna: bool,
    pub no_nna: bool,
    pub no_gmb: bool,
    pub no_pretrain: bool,
    pub overfit: bool,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file` if given, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.train.seed = s;
            self.pretrain.seed = s;
        }
        if let Some(b) = o.bucket {
            self.bucket = b;
        }
        if let Some(s) = o.train_steps {
            self.train.max_steps = s;
        }
        if let Some(s) = o.pretrain_steps {
            self.pretrain.steps = s;
        }
        if let Some(r) = o.mask_ratio {
            self.pretrain.mask_ratio = r;
        }
        if let Some(v) = o.variant {
            self.model.generator.variant = v;
        }
        for block in [&mut self.model.generator.block, &mut self.pretrain.block] {
            block.use_cna &= !o.no_cna;
            block.use_nna &= !o.no_nna;
            block.use_gmb &= !o.no_gmb;
        }
        self.use_pretrain &= !o.no_pretrain;
        self.overfit |= o.overfit;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |e: String| CliError::Config(e);
        self.model.generator.validate().map_err(|e| err(e.to_string()))?;
        self.train.validate().map_err(|e| err(e.to_string()))?;
        self.pretrain.validate().map_err(|e| err(e.to_string()))?;
        if self.pretrain.token_dim != self.model.generator.channels {
            return Err(err(format!(
                "pretrain.token_dim ({}) must equal model.generator.channels ({}) so the encoder can initialize the generator",
                self.pretrain.token_dim, self.model.generator.channels
            )));
        }
        if self.pretrain.block != self.model.generator.block || self.pretrain.encoder_blocks != self.model.generator.gte_blocks {
            return Err(err("pretrain encoder blocks must match the generator's GTE (block settings and count)".into()));
        }
        if self.synth.min_rooms == 0 || self.synth.min_rooms > self.synth.max_rooms {
            return Err(err("synth room range must satisfy 1 <= min_rooms <= max_rooms".into()));
        }
        if self.generate.image_scale == 0 {
            return Err(err("generate.image_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
