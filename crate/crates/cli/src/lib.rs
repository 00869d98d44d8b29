//! `bubblegan` command line: synthetic data, pre-training, adversarial
//! training, generation, evaluation and the ablation matrix.

pub mod ablate;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bubblegan_core::checkpoint::Checkpoint;
use bubblegan_core::generator::UpdateVariant;
use bubblegan_core::graph::{BubbleDiagram, RoomType};
use bubblegan_core::metrics::{
    compatibility, frechet_distance_of_features, rasterize, rasterize_partial, evaluate_suite, EvalReport, FeatureExtractor,
    LayoutModel, RandomConvExtractor,
};
use bubblegan_core::pretrain::{export_encoder, pretrain_run, Pretrainer, ENCODER_COMPONENT};
use bubblegan_core::synth::{exclude, read_dataset, sample_corpus, select, write_dataset, Bucket, LayoutSample, RoomCountRange};
use bubblegan_core::training::{run_training, GanModels, GAN_COMPONENT};

use crate::config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("i/o at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.to_path_buf(), message: e.to_string() }
    }

    fn run(e: impl std::fmt::Display) -> Self {
        CliError::Run(e.to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Run(_) => "run",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "bubblegan", version, about = "Floorplan layouts from bubble diagrams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Shared {
    /// JSON configuration file (defaults < file < flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output location; every artifact of the run goes here.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out room-count bucket: 1-3, 4-6, 7-9, 10-12 or 13+.
    #[arg(long)]
    pub bucket: Option<Bucket>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Conv-MPN update: eq2, eq3 or eq4.
    #[arg(long)]
    pub variant: Option<UpdateVariant>,
    #[arg(long)]
    pub no_cna: bool,
    #[arg(long)]
    pub no_nna: bool,
    #[arg(long)]
    pub no_gmb: bool,
    #[arg(long)]
    pub no_pretrain: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic guillotine-split corpus as JSON lines.
    SynthData {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        min_rooms: Option<usize>,
        #[arg(long)]
        max_rooms: Option<usize>,
    },
    /// Masked graph pre-training of the GTE encoder.
    Pretrain {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
    },
    /// Adversarial training (optionally after pre-training).
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
        /// Train and evaluate on the same samples instead of a bucket split.
        #[arg(long)]
        overfit: bool,
    },
    /// Sample layouts for one bubble diagram.
    Generate {
        #[command(flatten)]
        shared: Shared,
        /// JSON file `{"rooms": [type ids], "edges": [[i, j], ...]}`.
        #[arg(long)]
        diagram: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compatibility and Fréchet distance on a bucket.
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
        /// Score these layouts (dataset format) instead of a checkpoint.
        #[arg(long)]
        layouts: Option<PathBuf>,
        #[arg(long)]
        overfit: bool,
    },
    /// Run the component ablation matrix.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: PathBuf,
        /// Run a single preset, by row (`b7`) or name (`no-gmb`).
        #[arg(long)]
        only: Option<String>,
        #[arg(long)]
        overfit: bool,
    },
}

impl Command {
    fn shared(&self) -> &Shared {
        match self {
            Command::SynthData { shared, .. }
            | Command::Pretrain { shared, .. }
            | Command::Train { shared, .. }
            | Command::Generate { shared, .. }
            | Command::Evaluate { shared, .. }
            | Command::Ablate { shared, .. } => shared,
        }
    }

    fn overrides(&self) -> Overrides {
        let s = self.shared();
        let (train_steps, pretrain_steps) = match self {
            Command::Pretrain { .. } => (None, s.steps),
            Command::Ablate { .. } => (s.steps, s.steps),
            _ => (s.steps, None),
        };
        let overfit = matches!(
            self,
            Command::Train { overfit: true, .. } | Command::Evaluate { overfit: true, .. } | Command::Ablate { overfit: true, .. }
        );
        Overrides {
            seed: s.seed,
            bucket: s.bucket,
            train_steps,
            pretrain_steps,
            mask_ratio: s.mask_ratio,
            variant: s.variant,
            no_cna: s.no_cna,
            no_nna: s.no_nna,
            no_gmb: s.no_gmb,
            no_pretrain: s.no_pretrain,
            overfit,
        }
    }

    /// Layered configuration with this command's verb-specific values.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::resolve(self.shared().config.as_deref(), &self.overrides())?;
        match self {
            Command::SynthData { count, min_rooms, max_rooms, .. } => {
                cfg.synth.count = count.unwrap_or(cfg.synth.count);
                cfg.synth.min_rooms = min_rooms.unwrap_or(cfg.synth.min_rooms);
                cfg.synth.max_rooms = max_rooms.unwrap_or(cfg.synth.max_rooms);
            }
            Command::Generate { samples, .. } => cfg.generate.samples = samples.unwrap_or(cfg.generate.samples),
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse and run; returns the process exit status. Failures print one JSON
/// error record on stderr.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<(), CliError> {
    let cfg = command.resolve()?;
    let out = &command.shared().out;
    match command {
        Command::SynthData { .. } => synth_data(&cfg, out),
        Command::Pretrain { data, .. } => {
            cfg.write_resolved(out)?;
            pretrain(&cfg, &load(data)?, out).map(|_| ())
        }
        Command::Train { data, .. } => {
            cfg.write_resolved(out)?;
            train(&cfg, &load(data)?, command.shared().checkpoint.as_deref(), out).map(|_| ())
        }
        Command::Generate { diagram, .. } => {
            cfg.write_resolved(out)?;
            let ck = command
                .shared()
                .checkpoint
                .as_deref()
                .ok_or_else(|| CliError::Usage("generate needs --checkpoint".into()))?;
            generate(&cfg, ck, &read_diagram(diagram)?, out)
        }
        Command::Evaluate { data, layouts, .. } => {
            cfg.write_resolved(out)?;
            let data = load(data)?;
            let report = match (layouts, command.shared().checkpoint.as_deref()) {
                (Some(l), _) => evaluate_layouts(&cfg, &data, &load(l)?, out)?,
                (None, Some(ck)) => {
                    let (models, _) = GanModels::load(ck).map_err(CliError::run)?;
                    evaluate_model(&cfg, &data, &models.generator, out)?
                }
                (None, None) => return Err(CliError::Usage("evaluate needs --checkpoint or --layouts".into())),
            };
            write_json(&out.join("report.json"), &report)
        }
        Command::Ablate { data, only, .. } => {
            let presets: Vec<&ablate::Preset> = match only {
                Some(key) => vec![ablate::find(key).ok_or_else(|| CliError::Usage(format!("unknown ablation `{key}`")))?],
                None => ablate::PRESETS.iter().collect(),
            };
            cfg.write_resolved(out)?;
            ablation(&cfg, &load(data)?, &presets, out)
        }
    }
}

fn load(path: &Path) -> Result<Vec<LayoutSample>, CliError> {
    read_dataset(path).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    cfg.write_resolved(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let range = RoomCountRange { min: cfg.synth.min_rooms, max: cfg.synth.max_rooms };
    let samples = sample_corpus(&mut rng, cfg.synth.count, range).map_err(CliError::run)?;
    write_dataset(&samples, out).map_err(|e| CliError::io(out, e))
}

/// Training and evaluation sets under the configured protocol.
fn split(cfg: &RunConfig, data: &[LayoutSample]) -> (Vec<LayoutSample>, Vec<LayoutSample>, String) {
    if cfg.overfit {
        (data.to_vec(), data.to_vec(), "train".into())
    } else {
        (exclude(data, cfg.bucket), select(data, cfg.bucket), cfg.bucket.label().into())
    }
}

#[derive(Serialize, Deserialize)]
struct PretrainReport {
    steps: u64,
    final_loss: Option<f64>,
    node_accuracy: Option<f64>,
    edge_accuracy: Option<f64>,
}

fn pretrain(cfg: &RunConfig, data: &[LayoutSample], out: &Path) -> Result<PathBuf, CliError> {
    let (train_set, _, _) = split(cfg, data);
    let diagrams: Vec<BubbleDiagram> = train_set.into_iter().map(|s| s.diagram).collect();
    let mut model = Pretrainer::new(cfg.pretrain.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(CliError::run)?;
    let summary = pretrain_run(&mut model, &diagrams, Some(out), cfg.exec()).map_err(CliError::run)?;
    let (node_accuracy, edge_accuracy) = model
        .recovery_accuracy(&diagrams, cfg.eval.recovery_plans, cfg.seed)
        .map_err(CliError::run)?;
    let report = PretrainReport {
        steps: cfg.pretrain.steps,
        final_loss: summary.records.last().map(|r| r.loss),
        node_accuracy,
        edge_accuracy,
    };
    write_json(&out.join("pretrain_report.json"), &report)?;
    Ok(summary.checkpoint.expect("output directory was given"))
}

/// Pre-train (unless disabled or an encoder is supplied), then train the GAN.
/// `checkpoint` may be an encoder to import or a GAN checkpoint to resume.
fn train(cfg: &RunConfig, data: &[LayoutSample], checkpoint: Option<&Path>, out: &Path) -> Result<GanModels, CliError> {
    let component = match checkpoint {
        Some(p) => Some(Checkpoint::load(p).map_err(CliError::run)?.manifest.component),
        None => None,
    };
    let mut models = match (component.as_deref(), checkpoint) {
        (Some(GAN_COMPONENT), Some(p)) => GanModels::load(p).map_err(CliError::run)?.0,
        _ => GanModels::new(cfg.model.clone(), &cfg.train, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(CliError::run)?,
    };
    let encoder = match (component.as_deref(), checkpoint) {
        (Some(GAN_COMPONENT), _) => None,
        (Some(ENCODER_COMPONENT), Some(p)) if cfg.use_pretrain => Some(p.to_path_buf()),
        (Some(ENCODER_COMPONENT), _) => None,
        (Some(other), _) => return Err(CliError::Usage(format!("cannot train from a `{other}` checkpoint"))),
        (None, _) if cfg.use_pretrain => Some(pretrain(cfg, data, &out.join("pretrain"))?),
        (None, _) => None,
    };
    if let Some(p) = encoder {
        let ck = Checkpoint::load(&p).map_err(CliError::run)?;
        let entries = export_encoder(&ck).map_err(CliError::run)?;
        models.generator.import_gte(&entries).map_err(CliError::run)?;
    }
    let held_out = (!cfg.overfit).then_some(cfg.bucket);
    run_training(&mut models, data, held_out, &cfg.train, out, cfg.exec()).map_err(CliError::run)?;
    Ok(models)
}

#[derive(Deserialize)]
struct DiagramFile {
    rooms: Vec<RoomType>,
    #[serde(default)]
    edges: Vec<[usize; 2]>,
}

fn read_diagram(path: &Path) -> Result<BubbleDiagram, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let d: DiagramFile = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    BubbleDiagram::new(d.rooms, d.edges.iter().map(|e| (e[0], e[1]))).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct GeneratedLayout {
    rooms: Vec<RoomType>,
    rects: Vec<Option<[i32; 4]>>,
    compatibility: usize,
}

fn generate(cfg: &RunConfig, checkpoint: &Path, diagram: &BubbleDiagram, out: &Path) -> Result<(), CliError> {
    let (models, _) = GanModels::load(checkpoint).map_err(CliError::run)?;
    let seeds: Vec<u64> = {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.generate.samples).map(|_| rng.random()).collect()
    };
    for (k, &seed) in seeds.iter().enumerate() {
        let rects = models.generator.layout(diagram, seed);
        let img = rasterize_partial(&rects, diagram.room_types());
        let png = out.join(format!("sample_{k:03}.png"));
        img.write_png(&png, cfg.generate.image_scale).map_err(|e| CliError::io(&png, e))?;
        let record = GeneratedLayout {
            rooms: diagram.room_types().to_vec(),
            rects: rects.iter().map(|r| r.map(|r| r.to_array())).collect(),
            compatibility: bubblegan_core::metrics::compatibility_partial(diagram, &rects).map_err(CliError::run)?,
        };
        write_json(&out.join(format!("sample_{k:03}.json")), &record)?;
    }
    Ok(())
}

fn extractor(cfg: &RunConfig, out: &Path) -> Result<RandomConvExtractor, CliError> {
    let ex = RandomConvExtractor::new(cfg.eval.extractor_seed);
    let path = out.join("extractor.json");
    ex.save(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(ex)
}

fn evaluate_model(cfg: &RunConfig, data: &[LayoutSample], model: &dyn LayoutModel, out: &Path) -> Result<EvalReport, CliError> {
    let (_, held_out, label) = split(cfg, data);
    if held_out.is_empty() {
        return Err(CliError::Run(format!("no evaluation samples in bucket {label}")));
    }
    let ex = extractor(cfg, out)?;
    evaluate_suite(model, &held_out, &label, &ex, cfg.eval.n_samples, cfg.seed, cfg.exec()).map_err(CliError::run)
}

/// Score stored layouts: compatibility against their own diagrams and
/// Fréchet distance against the evaluation split.
fn evaluate_layouts(cfg: &RunConfig, data: &[LayoutSample], layouts: &[LayoutSample], out: &Path) -> Result<EvalReport, CliError> {
    let (_, held_out, label) = split(cfg, data);
    if held_out.is_empty() || layouts.is_empty() {
        return Err(CliError::Run(format!("nothing to compare in bucket {label}")));
    }
    let ex = extractor(cfg, out)?;
    let exec = cfg.exec();
    let compat: usize = layouts
        .iter()
        .map(|s| compatibility(&s.diagram, &s.rects))
        .sum::<Result<usize, _>>()
        .map_err(CliError::run)?;
    let feats = |set: &[LayoutSample]| exec.map(set, |s| ex.features(&rasterize(&s.rects, s.diagram.room_types())));
    let fid = frechet_distance_of_features(&feats(layouts), &feats(&held_out)).map_err(CliError::run)?;
    Ok(EvalReport { compatibility_mean: compat as f64 / layouts.len() as f64, fid, sample_count: layouts.len(), bucket: label })
}

#[derive(Serialize)]
struct AblationRow {
    row: &'static str,
    name: &'static str,
    describe: &'static str,
    report: EvalReport,
}

fn ablation(base: &RunConfig, data: &[LayoutSample], presets: &[&ablate::Preset], out: &Path) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for p in presets {
        let cfg = p.configure(base);
        cfg.validate()?;
        let dir = out.join(format!("{}-{}", p.row, p.name));
        cfg.write_resolved(&dir)?;
        let models = train(&cfg, data, None, &dir)?;
        let report = evaluate_model(&cfg, data, &models.generator, &dir)?;
        write_json(&dir.join("report.json"), &report)?;
        rows.push(AblationRow { row: p.row, name: p.name, describe: p.describe, report });
    }
    write_json(&out.join("ablation.json"), &rows)
}
