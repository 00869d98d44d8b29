//! Graph masked modeling: hide a fraction of nodes (and of edge items),
//! encode only what is visible, and reconstruct the hidden attributes with a
//! light decoder. The trained encoder initializes the generator's GTE.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bubblegan_autograd::nn::Linear;
use bubblegan_autograd::optim::Adam;
use bubblegan_autograd::{backward, GradBuffer, Init, ParamId, ParamStore, Tensor};

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::exec::Exec;
use crate::generator::{BlockConfig, Gte};
use crate::graph::{BubbleDiagram, Topology, NUM_ROOM_TYPES};
use crate::synth::MAX_ROOMS;
use crate::training::sample_batch;

pub const ENCODER_COMPONENT: &str = "gte_encoder";

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("diagram has no edges")]
    NoEdges,
    #[error("{items} {branch} items exceed the positional table of {capacity}")]
    TooManyItems { branch: &'static str, items: usize, capacity: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// `clamp(round(ratio·n), 1, n−1)` for `n ≥ 2`, else 0.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    if n < 2 {
        return 0;
    }
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

/// Sorted uniform subset of `0..n` of size [`masked_count`].
pub fn sample_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = masked_count(n, ratio);
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masked_nodes: Vec<usize>,
    /// Indices into the edge branch's item order.
    pub masked_edges: Vec<usize>,
    pub ratio: f64,
}

/// Mask plan over the diagram's nodes and its line-graph edge items.
pub fn sample_mask_plan(diagram: &BubbleDiagram, ratio: f64, rng: &mut impl Rng) -> MaskPlan {
    let masked_nodes = sample_mask(diagram.num_rooms(), ratio, rng);
    let masked_edges = sample_mask(diagram.edges().len(), ratio, rng);
    MaskPlan { masked_nodes, masked_edges, ratio }
}

/// Items of one branch: a carrier topology, a class id per item, and the
/// positional slot each item reads in the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemGraph {
    pub topology: Topology,
    pub targets: Vec<usize>,
    pub positions: Vec<usize>,
    pub classes: usize,
}

impl ItemGraph {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

pub fn node_items(diagram: &BubbleDiagram) -> ItemGraph {
    ItemGraph {
        topology: Topology::from_diagram(diagram),
        targets: diagram.room_types().iter().map(|t| t.id()).collect(),
        positions: (0..diagram.num_rooms()).collect(),
        classes: NUM_ROOM_TYPES,
    }
}

/// Which node pairs become edge-branch items.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeBranchKind {
    /// The diagram's edges only; every item is present.
    #[default]
    LineGraph,
    /// Every unordered room pair, labelled present or absent. This is the
    /// line graph of the complete graph and contains both the diagram's
    /// edges and its complement's.
    AllPairs,
}

impl FromStr for EdgeBranchKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "line-graph" => Ok(Self::LineGraph),
            "all-pairs" => Ok(Self::AllPairs),
            _ => Err(format!("unknown edge branch `{s}` (expected line-graph or all-pairs)")),
        }
    }
}

/// Slot of pair `(i, j)`, `i < j`, in a fixed colex order that does not
/// depend on the number of rooms.
pub fn pair_slot(i: usize, j: usize) -> usize {
    debug_assert!(i < j);
    j * (j - 1) / 2 + i
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBranchGraph {
    pub pairs: Vec<(usize, usize)>,
    pub present: Vec<bool>,
    /// Items are connected iff their pairs share an endpoint.
    pub topology: Topology,
    pub kind: EdgeBranchKind,
}

impl EdgeBranchGraph {
    pub fn num_connections(&self) -> usize {
        self.topology.num_edges()
    }

    pub fn items(&self) -> ItemGraph {
        let positions = match self.kind {
            EdgeBranchKind::LineGraph => (0..self.pairs.len()).collect(),
            EdgeBranchKind::AllPairs => self.pairs.iter().map(|&(i, j)| pair_slot(i, j)).collect(),
        };
        ItemGraph {
            topology: self.topology.clone(),
            targets: self.present.iter().map(|&p| p as usize).collect(),
            positions,
            classes: 2,
        }
    }
}

/// Line graph of the diagram's edges.
pub fn build_edge_branch(diagram: &BubbleDiagram) -> Result<EdgeBranchGraph, PretrainError> {
    build_edge_branch_with(diagram, EdgeBranchKind::LineGraph)
}

pub fn build_edge_branch_with(diagram: &BubbleDiagram, kind: EdgeBranchKind) -> Result<EdgeBranchGraph, PretrainError> {
    if diagram.edges().is_empty() {
        return Err(PretrainError::NoEdges);
    }
    let n = diagram.num_rooms();
    let pairs: Vec<(usize, usize)> = match kind {
        EdgeBranchKind::LineGraph => diagram.edge_list(),
        EdgeBranchKind::AllPairs => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect(),
    };
    let present = pairs.iter().map(|&(i, j)| diagram.has_edge(i, j)).collect();
    let mut links = Vec::new();
    for a in 0..pairs.len() {
        for b in a + 1..pairs.len() {
            let (p, q) = (pairs[a], pairs[b]);
            if p.0 == q.0 || p.0 == q.1 || p.1 == q.0 || p.1 == q.1 {
                links.push((a, b));
            }
        }
    }
    let topology = Topology::from_edges(pairs.len(), links);
    Ok(EdgeBranchGraph { pairs, present, topology, kind })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub mask_ratio: f64,
    /// Encoder width; must equal the generator's channel count for export.
    pub token_dim: usize,
    /// Decoder width; 0 reuses `token_dim`.
    pub decoder_dim: usize,
    pub block: BlockConfig,
    pub node_branch: bool,
    pub edge_branch: bool,
    pub edge_kind: EdgeBranchKind,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder_blocks: 8,
            decoder_blocks: 2,
            mask_ratio: 0.4,
            token_dim: 16,
            decoder_dim: 0,
            block: BlockConfig::default(),
            node_branch: true,
            edge_branch: true,
            edge_kind: EdgeBranchKind::LineGraph,
            steps: 1000,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn decoder_width(&self) -> usize {
        if self.decoder_dim == 0 {
            self.token_dim
        } else {
            self.decoder_dim
        }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::Config(m.to_string()));
        if self.decoder_blocks == 0 || self.decoder_blocks >= self.encoder_blocks {
            return bad("need 1 <= decoder_blocks < encoder_blocks");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie in (0, 1)");
        }
        if !self.node_branch && !self.edge_branch {
            return bad("enable at least one branch");
        }
        let heads = self.block.attention_heads;
        if self.token_dim == 0 || heads == 0 || self.token_dim % heads != 0 || self.decoder_width() % heads != 0 {
            return bad("attention_heads must divide token_dim and decoder_dim");
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive");
        }
        Ok(())
    }

    fn edge_capacity(&self) -> usize {
        match self.edge_kind {
            // a guillotine layout is planar
            EdgeBranchKind::LineGraph => 3 * MAX_ROOMS - 6,
            EdgeBranchKind::AllPairs => MAX_ROOMS * (MAX_ROOMS - 1) / 2,
        }
    }
}

/// Encoder and decoder of one branch.
#[derive(Clone, Debug)]
pub struct Branch {
    name: &'static str,
    embed: Linear,
    encoder: Gte,
    project: Option<Linear>,
    mask_token: ParamId,
    positions: ParamId,
    capacity: usize,
    decoder: Gte,
    head: Linear,
    token_dim: usize,
    decoder_dim: usize,
}

impl Branch {
    fn new(ps: &mut ParamStore, name: &'static str, classes: usize, capacity: usize, cfg: &PretrainConfig, rng: &mut impl Rng) -> Self {
        let (c, d) = (cfg.token_dim, cfg.decoder_width());
        let embed = Linear::new(ps, &format!("{name}.embed"), classes, c, rng);
        let encoder = Gte::new(ps, &format!("{name}.enc"), c, cfg.encoder_blocks, &cfg.block, rng);
        let project = (d != c).then(|| Linear::new(ps, &format!("{name}.dec.project"), c, d, rng));
        let mask_token = ps.add(&format!("{name}.dec.mask_token"), &[1, d], Init::Normal(1.0), rng);
        let positions = ps.add(&format!("{name}.dec.pos"), &[capacity, d], Init::Normal(1.0), rng);
        let decoder = Gte::new(ps, &format!("{name}.dec"), d, cfg.decoder_blocks, &cfg.block, rng);
        let head = Linear::new(ps, &format!("{name}.dec.head"), d, classes, rng);
        // start from uniform predictions
        ps.set(head.weight, vec![0.0; d * classes]);
        ps.set(head.bias, vec![0.0; classes]);
        Self { name, embed, encoder, project, mask_token, positions, capacity, decoder, head, token_dim: c, decoder_dim: d }
    }

    fn check(&self, items: &ItemGraph) -> Result<(), PretrainError> {
        match items.positions.iter().max() {
            Some(&p) if p >= self.capacity => {
                Err(PretrainError::TooManyItems { branch: self.name, items: p + 1, capacity: self.capacity })
            }
            _ => Ok(()),
        }
    }

    /// Latents `[visible, token_dim]` computed from the visible items and
    /// the subgraph they induce; masked items never enter.
    pub fn encode_visible(&self, ps: &ParamStore, items: &ItemGraph, masked: &[usize]) -> Tensor {
        let visible = visible_items(items.len(), masked);
        let k = visible.len();
        let onehots = visible
            .iter()
            .flat_map(|&i| (0..items.classes).map(move |c| if c == items.targets[i] { 1.0 } else { 0.0 }))
            .collect();
        let x = self.embed.forward(ps, &Tensor::new(onehots, &[k, items.classes]));
        let topo = items.topology.induced(&visible);
        self.encoder
            .forward(ps, &x.reshape(&[k, self.token_dim, 1, 1]), &topo)
            .reshape(&[k, self.token_dim])
    }

    /// Logits `[items, classes]`: latents at visible slots, the mask token
    /// at masked ones, plus positional embeddings, through the decoder.
    pub fn decode_and_reconstruct(&self, ps: &ParamStore, latents: &Tensor, items: &ItemGraph, masked: &[usize]) -> Tensor {
        let n = items.len();
        let visible = visible_items(n, masked);
        assert_eq!(latents.shape()[0], visible.len(), "one latent per visible item");
        let projected = match &self.project {
            Some(p) => p.forward(ps, latents),
            None => latents.clone(),
        };
        let table = Tensor::cat(&[projected, ps.get(self.mask_token).clone()], 0);
        let mut gather = vec![visible.len(); n];
        for (row, &i) in visible.iter().enumerate() {
            gather[i] = row;
        }
        let tokens = table
            .index_select0(&gather)
            .add(&ps.get(self.positions).index_select0(&items.positions));
        let h = self
            .decoder
            .forward(ps, &tokens.reshape(&[n, self.decoder_dim, 1, 1]), &items.topology)
            .reshape(&[n, self.decoder_dim]);
        self.head.forward(ps, &h)
    }

    pub fn reconstruct(&self, ps: &ParamStore, items: &ItemGraph, masked: &[usize]) -> Result<Reconstruction, PretrainError> {
        self.check(items)?;
        let latents = self.encode_visible(ps, items, masked);
        Ok(Reconstruction {
            logits: self.decode_and_reconstruct(ps, &latents, items, masked),
            targets: items.targets.clone(),
            masked: masked.to_vec(),
        })
    }
}

fn visible_items(n: usize, masked: &[usize]) -> Vec<usize> {
    (0..n).filter(|i| masked.binary_search(i).is_err()).collect()
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub logits: Tensor,
    pub targets: Vec<usize>,
    pub masked: Vec<usize>,
}

impl Reconstruction {
    /// Correct predictions and count over the masked items.
    pub fn hits(&self) -> (usize, usize) {
        let classes = self.logits.shape()[1];
        let data = self.logits.data();
        let correct = self
            .masked
            .iter()
            .filter(|&&i| {
                let row = &data[i * classes..(i + 1) * classes];
                let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best == self.targets[i]
            })
            .count();
        (correct, self.masked.len())
    }
}

/// Cross-entropy summed over the masked items; exactly 0 when none are.
pub fn masked_cross_entropy(r: &Reconstruction) -> Tensor {
    if r.masked.is_empty() {
        return Tensor::scalar(0.0);
    }
    let classes = r.logits.shape()[1];
    let picked = r.logits.log_softmax().index_select0(&r.masked);
    let onehot = r
        .masked
        .iter()
        .flat_map(|&i| (0..classes).map(move |c| if c == r.targets[i] { 1.0 } else { 0.0 }))
        .collect();
    picked.mul(&Tensor::new(onehot, &[r.masked.len(), classes])).sum_all().neg()
}

/// `L_node + L_edge` over whichever branches ran.
pub fn pretraining_loss(node: Option<&Reconstruction>, edge: Option<&Reconstruction>) -> Tensor {
    let terms: Vec<Tensor> = [node, edge].into_iter().flatten().map(masked_cross_entropy).collect();
    match terms.split_first() {
        None => Tensor::scalar(0.0),
        Some((first, rest)) => rest.iter().fold(first.clone(), |acc, t| acc.add(t)),
    }
}

#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub params: ParamStore,
    pub node: Option<Branch>,
    pub edge: Option<Branch>,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, rng: &mut impl Rng) -> Result<Self, PretrainError> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let node = config
            .node_branch
            .then(|| Branch::new(&mut ps, "node", NUM_ROOM_TYPES, MAX_ROOMS, &config, rng));
        let edge = config
            .edge_branch
            .then(|| Branch::new(&mut ps, "edge", 2, config.edge_capacity(), &config, rng));
        // Both encoders start from the same weights so their average, used
        // on export, stays meaningful.
        if node.is_some() && edge.is_some() {
            let shared: Vec<(String, Tensor)> = ps
                .iter()
                .filter_map(|(n, t)| n.strip_prefix("node.enc.").map(|s| (format!("edge.enc.{s}"), t.clone())))
                .collect();
            ps.load_entries(&shared).expect("branches have identical encoders");
        }
        Ok(Self { config, params: ps, node, edge })
    }

    /// Loss for one diagram under freshly sampled masks.
    pub fn graph_loss(&self, diagram: &BubbleDiagram, rng: &mut impl Rng) -> Result<(Tensor, f64, f64), PretrainError> {
        let ratio = self.config.mask_ratio;
        let node = match &self.node {
            Some(b) => {
                let items = node_items(diagram);
                let masked = sample_mask(items.len(), ratio, rng);
                Some(b.reconstruct(&self.params, &items, &masked)?)
            }
            None => None,
        };
        let edge = match (&self.edge, build_edge_branch_with(diagram, self.config.edge_kind)) {
            (Some(b), Ok(g)) => {
                let items = g.items();
                let masked = sample_mask(items.len(), ratio, rng);
                Some(b.reconstruct(&self.params, &items, &masked)?)
            }
            // edgeless diagrams skip the edge branch
            (_, Err(PretrainError::NoEdges)) | (None, _) => None,
            (_, Err(e)) => return Err(e),
        };
        let ln = node.as_ref().map_or(0.0, |r| masked_cross_entropy(r).item());
        let le = edge.as_ref().map_or(0.0, |r| masked_cross_entropy(r).item());
        Ok((pretraining_loss(node.as_ref(), edge.as_ref()), ln, le))
    }

    /// Masked-item accuracy `(node, edge)` over `plans` random plans per
    /// diagram; a branch with nothing masked reports `None`.
    pub fn recovery_accuracy(&self, diagrams: &[BubbleDiagram], plans: usize, seed: u64) -> Result<(Option<f64>, Option<f64>), PretrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut node, mut edge) = ((0, 0), (0, 0));
        let frozen = self.params.frozen();
        for d in diagrams {
            for _ in 0..plans {
                if let Some(b) = &self.node {
                    let items = node_items(d);
                    let masked = sample_mask(items.len(), self.config.mask_ratio, &mut rng);
                    let (c, n) = b.reconstruct(&frozen, &items, &masked)?.hits();
                    node = (node.0 + c, node.1 + n);
                }
                if let (Some(b), Ok(g)) = (&self.edge, build_edge_branch_with(d, self.config.edge_kind)) {
                    let items = g.items();
                    let masked = sample_mask(items.len(), self.config.mask_ratio, &mut rng);
                    let (c, n) = b.reconstruct(&frozen, &items, &masked)?.hits();
                    edge = (edge.0 + c, edge.1 + n);
                }
            }
        }
        let frac = |(c, n): (usize, usize)| (n > 0).then(|| c as f64 / n as f64);
        Ok((frac(node), frac(edge)))
    }

    /// Encoder tensors of one branch renamed to `block{b}.…`.
    pub fn encoder_entries(&self, branch: &str) -> Vec<(String, Tensor)> {
        let prefix = format!("{branch}.enc.");
        self.params
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|s| (s.to_string(), t.detach())))
            .collect()
    }

    pub fn save_encoder(&self, dir: &Path, step: u64) -> Result<(), PretrainError> {
        let mut stores = Vec::new();
        for branch in ["node", "edge"] {
            let entries = self.encoder_entries(branch);
            if entries.is_empty() {
                continue;
            }
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for (name, t) in &entries {
                let id = ps.add(name, t.shape(), Init::Zeros, &mut rng);
                ps.set(id, t.to_vec());
            }
            stores.push((branch, ps));
        }
        let refs: Vec<(&str, &ParamStore)> = stores.iter().map(|(k, ps)| (*k, ps)).collect();
        checkpoint::save(dir, ENCODER_COMPONENT, step, serde_json::json!({ "pretrain": self.config }), &refs)?;
        Ok(())
    }
}

/// Generator-ready GTE tensors from an encoder checkpoint: the single
/// trained encoder, or the element-wise mean of both when the two branches
/// were trained.
pub fn export_encoder(ck: &Checkpoint) -> Result<Vec<(String, Tensor)>, PretrainError> {
    ck.expect_component(ENCODER_COMPONENT)?;
    let present: Vec<&[(String, Tensor)]> = ["node", "edge"].iter().filter_map(|k| ck.entries(k).ok()).collect();
    let (first, rest) = present
        .split_first()
        .ok_or_else(|| CheckpointError::MissingBlob("node or edge".into()))?;
    let mut out: Vec<(String, Vec<f64>, Vec<usize>)> =
        first.iter().map(|(n, t)| (n.clone(), t.to_vec(), t.shape().to_vec())).collect();
    for other in rest {
        if other.len() != out.len() {
            return Err(PretrainError::ShapeMismatch("branch encoders differ".into()));
        }
        for ((name, acc, shape), (n2, t)) in out.iter_mut().zip(other.iter()) {
            if name != n2 || shape.as_slice() != t.shape() {
                return Err(PretrainError::ShapeMismatch(format!("branch encoders differ at `{name}`")));
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
    }
    let k = present.len() as f64;
    Ok(out
        .into_iter()
        .map(|(n, v, s)| (n, Tensor::new(v.into_iter().map(|x| x / k).collect(), &s)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: u64,
    pub loss: f64,
    pub node_loss: f64,
    pub edge_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub records: Vec<PretrainRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// Optimize both branches jointly with Adam. Writes `pretrain.jsonl` and the
/// encoder checkpoint under `out_dir/encoder` when `out_dir` is given.
pub fn pretrain_run(
    model: &mut Pretrainer,
    dataset: &[BubbleDiagram],
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<PretrainSummary, PretrainError> {
    if dataset.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    let cfg = model.config.clone();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PretrainError::Io { path, source }
    };
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io(dir))?;
            let path = dir.join("pretrain.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(io(&path))?), path))
        }
        None => None,
    };
    let mut opt = Adam::new(&model.params, cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for step in 1..=cfg.steps {
        let idx = sample_batch(dataset.len(), cfg.batch_size, &mut rng);
        let seeds: Vec<u64> = idx.iter().map(|_| rng.random()).collect();
        let m = &*model;
        let results = exec.map_range(idx.len(), |k| -> Result<(GradBuffer, [f64; 3]), PretrainError> {
            let (loss, ln, le) = m.graph_loss(&dataset[idx[k]], &mut ChaCha8Rng::seed_from_u64(seeds[k]))?;
            Ok((m.params.collect_grads(&backward(&loss)), [loss.item(), ln, le]))
        });
        let mut grads = model.params.zero_grads();
        let mut sums = [0.0; 3];
        for r in results {
            let (g, t) = r?;
            grads.add(&g);
            sums.iter_mut().zip(t).for_each(|(s, v)| *s += v);
        }
        let n = idx.len() as f64;
        grads.scale(1.0 / n);
        let rec = PretrainRecord { step, loss: sums[0] / n, node_loss: sums[1] / n, edge_loss: sums[2] / n };
        if !rec.loss.is_finite() || !grads.all_finite() {
            return Err(PretrainError::NonFiniteLoss { step, value: rec.loss });
        }
        opt.step(&mut model.params, &grads);
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec).expect("plain struct")).map_err(io(path))?;
        }
        records.push(rec);
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            if let Some((mut w, path)) = log {
                w.flush().map_err(io(&path))?;
            }
            let path = dir.join("encoder");
            model.save_encoder(&path, cfg.steps)?;
            Some(path)
        }
        None => None,
    };
    Ok(PretrainSummary { records, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RoomType;

    fn small() -> PretrainConfig {
        PretrainConfig { encoder_blocks: 3, decoder_blocks: 1, token_dim: 4, steps: 3, batch_size: 2, ..PretrainConfig::default() }
    }

    fn diagram(n: usize, edges: &[(usize, usize)]) -> BubbleDiagram {
        BubbleDiagram::new((0..n).map(|i| RoomType::ALL[i % 10]).collect(), edges.iter().copied()).unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(masked_count(10, 0.4), 4);
        assert_eq!(masked_count(2, 0.4), 1);
        assert_eq!(masked_count(1, 0.4), 0);
        assert_eq!(masked_count(5, 0.99), 4);
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let d = diagram(10, &[(0, 1), (1, 2)]);
        assert_eq!(sample_mask_plan(&d, 0.4, &mut a), sample_mask_plan(&d, 0.4, &mut b));
    }

    #[test]
    fn line_graph_examples() {
        let tri = build_edge_branch(&diagram(3, &[(0, 1), (1, 2), (0, 2)])).unwrap();
        assert_eq!((tri.pairs.len(), tri.num_connections()), (3, 3));
        let path = build_edge_branch(&diagram(3, &[(0, 1), (1, 2)])).unwrap();
        assert_eq!((path.pairs.len(), path.num_connections()), (2, 1));
        let one = build_edge_branch(&diagram(2, &[(0, 1)])).unwrap();
        assert_eq!((one.pairs.len(), one.num_connections()), (1, 0));
        assert!(matches!(build_edge_branch(&diagram(3, &[])), Err(PretrainError::NoEdges)));
    }

    #[test]
    fn all_pairs_labels() {
        let g = build_edge_branch_with(&diagram(4, &[(0, 1), (2, 3)]), EdgeBranchKind::AllPairs).unwrap();
        assert_eq!(g.pairs.len(), 6);
        assert_eq!(g.present.iter().filter(|&&p| p).count(), 2);
        let slots: Vec<usize> = g.items().positions;
        let mut sorted = slots.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 6);
        assert!(slots.iter().all(|&s| s < 6));
    }

    #[test]
    fn latent_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pretrainer::new(small(), &mut rng).unwrap();
        let d = diagram(10, &[(0, 1), (1, 2), (2, 3)]);
        let items = node_items(&d);
        let branch = p.node.as_ref().unwrap();
        assert_eq!(branch.encode_visible(&p.params, &items, &[1, 4, 6, 9]).shape(), &[6, 4]);
        assert_eq!(branch.encode_visible(&p.params, &items, &[]).shape(), &[10, 4]);
        let r = branch.reconstruct(&p.params, &items, &[]).unwrap();
        assert_eq!(r.logits.shape(), &[10, 10]);
        assert_eq!(pretraining_loss(Some(&r), None).item(), 0.0);
    }

    #[test]
    fn uniform_and_saturated_losses() {
        let r = Reconstruction { logits: Tensor::zeros(&[3, 10]), targets: vec![0, 1, 2], masked: vec![0, 2] };
        assert!((masked_cross_entropy(&r).item() - 2.0 * 10f64.ln()).abs() < 1e-12);
        let mut data = vec![-30.0; 30];
        for (i, t) in [0, 1, 2].iter().enumerate() {
            data[i * 10 + t] = 30.0;
        }
        let r = Reconstruction { logits: Tensor::new(data, &[3, 10]), ..r };
        assert!(masked_cross_entropy(&r).item() < 1e-6);
    }

    #[test]
    fn initial_predictions_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Pretrainer::new(small(), &mut rng).unwrap();
        let d = diagram(10, &[(0, 1), (1, 2), (2, 3)]);
        let (_, ln, _) = p.graph_loss(&d, &mut rng).unwrap();
        assert!((ln - 4.0 * 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn decoder_lighter_than_encoder() {
        let p = Pretrainer::new(PretrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for b in ["node", "edge"] {
            let enc = p.params.num_scalars_with_prefix(&format!("{b}.enc.")) + p.params.num_scalars_with_prefix(&format!("{b}.embed"));
            let dec = p.params.num_scalars_with_prefix(&format!("{b}.dec."));
            assert!(dec < enc, "{b}: decoder {dec} vs encoder {enc}");
        }
    }

    #[test]
    fn too_many_items_is_reported() {
        let cfg = PretrainConfig { edge_kind: EdgeBranchKind::AllPairs, ..small() };
        let p = Pretrainer::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let items = ItemGraph { topology: Topology::from_edges(1, []), targets: vec![0], positions: vec![500], classes: 2 };
        assert!(matches!(p.edge.as_ref().unwrap().reconstruct(&p.params, &items, &[]), Err(PretrainError::TooManyItems { .. })));
    }

    #[test]
    fn run_writes_encoder_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let mut p = Pretrainer::new(small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let data = vec![diagram(4, &[(0, 1), (1, 2), (2, 3)]), diagram(3, &[])];
        let s = pretrain_run(&mut p, &data, Some(tmp.path()), Exec::default()).unwrap();
        assert_eq!(s.records.len(), 3);
        let ck = Checkpoint::load(&s.checkpoint.unwrap()).unwrap();
        let entries = export_encoder(&ck).unwrap();
        assert_eq!(entries.len(), p.encoder_entries("node").len());
        assert!(entries.iter().all(|(n, _)| n.starts_with("block")));
        let lines = fs::read_to_string(tmp.path().join("pretrain.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(PretrainConfig { decoder_blocks: 8, ..PretrainConfig::default() }.validate().is_err());
        assert!(PretrainConfig { mask_ratio: 1.0, ..PretrainConfig::default() }.validate().is_err());
        assert!(PretrainConfig { node_branch: false, edge_branch: false, ..PretrainConfig::default() }.validate().is_err());
    }
}
