//! Named ablation presets, one per row of the component study. Each preset
//! edits a base configuration; everything else (sizes, steps, seeds) is
//! inherited so the rows differ only in the switched component.

use bubblegan_core::generator::UpdateVariant;
use bubblegan_core::training::TrainConfig;

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug)]
pub struct Preset {
    pub row: &'static str,
    pub name: &'static str,
    pub describe: &'static str,
    /// Adds the cycle-consistency term at the base configuration's weight.
    pub cycle: bool,
    apply: fn(&mut RunConfig),
}

impl Preset {
    pub fn configure(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        // rows B4–B10 are adversarial-only; B11 adds the cycle loss; B12–B14
        // add pre-training on top of B11
        cfg.use_pretrain = false;
        cfg.train.lambda2 = 0.0;
        (self.apply)(&mut cfg);
        if self.cycle {
            cfg.train.lambda2 = if base.train.lambda2 > 0.0 { base.train.lambda2 } else { TrainConfig::default().lambda2 };
        }
        cfg
    }
}

fn masking(c: &mut RunConfig, node: bool, edge: bool) {
    c.use_pretrain = true;
    c.pretrain.node_branch = node;
    c.pretrain.edge_branch = edge;
}

pub const PRESETS: &[Preset] = &[
    Preset { row: "b4", name: "base", describe: "graph Transformer generator and critic", cycle: false, apply: |_| {} },
    Preset {
        row: "b5",
        name: "no-nna",
        describe: "without non-connected node attention",
        cycle: false,
        apply: |c| {
            c.model.generator.block.use_nna = false;
            c.pretrain.block.use_nna = false;
        },
    },
    Preset {
        row: "b6",
        name: "no-cna",
        describe: "without connected node attention",
        cycle: false,
        apply: |c| {
            c.model.generator.block.use_cna = false;
            c.pretrain.block.use_cna = false;
        },
    },
    Preset {
        row: "b7",
        name: "no-gmb",
        describe: "without the graph modeling block",
        cycle: false,
        apply: |c| {
            c.model.generator.block.use_gmb = false;
            c.pretrain.block.use_gmb = false;
        },
    },
    Preset { row: "b9", name: "eq3", describe: "update without the identity term", cycle: false, apply: |c| c.model.generator.variant = UpdateVariant::Eq3 },
    Preset { row: "b10", name: "eq4", describe: "update without pooled neighbour terms", cycle: false, apply: |c| c.model.generator.variant = UpdateVariant::Eq4 },
    Preset { row: "b11", name: "gcyc", describe: "plus graph cycle-consistency loss", cycle: true, apply: |_| {} },
    Preset { row: "b12", name: "node-mask", describe: "plus node-masking pre-training", cycle: true, apply: |c| masking(c, true, false) },
    Preset { row: "b13", name: "edge-mask", describe: "plus edge-masking pre-training", cycle: true, apply: |c| masking(c, false, true) },
    Preset { row: "b14", name: "both", describe: "plus node- and edge-masking pre-training", cycle: true, apply: |c| masking(c, true, true) },
];

/// Look a preset up by row id (`b7`) or name (`no-gmb`).
pub fn find(key: &str) -> Option<&'static Preset> {
    let key = key.to_ascii_lowercase();
    PRESETS.iter().find(|p| p.row == key || p.name == key)
}
