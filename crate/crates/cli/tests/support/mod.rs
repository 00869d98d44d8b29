//! Helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_bubblegan"))
}

pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(bin()).args(args).output().expect("binary runs")
}

pub fn run_ok<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = run(args);
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Networks small enough that a handful of steps takes well under a second.
pub fn tiny_config(steps: u64) -> Value {
    let block = json!({ "attention_heads": 1 });
    json!({
        "model": {
            "generator": { "noise_dim": 4, "channels": 2, "base_resolution": 16, "gte_blocks": 2,
                           "mpn_hidden": 2, "head_channels": [2, 2], "block": block },
            "critic": { "channels": 2, "type_channels": 1, "mpn_hidden": 2, "room_dim": 4 },
            "estimator": { "channels": 1, "embed_dim": 4, "pair_hidden": 4 }
        },
        "train": { "max_steps": steps, "batch_size": 2 },
        "pretrain": { "encoder_blocks": 2, "decoder_blocks": 1, "token_dim": 2, "steps": steps,
                      "batch_size": 2, "block": block },
        "eval": { "n_samples": 4, "recovery_plans": 2 },
        "synth": { "count": 24, "min_rooms": 2, "max_rooms": 6 },
        "generate": { "samples": 2, "image_scale": 2 }
    })
}

pub fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// Corpus of `synth.count` layouts at `dir/data.jsonl`.
pub fn make_dataset(dir: &Path, config: &Path) -> PathBuf {
    let data = dir.join("data.jsonl");
    run_ok([
        "synth-data".as_ref(),
        "--config".as_ref(),
        config.as_os_str(),
        "--out".as_ref(),
        data.as_os_str(),
        "--seed".as_ref(),
        "3".as_ref(),
    ]);
    data
}
