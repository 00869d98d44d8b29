//! Checkpoint directories: `manifest.json` plus one parameter blob per
//! model, each recorded with its SHA-256 digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bubblegan_autograd::{ParamError, ParamStore, Tensor};

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("schema version {found}, expected {CHECKPOINT_SCHEMA}")]
    Schema { found: u32 },
    #[error("digest mismatch for blob `{0}`")]
    Digest(String),
    #[error("checkpoint is a `{found}`, expected `{expected}`")]
    Component { expected: String, found: String },
    #[error("checkpoint has no blob `{0}`")]
    MissingBlob(String),
    #[error(transparent)]
    Params(#[from] ParamError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub component: String,
    pub step: u64,
    pub config: serde_json::Value,
    pub blobs: BTreeMap<String, BlobEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write a checkpoint to `dir`, replacing any previous one. The directory
/// is assembled next to its destination and renamed into place, so readers
/// never observe a partial checkpoint.
pub fn save(
    dir: &Path,
    component: &str,
    step: u64,
    config: serde_json::Value,
    stores: &[(&str, &ParamStore)],
) -> Result<Manifest, CheckpointError> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = dir
        .file_name()
        .ok_or_else(|| CheckpointError::Manifest(format!("{} has no final component", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;

    let mut blobs = BTreeMap::new();
    for (key, store) in stores {
        let bytes = store.to_bytes();
        let file = format!("{key}.bin");
        let path = tmp.join(&file);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        blobs.insert(key.to_string(), BlobEntry { file, sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest { schema_version: CHECKPOINT_SCHEMA, component: component.to_string(), step, config, blobs };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, text).map_err(io_err(&mpath))?;

    let old = parent.join(format!(".{name}.old-{}", std::process::id()));
    if dir.exists() {
        fs::rename(dir, &old).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    }
    Ok(manifest)
}

/// A verified checkpoint: every blob matched its recorded digest.
#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    blobs: BTreeMap<String, Vec<(String, Tensor)>>,
}

impl Checkpoint {
    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.schema_version != CHECKPOINT_SCHEMA {
            return Err(CheckpointError::Schema { found: manifest.schema_version });
        }
        let mut blobs = BTreeMap::new();
        for (key, entry) in &manifest.blobs {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(CheckpointError::Digest(key.clone()));
            }
            blobs.insert(key.clone(), ParamStore::read_from(&mut &bytes[..])?);
        }
        Ok(Self { manifest, blobs })
    }

    pub fn expect_component(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.manifest.component != expected {
            return Err(CheckpointError::Component { expected: expected.to_string(), found: self.manifest.component.clone() });
        }
        Ok(())
    }

    pub fn entries(&self, key: &str) -> Result<&[(String, Tensor)], CheckpointError> {
        self.blobs.get(key).map(Vec::as_slice).ok_or_else(|| CheckpointError::MissingBlob(key.to_string()))
    }

    /// Overwrite `store` with blob `key`; names and shapes must match exactly.
    pub fn restore_into(&self, key: &str, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let entries = self.entries(key)?;
        if entries.len() != store.len() {
            return Err(ParamError::Malformed(format!("blob `{key}` has {} tensors, model has {}", entries.len(), store.len())).into());
        }
        store.load_entries(entries)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bubblegan_autograd::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        ps.add("a", &[2, 3], Init::Normal(1.0), &mut rng);
        ps.add("b", &[4], Init::Normal(1.0), &mut rng);
        ps
    }

    #[test]
    fn roundtrip_and_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save(&dir, "test", 3, serde_json::json!({"k": 1}), &[("m", &store(1))]).unwrap();
        save(&dir, "test", 7, serde_json::json!({"k": 2}), &[("m", &store(2))]).unwrap();
        let ck = Checkpoint::load(&dir).unwrap();
        assert_eq!(ck.manifest.step, 7);
        assert_eq!(ck.manifest.config["k"], 2);
        let mut target = store(9);
        ck.restore_into("m", &mut target).unwrap();
        for ((_, x), (_, y)) in target.iter().zip(store(2).iter()) {
            assert_eq!(x.data(), y.data());
        }
        // no temp or backup directories left behind
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn corruption_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save(&dir, "test", 0, serde_json::Value::Null, &[("m", &store(1))]).unwrap();
        let blob = dir.join("m.bin");
        let mut bytes = fs::read(&blob).unwrap();
        *bytes.last_mut().unwrap() ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&dir), Err(CheckpointError::Digest(_))));
    }

    #[test]
    fn component_and_missing_blob() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ckpt");
        save(&dir, "gte_encoder", 0, serde_json::Value::Null, &[("m", &store(1))]).unwrap();
        let ck = Checkpoint::load(&dir).unwrap();
        assert!(ck.expect_component("gte_encoder").is_ok());
        assert!(matches!(ck.expect_component("gan"), Err(CheckpointError::Component { .. })));
        assert!(matches!(ck.entries("x"), Err(CheckpointError::MissingBlob(_))));
    }
}
