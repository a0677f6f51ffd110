//! Versioned JSON container for adapter state.
//!
//! ```json
//! {
//!   "format": "proxysteer.adapter", "version": 1,
//!   "rank": 8, "alpha": 16.0, "d_model": 32,
//!   "tensors": { "q_a": {"shape": [32, 8], "data": [...]}, "q_b": ..., "v_a": ..., "v_b": ... },
//!   "meta": { "role": "fap", "iteration": 2, "epoch": 1, "val_em": 0.55, "frozen": false, "label": "..." },
//!   "hash": "<sha256 hex>"
//! }
//! ```
//!
//! The hash covers the header fields, every tensor's shape and raw `f64`
//! bits, and the serialized meta block. Floats are written with shortest
//! round-trip formatting, so a load reproduces the saved values bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hash_tensor, LoraPair, LoraTensors, LowRankAdapter, MicroLmError, TensorData};

pub const CHECKPOINT_FORMAT: &str = "proxysteer.adapter";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterRole {
    Fap,
    Hdp,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: AdapterRole,
    /// Alignment iteration `k` (0 = initial adapter).
    pub iteration: usize,
    pub epoch: usize,
    pub val_em: Option<f64>,
    pub frozen: bool,
    #[serde(default)]
    pub label: String,
}

impl CheckpointMeta {
    pub fn new(role: AdapterRole) -> Self {
        Self {
            role,
            iteration: 0,
            epoch: 0,
            val_em: None,
            frozen: false,
            label: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint {
    pub adapter: LowRankAdapter,
    pub meta: CheckpointMeta,
}

impl AdapterCheckpoint {
    pub fn new(adapter: LowRankAdapter, meta: CheckpointMeta) -> Self {
        Self { adapter, meta }
    }

    pub fn is_frozen(&self) -> bool {
        self.meta.frozen
    }

    pub fn freeze(&mut self) {
        self.meta.frozen = true;
    }

    /// Mutable access for further training; refused once frozen.
    pub fn adapter_mut(&mut self) -> Result<&mut LowRankAdapter, MicroLmError> {
        if self.meta.frozen {
            return Err(MicroLmError::Frozen(
                format!("{:?}", self.meta.role).to_lowercase(),
            ));
        }
        Ok(&mut self.adapter)
    }

    pub fn content_hash(&self) -> String {
        content_hash(&self.adapter, &self.meta)
    }
}

fn content_hash(adapter: &LowRankAdapter, meta: &CheckpointMeta) -> String {
    let mut h = Sha256::new();
    h.update(CHECKPOINT_FORMAT.as_bytes());
    h.update(CHECKPOINT_VERSION.to_le_bytes());
    h.update((adapter.rank() as u64).to_le_bytes());
    h.update(adapter.alpha().to_bits().to_le_bytes());
    h.update((adapter.d_model() as u64).to_le_bytes());
    for (name, t) in adapter.tensors.named() {
        hash_tensor(&mut h, name, t.shape(), t.iter());
    }
    h.update(serde_json::to_vec(meta).expect("checkpoint meta serializes"));
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    rank: usize,
    alpha: f64,
    d_model: usize,
    tensors: BTreeMap<String, TensorData>,
    meta: CheckpointMeta,
    hash: String,
}

pub fn save_checkpoint(ckpt: &AdapterCheckpoint, path: &Path) -> Result<String, MicroLmError> {
    let hash = ckpt.content_hash();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        rank: ckpt.adapter.rank(),
        alpha: ckpt.adapter.alpha(),
        d_model: ckpt.adapter.d_model(),
        tensors: ckpt
            .adapter
            .tensors
            .named()
            .into_iter()
            .map(|(n, t)| (n.to_string(), TensorData::from_matrix(t)))
            .collect(),
        meta: ckpt.meta.clone(),
        hash: hash.clone(),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(hash)
}

pub fn load_checkpoint(path: &Path) -> Result<AdapterCheckpoint, MicroLmError> {
    let file: CheckpointFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(MicroLmError::VersionMismatch(format!(
            "{} is {} v{}, this build reads {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}",
            path.display(),
            file.format,
            file.version
        )));
    }
    let (d, r) = (file.d_model, file.rank);
    let mut tensors = file.tensors;
    let mut take = |name: &str, shape: (usize, usize)| {
        tensors
            .remove(name)
            .ok_or_else(|| MicroLmError::Malformed(format!("checkpoint lacks tensor `{name}`")))
            .and_then(|t| t.into_matrix(shape))
    };
    let lora = LoraTensors {
        q: LoraPair {
            a: take("q_a", (d, r))?,
            b: take("q_b", (r, d))?,
        },
        v: LoraPair {
            a: take("v_a", (d, r))?,
            b: take("v_b", (r, d))?,
        },
    };
    let adapter = LowRankAdapter::from_tensors(r, file.alpha, lora)?;
    let computed = content_hash(&adapter, &file.meta);
    if computed != file.hash {
        return Err(MicroLmError::HashMismatch {
            stored: file.hash,
            computed,
        });
    }
    Ok(AdapterCheckpoint {
        adapter,
        meta: file.meta,
    })
}

/// Loads a checkpoint and checks that it fits a model of width `d_model`
/// with adapters of rank `rank`.
pub fn load_checkpoint_expecting(
    path: &Path,
    d_model: usize,
    rank: usize,
) -> Result<AdapterCheckpoint, MicroLmError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.adapter.rank() != rank {
        return Err(MicroLmError::VersionMismatch(format!(
            "{} holds a rank-{} adapter but rank {rank} was expected; retrain or pass the matching rank",
            path.display(),
            ckpt.adapter.rank()
        )));
    }
    if ckpt.adapter.d_model() != d_model {
        return Err(MicroLmError::VersionMismatch(format!(
            "{} was trained for d_model {} but the model has d_model {d_model}",
            path.display(),
            ckpt.adapter.d_model()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micro_lm::tests::tiny_model;
    use rand::{Rng, SeedableRng};

    fn trained_like(seed: u64) -> AdapterCheckpoint {
        let mut ad = LowRankAdapter::new(8, 8, 16.0, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
        ad.tensors.q.b.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        ad.tensors.v.b.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        let mut meta = CheckpointMeta::new(AdapterRole::Fap);
        meta.iteration = 2;
        meta.val_em = Some(0.375);
        AdapterCheckpoint::new(ad, meta)
    }

    #[test]
    fn roundtrip_reproduces_forward() {
        let model = tiny_model(5);
        let ckpt = trained_like(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fap.json");
        let hash = save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.content_hash(), hash);
        let before = model
            .forward_last_token(Some(&ckpt.adapter), "w3 w4 w5")
            .unwrap();
        let after = model
            .forward_last_token(Some(&back.adapter), "w3 w4 w5")
            .unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn corrupted_values_fail_hash() {
        let ckpt = trained_like(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let corrupted = text.replacen("\"val_em\": 0.375", "\"val_em\": 0.875", 1);
        assert_ne!(corrupted, text);
        std::fs::write(&path, corrupted).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MicroLmError::HashMismatch { .. })
        ));
    }

    #[test]
    fn rank_mismatch_is_explained() {
        let ckpt = AdapterCheckpoint::new(
            LowRankAdapter::new(8, 4, 16.0, 0),
            CheckpointMeta::new(AdapterRole::Hdp),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r4.json");
        save_checkpoint(&ckpt, &path).unwrap();
        match load_checkpoint_expecting(&path, 8, 8) {
            Err(MicroLmError::VersionMismatch(msg)) => {
                assert!(msg.contains("rank-4") && msg.contains("rank 8"), "{msg}")
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_checkpoint_expecting(&path, 8, 4).is_ok());
    }

    #[test]
    fn format_version_checked() {
        let ckpt = trained_like(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let text =
            std::fs::read_to_string(&path)
                .unwrap()
                .replacen("\"version\": 1", "\"version\": 7", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MicroLmError::VersionMismatch(_))
        ));
    }

    #[test]
    fn frozen_refuses_mutation() {
        let mut ckpt = trained_like(1);
        assert!(ckpt.adapter_mut().is_ok());
        ckpt.freeze();
        assert!(matches!(ckpt.adapter_mut(), Err(MicroLmError::Frozen(_))));
    }
}
