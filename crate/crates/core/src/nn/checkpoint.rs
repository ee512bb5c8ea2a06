//! Binary model checkpoints and CSV training curves.
//!
//! Layout: 8-byte magic, u32 LE format version, u32 LE header length, a JSON header, the
//! parameter bodies as little-endian f32 in header order, then a SHA-256 of every
//! preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::DataRecipe;
use super::model::{build_backbone, BackboneArch, FrozenGroups, ModelState};
use super::tape::Tensor;
use super::train::{EpochCurve, TrainConfig, CURVE_HEADER};
use super::NnError;
use crate::search_space::Configuration;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SBRCKPT\0";

/// Everything in the header except the tensor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub recipe: Option<DataRecipe>,
    pub arch: BackboneArch,
    pub config: Configuration,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub train: Option<TrainConfig>,
    pub frozen: FrozenGroups,
}

impl CheckpointMeta {
    pub fn new(model: &ModelState, recipe: Option<DataRecipe>, seeds: BTreeMap<String, u64>, train: Option<TrainConfig>) -> Self {
        CheckpointMeta {
            recipe,
            arch: model.backbone.arch.clone(),
            config_hash: config_hash(&model.subnet.config),
            config: model.subnet.config.clone(),
            seeds,
            train,
            frozen: model.frozen,
        }
    }
}

pub fn config_hash(config: &Configuration) -> String {
    hex::encode(Sha256::digest(config.key().as_bytes()))
}

/// SHA-256 over the f32 LE encoding, i.e. what a checkpoint stores for the tensor.
pub fn tensor_checksum(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in &t.shape {
        h.update((*d as u64).to_le_bytes());
    }
    for v in &t.data {
        h.update((*v as f32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: CheckpointMeta,
    has_teacher: bool,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn encode_checkpoint(model: &ModelState, meta: &CheckpointMeta) -> Result<Vec<u8>, NnError> {
    let named = model.named_params();
    let header = Header {
        meta: meta.clone(),
        has_teacher: model.teacher.is_some(),
        tensors: named.iter().map(|(n, t)| (n.clone(), t.shape.clone())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * named.iter().map(|(_, t)| t.len()).sum::<usize>() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelState, CheckpointMeta), NnError> {
    let bad = |m: String| NnError::Checkpoint(m);
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a model checkpoint".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    let meta = header.meta;
    if config_hash(&meta.config) != meta.config_hash {
        return Err(bad("config hash does not match the embedded configuration".into()));
    }
    let mut model = ModelState::new(build_backbone(&meta.arch, 0), &meta.config, 0)?;
    if header.has_teacher {
        model.teacher = Some(build_backbone(&meta.arch, 0));
    }
    model.frozen = meta.frozen;
    let expected: Vec<(String, Vec<usize>)> = model.named_params().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
    if expected != header.tensors {
        return Err(bad("tensor table does not match the architecture and configuration".into()));
    }
    let mut values = body[16 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut targets = model.backbone.params_mut();
    targets.extend(model.subnet.params_mut());
    if let Some(t) = model.teacher.as_mut() {
        targets.extend(t.params_mut());
    }
    let want: usize = targets.iter().map(|t| t.len()).sum();
    if body.len() - 16 - hlen != 4 * want {
        return Err(bad(format!("body holds {} bytes, expected {}", body.len() - 16 - hlen, 4 * want)));
    }
    for t in targets {
        t.data.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(path: &Path, model: &ModelState, meta: &CheckpointMeta) -> Result<(), NnError> {
    std::fs::write(path, encode_checkpoint(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, CheckpointMeta), NnError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Round-trips through the stored precision, so in-process state matches a reloaded checkpoint.
pub fn round_to_stored(model: &ModelState) -> ModelState {
    let mut m = model.clone();
    let mut all = m.backbone.params_mut();
    all.extend(m.subnet.params_mut());
    if let Some(t) = m.teacher.as_mut() {
        all.extend(t.params_mut());
    }
    for t in all {
        t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    m
}

pub fn write_curves(path: &Path, curves: &[EpochCurve]) -> Result<(), NnError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_record(CURVE_HEADER).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    for c in curves {
        let row = [c.epoch.to_string(), c.combined_acc.to_string(), c.backbone_acc.to_string(), c.ce.to_string(), c.kd.to_string(), c.adv_ce.to_string(), c.total.to_string()];
        w.write_record(&row).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<EpochCurve>, NnError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e: csv::Error| NnError::Checkpoint(e.to_string()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{sample_random, SearchFactorRanges};

    fn model() -> ModelState {
        let arch = BackboneArch::new(3, 4, 8, 3, 5).unwrap();
        let ranges = SearchFactorRanges::with_blocks(3);
        let config = sample_random(&ranges, 3);
        let mut m = ModelState::new(build_backbone(&arch, 1), &config, 2).unwrap();
        m.teacher = Some(build_backbone(&arch, 9));
        m
    }

    #[test]
    fn roundtrip_restores_stored_precision() {
        let m = model();
        let meta = CheckpointMeta::new(&m, Some(DataRecipe::default()), BTreeMap::from([("train".into(), 4)]), None);
        let bytes = encode_checkpoint(&m, &meta).unwrap();
        let (back, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back, round_to_stored(&m));
        assert_eq!(encode_checkpoint(&back, &meta).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let m = model();
        let meta = CheckpointMeta::new(&m, None, BTreeMap::new(), None);
        let mut bytes = encode_checkpoint(&m, &meta).unwrap();
        let i = bytes.len() / 2;
        bytes[i] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(NnError::Checkpoint(_))));
        assert!(decode_checkpoint(b"nope").is_err());
    }

    #[test]
    fn curves_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = vec![EpochCurve { epoch: 0, combined_acc: 0.5, backbone_acc: 0.25, ce: 1.0, kd: 0.1, adv_ce: 2.0, total: 0.3 }];
        write_curves(&p, &c).unwrap();
        assert_eq!(read_curves(&p).unwrap(), c);
    }
}
