//! Versioned on-disk containers: model checkpoints and second-stage tuple
//! caches. Both share one layout — an 8-byte magic, a length-prefixed JSON
//! manifest, and a blob of little-endian f64 arrays, one per named tensor —
//! so a save→load→save cycle is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Stage1Params, Stage2Params};
use crate::tensor::Tensor;

use super::{SplitTag, StageTwoTuple, TrainConfig};

const MAGIC: &[u8; 8] = b"CTARTIF1";
pub const SCHEMA_VERSION: u32 = 1;

/// Which training stage a checkpoint captures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, counted in f64 slots.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerManifest<M> {
    meta: M,
    arrays: Vec<ArrayEntry>,
}

fn write_container<M: Serialize>(
    path: &Path,
    meta: &M,
    arrays: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0usize;
    for (name, t) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            rows: t.rows,
            cols: t.cols,
            offset,
        });
        offset += t.data.len();
    }
    let manifest = serde_json::to_vec(&ContainerManifest {
        meta,
        arrays: entries,
    })?;
    let mut bytes = Vec::with_capacity(16 + manifest.len() + offset * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    for (_, t) in arrays {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads the container, checking `meta.kind` against `want` before the
/// typed manifest parse so a wrong file kind is reported as such rather
/// than as a missing-field JSON error.
fn read_container<M: DeserializeOwned>(
    path: &Path,
    want_kind: &str,
) -> Result<(M, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::SchemaMismatch(format!(
            "{} is not a parameter container",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let blob_start = 16 + manifest_len;
    if bytes.len() < blob_start {
        return Err(Error::SchemaMismatch("truncated manifest".into()));
    }
    let raw: ContainerManifest<serde_json::Value> = serde_json::from_slice(&bytes[16..blob_start])?;
    let kind = raw.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("<none>");
    if kind != want_kind {
        return Err(Error::SchemaMismatch(format!(
            "expected a {want_kind}, found kind '{kind}'"
        )));
    }
    let manifest = ContainerManifest {
        meta: serde_json::from_value::<M>(raw.meta)?,
        arrays: raw.arrays,
    };
    let blob = &bytes[blob_start..];
    if blob.len() % 8 != 0 {
        return Err(Error::SchemaMismatch("blob is not a whole number of f64".into()));
    }
    let slots = blob.len() / 8;
    let mut out = BTreeMap::new();
    for e in manifest.arrays {
        let len = e.rows * e.cols;
        if e.offset + len > slots {
            return Err(Error::SchemaMismatch(format!(
                "array {} overruns the blob",
                e.name
            )));
        }
        let data: Vec<f64> = (0..len)
            .map(|i| {
                let at = (e.offset + i) * 8;
                f64::from_le_bytes(blob[at..at + 8].try_into().unwrap())
            })
            .collect();
        let tensor = Tensor::new(e.rows, e.cols, data)
            .map_err(|err| Error::SchemaMismatch(format!("array {}: {err}", e.name)))?;
        if out.insert(e.name.clone(), tensor).is_some() {
            return Err(Error::SchemaMismatch(format!("duplicate array {}", e.name)));
        }
    }
    Ok((manifest.meta, out))
}

fn digest_walk(walk: impl FnOnce(&mut dyn FnMut(String, &Tensor))) -> String {
    let mut hasher = Sha256::new();
    walk(&mut |name, t| {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((t.rows as u64).to_le_bytes());
        hasher.update((t.cols as u64).to_le_bytes());
        for v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of the first-stage parameters, used to verify freezing.
pub fn stage1_digest(params: &Stage1Params) -> String {
    digest_walk(|f| params.visit(f))
}

/// Content hash of the second-stage parameters.
pub fn stage2_digest(params: &Stage2Params) -> String {
    digest_walk(|f| params.visit(f))
}

/// Manifest half of a checkpoint: everything except the parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub kind: String,
    pub stage: Stage,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rng_seed: u64,
    /// Stream position of the shuffling generator when training stopped,
    /// decimal u128.
    pub rng_word_pos: String,
    pub norm: NormalizationStats,
    pub best_epoch: usize,
    pub best_val_auprc: f64,
    /// Digest of the first-stage parameters stored in this file.
    pub stage1_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

fn model_arrays(model: &Model) -> Vec<(String, Tensor)> {
    let mut arrays = Vec::new();
    model.stage1.visit(&mut |name, t| arrays.push((name, t.clone())));
    if let Some(s2) = &model.stage2 {
        s2.visit(&mut |name, t| arrays.push((name, t.clone())));
    }
    arrays
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let owned = model_arrays(&ckpt.model);
    let borrowed: Vec<(String, &Tensor)> =
        owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(path, &ckpt.meta, &borrowed)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, mut arrays): (CheckpointMeta, _) = read_container(path, "checkpoint")?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "checkpoint schema v{} (this build reads v{SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    let mut model = Model::init(meta.model.clone(), meta.rng_seed)?;
    let mut missing = Vec::new();
    let mut restore = |name: String, t: &mut Tensor| match arrays.remove(&name) {
        Some(stored) if stored.rows == t.rows && stored.cols == t.cols => {
            t.data = stored.data;
        }
        Some(stored) => missing.push(format!(
            "{name}: shape {}x{} in file, {}x{} expected",
            stored.rows, stored.cols, t.rows, t.cols
        )),
        None => missing.push(format!("{name}: absent")),
    };
    model.stage1.visit_mut(&mut restore);
    if let Some(s2) = &mut model.stage2 {
        s2.visit_mut(&mut restore);
    }
    if !missing.is_empty() {
        return Err(Error::SchemaMismatch(missing.join("; ")));
    }
    if !arrays.is_empty() {
        let extra: Vec<String> = arrays.keys().cloned().collect();
        return Err(Error::SchemaMismatch(format!(
            "unused arrays in checkpoint: {}",
            extra.join(", ")
        )));
    }
    Ok(Checkpoint { meta, model })
}

/// Manifest half of a tuple cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleCacheMeta {
    pub schema_version: u32,
    pub kind: String,
    pub model: ModelConfig,
    /// Digest of the first-stage parameters that produced these tuples.
    pub stage1_digest: String,
    pub patients: Vec<TuplePatient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuplePatient {
    pub patient_id: String,
    pub split: SplitTag,
    pub t_valid: usize,
    pub label: u8,
}

pub fn save_tuple_cache(
    path: &Path,
    model: &ModelConfig,
    stage1_digest: &str,
    tuples: &[StageTwoTuple],
) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for t in tuples {
        if !seen.insert(&t.patient_id) {
            return Err(Error::invalid(format!(
                "duplicate patient_id {} in tuple cache",
                t.patient_id
            )));
        }
    }
    let meta = TupleCacheMeta {
        schema_version: SCHEMA_VERSION,
        kind: "tuple_cache".into(),
        model: model.clone(),
        stage1_digest: stage1_digest.into(),
        patients: tuples
            .iter()
            .map(|t| TuplePatient {
                patient_id: t.patient_id.clone(),
                split: t.split,
                t_valid: t.t_valid,
                label: t.label,
            })
            .collect(),
    };
    let mut arrays = Vec::with_capacity(tuples.len() * 3);
    for t in tuples {
        arrays.push((format!("{}/h_cfc", t.patient_id), &t.h_cfc));
        arrays.push((format!("{}/g", t.patient_id), &t.g));
        arrays.push((format!("{}/a", t.patient_id), &t.a));
    }
    write_container(path, &meta, &arrays)
}

pub fn load_tuple_cache(path: &Path) -> Result<(TupleCacheMeta, Vec<StageTwoTuple>)> {
    let (meta, mut arrays): (TupleCacheMeta, _) = read_container(path, "tuple_cache")?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "tuple cache schema v{} (this build reads v{SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    let mut tuples = Vec::with_capacity(meta.patients.len());
    for p in &meta.patients {
        let mut take = |suffix: &str| {
            arrays
                .remove(&format!("{}/{suffix}", p.patient_id))
                .ok_or_else(|| {
                    Error::SchemaMismatch(format!("missing array {}/{suffix}", p.patient_id))
                })
        };
        tuples.push(StageTwoTuple {
            patient_id: p.patient_id.clone(),
            split: p.split,
            t_valid: p.t_valid,
            label: p.label,
            h_cfc: take("h_cfc")?,
            g: take("g")?,
            a: take("a")?,
        });
    }
    if !arrays.is_empty() {
        let extra: Vec<String> = arrays.keys().cloned().collect();
        return Err(Error::SchemaMismatch(format!(
            "unused arrays in tuple cache: {}",
            extra.join(", ")
        )));
    }
    Ok((meta, tuples))
}
