//! Self-describing checkpoint container and the per-modality registry.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` metadata length, JSON
//! metadata, then little-endian `f32` arrays (weights, Adam first moment,
//! Adam second moment, optional EMA weights), each `param_count` long.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PreprocessSpec;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::modality::Modality;
use crate::schedule::ScheduleParams;
use crate::trainer::AdamParams;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CWDMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub target: Modality,
    /// Order in which condition volumes were stacked during training.
    pub condition_order: Vec<Modality>,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub preprocess: Option<PreprocessSpec>,
    pub iteration: u64,
    pub seed: u64,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub param_count: usize,
    pub elapsed_seconds: f64,
    pub weights_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub ema: Option<Vec<f32>>,
}

pub fn weights_sha256(weights: &[f32]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.meta.param_count;
        let lens = [self.weights.len(), self.adam_m.len(), self.adam_v.len()];
        if lens.iter().any(|&l| l != n) || self.ema.as_ref().is_some_and(|e| e.len() != n) {
            return Err(Error::Checkpoint(format!("array lengths {lens:?} disagree with param_count {n}")));
        }
        let mut meta = self.meta.clone();
        meta.weights_sha256 = weights_sha256(&self.weights);
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + json.len() + 16 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        write_f32s(&mut out, &self.weights);
        write_f32s(&mut out, &self.adam_m);
        write_f32s(&mut out, &self.adam_v);
        if let Some(e) = &self.ema {
            write_f32s(&mut out, e);
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + json_len).ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(bad("metadata version mismatch"));
        }
        let n = meta.param_count;
        let mut rest = &bytes[20 + json_len..];
        let arrays = match rest.len() {
            l if l == 12 * n => 3,
            l if l == 16 * n => 4,
            _ => return Err(bad("array section has unexpected length")),
        };
        let mut take = || {
            let (head, tail) = rest.split_at(4 * n);
            rest = tail;
            head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<f32>>()
        };
        let weights = take();
        let adam_m = take();
        let adam_v = take();
        let ema = (arrays == 4).then(take);
        if weights_sha256(&weights) != meta.weights_sha256 {
            return Err(bad("weight checksum mismatch"));
        }
        Ok(Self {
            meta,
            weights,
            adam_m,
            adam_v,
            ema,
        })
    }

    /// Weights used for inference: EMA weights when present.
    pub fn inference_weights(&self) -> &[f32] {
        self.ema.as_deref().unwrap_or(&self.weights)
    }

    pub fn denoiser(&self) -> Result<Denoiser<f32>> {
        Denoiser::from_params(self.meta.denoiser.clone(), self.inference_weights().to_vec())
    }

    /// Refuses checkpoints whose stored settings disagree with a request.
    pub fn check_compatible(&self, target: Modality, schedule: Option<&ScheduleParams>) -> Result<()> {
        if self.meta.target != target {
            return Err(Error::Checkpoint(format!(
                "checkpoint generates {}, requested {target}",
                self.meta.target
            )));
        }
        if let Some(s) = schedule {
            if s != &self.meta.schedule {
                return Err(Error::Checkpoint(format!(
                    "schedule {:?} differs from the one the checkpoint was trained with ({:?})",
                    s, self.meta.schedule
                )));
            }
        }
        if self.meta.schedule.timesteps != self.meta.denoiser.num_timesteps {
            return Err(Error::Checkpoint("schedule length and network embedding length differ".into()));
        }
        let mut order = self.meta.condition_order.clone();
        order.sort();
        let mut expected: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| m != target).collect();
        expected.sort();
        if order != expected {
            return Err(Error::Checkpoint(format!(
                "condition order {:?} does not cover the three non-target modalities",
                self.meta.condition_order
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub modality: Modality,
    pub status: EntryStatus,
    /// Relative to the registry file's directory unless absolute.
    pub checkpoint: PathBuf,
    pub sha256: String,
}

/// Maps each target modality to the checkpoint that generates it.
/// Stored as TSV: `modality  status  checkpoint  sha256`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Registry {
    pub dir: PathBuf,
    pub entries: BTreeMap<Modality, RegistryEntry>,
}

pub const REGISTRY_FILE: &str = "registry.tsv";

impl Registry {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Accepts the registry file itself or the directory containing it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(REGISTRY_FILE) } else { path.to_path_buf() };
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(&file)
            .map_err(|e| Error::Registry(format!("{}: {e}", file.display())))?;
        let mut entries = BTreeMap::new();
        for row in rdr.deserialize() {
            let e: RegistryEntry = row.map_err(|e| Error::Registry(format!("{}: {e}", file.display())))?;
            entries.insert(e.modality, e);
        }
        Ok(Self { dir, entries })
    }

    pub fn save(&self) -> Result<()> {
        let path = self.dir.join(REGISTRY_FILE);
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        for e in self.entries.values() {
            w.serialize(e).map_err(|e| Error::Registry(e.to_string()))?;
        }
        if self.entries.is_empty() {
            w.write_record(["modality", "status", "checkpoint", "sha256"])
                .map_err(|e| Error::Registry(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Registry(e.to_string()))?;
        write_atomic(&path, &bytes)
    }

    pub fn resolve(&self, e: &RegistryEntry) -> PathBuf {
        if e.checkpoint.is_absolute() {
            e.checkpoint.clone()
        } else {
            self.dir.join(&e.checkpoint)
        }
    }

    /// Path of a usable checkpoint for `target`.
    pub fn checkpoint_for(&self, target: Modality) -> Result<PathBuf> {
        match self.entries.get(&target) {
            Some(e) if e.status == EntryStatus::Ok => Ok(self.resolve(e)),
            Some(_) => Err(Error::Registry(format!("training of the {target} model failed"))),
            None => Err(Error::Registry(format!("no checkpoint registered for {target}"))),
        }
    }

    /// True when the entry is complete and its file still matches its hash.
    pub fn is_current(&self, target: Modality) -> bool {
        match self.entries.get(&target) {
            Some(e) if e.status == EntryStatus::Ok => {
                file_sha256(&self.resolve(e)).map(|h| h == e.sha256).unwrap_or(false)
            }
            _ => false,
        }
    }

    pub fn complete_count(&self) -> usize {
        self.entries.values().filter(|e| e.status == EntryStatus::Ok).count()
    }
}

/// Loads and verifies the registered checkpoint for `target`.
pub fn load_registered(registry: &Registry, target: Modality) -> Result<(PathBuf, Checkpoint)> {
    let path = registry.checkpoint_for(target)?;
    let entry = &registry.entries[&target];
    let actual = file_sha256(&path)?;
    if actual != entry.sha256 {
        return Err(Error::Registry(format!(
            "{}: content hash {actual} does not match registry ({})",
            path.display(),
            entry.sha256
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    ckpt.check_compatible(target, None)?;
    Ok((path, ckpt))
}
