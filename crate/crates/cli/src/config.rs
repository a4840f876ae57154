//! Run configuration: defaults, optional toy preset, TOML file, `--set`
//! overrides and explicit flags, merged in that order.

use std::fs;
use std::path::{Path, PathBuf};

use cwdm::data::PreprocessSpec;
use cwdm::denoiser::{DenoiserConfig, SkipMode};
use cwdm::metrics::{CropMode, SsimParams};
use cwdm::trainer::{AdamParams, TrainConfig};
use cwdm::{Error, Modality, NamingProfile, Result, ScheduleKind, ScheduleParams};
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub target: Modality,
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Preprocess volumes while loading instead of expecting a
    /// preprocessed tree.
    pub preprocess_on_load: bool,
    pub toy_scale: bool,
    pub adam: AdamParams,
    pub grad_clip: Option<f64>,
    pub ema_decay: Option<f64>,
    pub warmup_iterations: u64,
    pub cache_subjects: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            target: t.target,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            checkpoint_every: t.checkpoint_every,
            seed: t.seed,
            preprocess_on_load: false,
            toy_scale: t.toy_scale,
            adam: t.adam,
            grad_clip: t.grad_clip,
            ema_decay: t.ema_decay,
            warmup_iterations: t.warmup_iterations,
            cache_subjects: t.cache_subjects,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub seed: u64,
    pub snapshot_stride: Option<usize>,
    pub workers: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            seed: 0,
            snapshot_stride: None,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub crop_mode: CropMode,
    pub ssim: SsimParams,
    pub workers: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            crop_mode: CropMode::Full,
            ssim: SsimParams::default(),
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub skip_modes: Vec<SkipMode>,
    pub schedules: Vec<ScheduleKind>,
    pub base_channels: Vec<usize>,
    pub target: Modality,
    /// Cropped by default, as the grid is meant to discount background.
    pub crop_mode: CropMode,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            skip_modes: vec![SkipMode::Additive, SkipMode::Concatenation],
            schedules: vec![ScheduleKind::Linear, ScheduleKind::Cosine],
            base_channels: vec![64, 96, 128],
            target: Modality::T1,
            crop_mode: CropMode::Cropped224,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub subjects: usize,
    pub shape: [usize; 3],
    pub seed: u64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            subjects: 2,
            shape: [32, 32, 32],
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudovalSection {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    pub naming: NamingProfile,
    pub preprocess: PreprocessSpec,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub train: TrainSection,
    pub sampling: SamplingSection,
    pub evaluate: EvaluateSection,
    pub ablate: AblateSection,
    pub pseudoval: PseudovalSection,
    pub toy: ToySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            naming: NamingProfile::default(),
            preprocess: PreprocessSpec::default(),
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainSection::default(),
            sampling: SamplingSection::default(),
            evaluate: EvaluateSection::default(),
            ablate: AblateSection::default(),
            pseudoval: PseudovalSection::default(),
            toy: ToySection::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: two-level C=8 network and short training.
    pub fn toy() -> Self {
        let t = TrainConfig::toy();
        let mut c = Self {
            denoiser: t.denoiser,
            ..Default::default()
        };
        c.train.iterations = t.iterations;
        c.train.learning_rate = t.learning_rate;
        c.train.checkpoint_every = t.checkpoint_every;
        c.train.toy_scale = true;
        c.ablate.base_channels = vec![8];
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            target: t.target,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            schedule: self.schedule,
            denoiser: self.denoiser.clone(),
            checkpoint_every: t.checkpoint_every,
            seed: t.seed,
            dataset_root: self.dataset_root.clone(),
            naming: self.naming.clone(),
            preprocess: t.preprocess_on_load.then(|| self.preprocess.clone()),
            toy_scale: t.toy_scale,
            adam: t.adam,
            grad_clip: t.grad_clip,
            ema_decay: t.ema_decay,
            warmup_iterations: t.warmup_iterations,
            cache_subjects: t.cache_subjects,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets a dotted key such as `train.iterations`.
pub fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key}: parent is not a section")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Layers the configuration sources.
pub fn resolve(toy: bool, file: Option<&Path>, sets: &[String], flags: &[(&str, toml::Value)]) -> Result<RunConfig> {
    let base = if toy { RunConfig::toy() } else { RunConfig::default() };
    let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(parsed));
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        set_path(&mut value, k.trim(), parse_value(v.trim()))?;
    }
    for (k, v) in flags {
        set_path(&mut value, k, v.clone())?;
    }
    let mut cfg: RunConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
    // the embedding is normalized by the chain length, which the schedule owns
    cfg.denoiser.num_timesteps = cfg.schedule.timesteps;
    Ok(cfg)
}
