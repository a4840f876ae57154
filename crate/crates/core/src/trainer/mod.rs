//! Training loop, resumable checkpoints, and the four-model orchestration.

mod adam;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamParams};

use crate::checkpoint::{file_sha256, Checkpoint, CheckpointMeta, EntryStatus, Registry, RegistryEntry, FORMAT_VERSION};
use crate::data::{scan_dataset, PreprocessSpec, SubjectRecord, SubjectVolumes};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::training_step_inputs;
use crate::modality::{Modality, NamingProfile};
use crate::rng::{standard_normal_vec, stream_rng, Stream};
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::wavelet::{WaveletCoefficients, SUBBANDS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub target: Modality,
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub naming: NamingProfile,
    /// Applied to every volume at load time and stored in the checkpoint so
    /// sampling repeats it. `None` means the data is already preprocessed.
    pub preprocess: Option<PreprocessSpec>,
    pub toy_scale: bool,
    pub adam: AdamParams,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub ema_decay: Option<f64>,
    /// Linear learning-rate ramp length; 0 disables it.
    pub warmup_iterations: u64,
    /// Loaded subjects kept in memory.
    pub cache_subjects: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target: Modality::Flair,
            iterations: 1_200_000,
            learning_rate: 1e-5,
            batch_size: 1,
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfig::default(),
            checkpoint_every: 10_000,
            seed: 0,
            dataset_root: PathBuf::new(),
            naming: NamingProfile::default(),
            preprocess: None,
            toy_scale: false,
            adam: AdamParams::default(),
            grad_clip: None,
            ema_decay: None,
            warmup_iterations: 0,
            cache_subjects: 64,
        }
    }
}

impl TrainConfig {
    /// Small network and schedule-preserving settings for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 2e-3,
            checkpoint_every: 1000,
            toy_scale: true,
            denoiser: DenoiserConfig {
                base_channels: 8,
                depth_levels: 2,
                channel_multipliers: vec![1, 2],
                num_res_blocks: 1,
                norm_groups: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive".into());
            }
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("ema_decay must lie in [0, 1)".into());
            }
        }
        if self.cache_subjects == 0 {
            return bad("cache_subjects must be at least 1".into());
        }
        self.schedule.validate()?;
        self.denoiser.validate()?;
        if self.denoiser.num_timesteps != self.schedule.timesteps {
            return bad(format!(
                "denoiser.num_timesteps ({}) must equal schedule.timesteps ({})",
                self.denoiser.num_timesteps, self.schedule.timesteps
            ));
        }
        if self.denoiser.in_channels != 4 * SUBBANDS {
            return bad("in_channels must be 32 for three condition volumes".into());
        }
        self.adam.validate()?;
        self.naming.validate()?;
        if let Some(p) = &self.preprocess {
            p.validate()?;
        }
        if !self.dataset_root.is_dir() {
            return bad(format!("dataset root {} is not a directory", self.dataset_root.display()));
        }
        Ok(())
    }
}

/// Run-level switches that are not part of the model's identity.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop (after checkpointing) once this iteration is reached, as if the
    /// process had been interrupted there.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub iteration: u64,
    pub losses: Vec<f64>,
}

pub const LOSS_LOG: &str = "loss_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("iter_{iteration:08}.ckpt")
}

/// Uniform draw from `1..=timesteps`.
pub fn sample_timestep<R: Rng>(rng: &mut R, timesteps: usize) -> usize {
    rng.random_range(1..=timesteps)
}

struct SubjectCache<'a> {
    records: &'a [SubjectRecord],
    preprocess: Option<&'a PreprocessSpec>,
    multiple: usize,
    capacity: usize,
    loaded: HashMap<usize, SubjectVolumes>,
    order: Vec<usize>,
}

impl SubjectCache<'_> {
    fn get(&mut self, i: usize) -> Result<&SubjectVolumes> {
        if !self.loaded.contains_key(&i) {
            if self.loaded.len() >= self.capacity {
                let old = self.order.remove(0);
                self.loaded.remove(&old);
            }
            let (vols, _) = self.records[i].load(self.preprocess)?.padded(self.multiple);
            self.loaded.insert(i, vols);
            self.order.push(i);
        }
        Ok(&self.loaded[&i])
    }
}

fn global_norm(g: &[f32]) -> f64 {
    g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

struct LossLog {
    file: fs::File,
}

impl LossLog {
    /// Opens the log, keeping only rows up to `keep_through` when resuming.
    fn open(path: &Path, keep_through: Option<u64>) -> Result<Self> {
        let header = "iteration,loss,seconds_elapsed\n";
        let mut content = String::from(header);
        if let Some(k) = keep_through {
            if let Ok(old) = fs::read_to_string(path) {
                for line in old.lines().skip(1) {
                    let it: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if it.is_some_and(|i| i <= k) {
                        content.push_str(line);
                        content.push('\n');
                    }
                }
            }
        }
        fs::write(path, &content).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    fn push(&mut self, it: u64, loss: f64, secs: f64) -> std::io::Result<()> {
        writeln!(self.file, "{it},{loss:e},{secs:.3}")
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row.map_err(|e| Error::format(path, e.to_string()))?);
    }
    Ok(out)
}

/// Complete training subjects under the configured root.
pub fn training_records(config: &TrainConfig) -> Result<Vec<SubjectRecord>> {
    let records: Vec<_> = scan_dataset(&config.dataset_root, &config.naming)?
        .into_iter()
        .filter(SubjectRecord::is_complete)
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no complete training subjects under {}",
            config.dataset_root.display()
        )));
    }
    Ok(records)
}

/// Trains one target-modality model, writing checkpoints and the loss log
/// into `out_dir`.
///
/// Every random draw of iteration `i` comes from streams indexed by `i`, so a
/// resumed run reproduces an uninterrupted one exactly.
pub fn train(config: &TrainConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let records = training_records(config)?;
    let schedule = NoiseSchedule::new(config.schedule)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model = Denoiser::<f32>::build(config.denoiser.clone(), config.seed)?;
    let n = model.parameter_count();
    let mut opt = Adam::new(n, config.adam);
    let mut ema = config.ema_decay.map(|_| model.params().to_vec());
    let mut start = 0;
    let mut elapsed_before = 0.0;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        if ck.meta.denoiser != config.denoiser || ck.meta.target != config.target || ck.meta.schedule != config.schedule {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model, target or schedule",
                path.display()
            )));
        }
        model.params_mut().copy_from_slice(&ck.weights);
        opt = Adam {
            params: ck.meta.adam,
            m: ck.adam_m,
            v: ck.adam_v,
            step: ck.meta.iteration,
        };
        ema = match (config.ema_decay, ck.ema) {
            (Some(_), Some(e)) => Some(e),
            (Some(_), None) => Some(ck.weights.clone()),
            (None, _) => None,
        };
        start = ck.meta.iteration;
        elapsed_before = ck.meta.elapsed_seconds;
        tracing::info!(iteration = start, "resumed from {}", path.display());
    }

    let log_path = out_dir.join(LOSS_LOG);
    let mut log = LossLog::open(&log_path, opts.resume.as_ref().map(|_| start))?;
    let mut cache = SubjectCache {
        records: &records,
        preprocess: config.preprocess.as_ref(),
        multiple: 2 * config.denoiser.spatial_multiple(),
        capacity: config.cache_subjects,
        loaded: HashMap::new(),
        order: Vec::new(),
    };
    let order = config.target.condition_order().to_vec();
    let clock = Instant::now();
    let mut grads = vec![0f32; n];
    let mut losses = Vec::new();
    let end = match opts.stop_after {
        Some(s) => s.min(config.iterations),
        None => config.iterations,
    };

    let snapshot = |model: &Denoiser<f32>, opt: &Adam, ema: &Option<Vec<f32>>, it: u64, secs: f64| Checkpoint {
        meta: CheckpointMeta {
            format_version: FORMAT_VERSION,
            target: config.target,
            condition_order: order.clone(),
            denoiser: config.denoiser.clone(),
            schedule: config.schedule,
            preprocess: config.preprocess.clone(),
            iteration: it,
            seed: config.seed,
            learning_rate: config.learning_rate,
            adam: opt.params,
            param_count: n,
            elapsed_seconds: secs,
            weights_sha256: String::new(),
        },
        weights: model.params().to_vec(),
        adam_m: opt.m.clone(),
        adam_v: opt.v.clone(),
        ema: ema.clone(),
    };

    for it in start + 1..=end {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut subj_rng = stream_rng(config.seed, Stream::Subject, it);
        let mut t_rng = stream_rng(config.seed, Stream::Timestep, it);
        let mut noise_rng = stream_rng(config.seed, Stream::Noise, it);
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let idx = subj_rng.random_range(0..records.len());
            let t = sample_timestep(&mut t_rng, schedule.timesteps());
            let subject = cache.get(idx)?;
            let [d, h, w] = subject.shape().expect("subject has volumes");
            let spatial = [d / 2, h / 2, w / 2];
            let noise_len = SUBBANDS * spatial.iter().product::<usize>();
            let noise = WaveletCoefficients::new(
                ndarray::Array4::from_shape_vec(
                    (SUBBANDS, spatial[0], spatial[1], spatial[2]),
                    standard_normal_vec(&mut noise_rng, noise_len),
                )
                .expect("noise length matches shape"),
            )?;
            let (x_in, x0) = training_step_inputs(subject, config.target, t, &noise, &schedule)?;
            loss += model.loss_and_grad(&x_in.data, t, &x0.data, &mut grads)?;
        }
        let b = config.batch_size as f64;
        loss /= b;
        if !loss.is_finite() {
            tracing::error!(iteration = it, loss, "non-finite loss, aborting");
            let _ = log.push(it, loss, elapsed_before + clock.elapsed().as_secs_f64());
            return Err(Error::NonFiniteLoss { iteration: it, loss });
        }
        if config.batch_size > 1 {
            let s = 1.0 / config.batch_size as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        if let Some(c) = config.grad_clip {
            let norm = global_norm(&grads);
            if norm > c {
                let s = (c / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = if config.warmup_iterations > 0 {
            config.learning_rate * (it as f64 / config.warmup_iterations as f64).min(1.0)
        } else {
            config.learning_rate
        };
        opt.update(model.params_mut(), &grads, lr);
        if let (Some(d), Some(e)) = (config.ema_decay, ema.as_mut()) {
            for (e, &w) in e.iter_mut().zip(model.params()) {
                *e = (d * *e as f64 + (1.0 - d) * w as f64) as f32;
            }
        }
        let secs = elapsed_before + clock.elapsed().as_secs_f64();
        log.push(it, loss, secs).map_err(|e| Error::io(&log_path, e))?;
        losses.push(loss);
        if it % 100 == 0 {
            tracing::debug!(iteration = it, loss, "training");
        }
        let periodic = config.checkpoint_every > 0 && it % config.checkpoint_every == 0;
        if periodic || it == end {
            let ck = snapshot(&model, &opt, &ema, it, secs);
            if periodic || it < config.iterations {
                ck.save(&out_dir.join(checkpoint_name(it)))?;
            }
            if it == config.iterations {
                ck.save(&out_dir.join(FINAL_CHECKPOINT))?;
            }
        }
    }
    if start >= end && end == config.iterations && !out_dir.join(FINAL_CHECKPOINT).exists() {
        let ck = snapshot(&model, &opt, &ema, start, elapsed_before);
        ck.save(&out_dir.join(FINAL_CHECKPOINT))?;
    }
    let final_checkpoint = if end == config.iterations {
        out_dir.join(FINAL_CHECKPOINT)
    } else {
        out_dir.join(checkpoint_name(end))
    };
    Ok(TrainOutcome {
        final_checkpoint,
        loss_log: log_path,
        iteration: end.max(start),
        losses,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainAllOptions {
    pub skip_existing: bool,
    /// Targets that fail on purpose, for exercising partial-failure handling.
    pub inject_fault: Vec<Modality>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainAllSummary {
    pub trained: Vec<Modality>,
    pub skipped: Vec<Modality>,
    pub failed: Vec<(Modality, String)>,
    pub registry: PathBuf,
}

impl TrainAllSummary {
    pub fn is_success(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Trains one model per modality into `out_dir/<CODE>/` and maintains
/// `out_dir/registry.tsv`. A failing target is recorded and the remaining
/// targets still run.
pub fn train_all(template: &TrainConfig, out_dir: &Path, opts: &TrainAllOptions) -> Result<TrainAllSummary> {
    template.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut registry = match Registry::load(out_dir) {
        Ok(r) if opts.skip_existing => r,
        _ => Registry::new(out_dir),
    };
    registry.dir = out_dir.to_path_buf();
    let mut summary = TrainAllSummary {
        registry: out_dir.join(crate::checkpoint::REGISTRY_FILE),
        ..Default::default()
    };
    for m in Modality::ALL {
        if opts.skip_existing && registry.is_current(m) {
            tracing::info!(target = %m, "checkpoint present, skipping");
            summary.skipped.push(m);
            continue;
        }
        let cfg = TrainConfig {
            target: m,
            ..template.clone()
        };
        let sub = out_dir.join(m.code());
        let result = if opts.inject_fault.contains(&m) {
            Err(Error::Data(format!("injected fault for {m}")))
        } else {
            train(&cfg, &sub, &TrainOptions::default())
        };
        let entry = match result.and_then(|o| {
            let rel = PathBuf::from(m.code()).join(FINAL_CHECKPOINT);
            Ok((rel, file_sha256(&o.final_checkpoint)?))
        }) {
            Ok((rel, sha)) => {
                summary.trained.push(m);
                RegistryEntry {
                    modality: m,
                    status: EntryStatus::Ok,
                    checkpoint: rel,
                    sha256: sha,
                }
            }
            Err(e) => {
                tracing::error!(target = %m, "training failed: {e}");
                summary.failed.push((m, e.to_string()));
                RegistryEntry {
                    modality: m,
                    status: EntryStatus::Failed,
                    checkpoint: PathBuf::new(),
                    sha256: String::new(),
                }
            }
        };
        registry.entries.insert(m, entry);
        registry.save()?;
    }
    Ok(summary)
}
