use std::path::{Path, PathBuf};

use clap::Args;
use cwdm::checkpoint::{file_sha256, EntryStatus, Registry, RegistryEntry};
use cwdm::trainer::{self, training_records, TrainAllOptions, TrainOptions, FINAL_CHECKPOINT};
use cwdm::{Modality, Result};

use super::Flags;
use crate::config::RunConfig;
use crate::{ConfigArgs, Outcome};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `dataset_root`
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `output_dir`; checkpoints go to `<out>/<TARGET>/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `train.target`
    #[arg(long)]
    pub target: Option<Modality>,
    /// `train.iterations`
    #[arg(long)]
    pub iterations: Option<u64>,
    /// `train.learning_rate`
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this iteration as if interrupted.
    #[arg(long, hide = true)]
    pub stop_after: Option<u64>,
}

fn resolve_train(a: &TrainArgs) -> Result<RunConfig> {
    Flags::default()
        .path("dataset_root", &a.root)
        .path("output_dir", &a.out)
        .string("train.target", a.target.map(|m| m.code().to_string()))
        .uint("train.iterations", a.iterations)
        .float("train.learning_rate", a.learning_rate)
        .uint("train.seed", a.seed)
        .resolve(&a.cfg)
}

/// Adds or replaces one registry entry under `out`.
pub fn register(out: &Path, target: Modality, checkpoint: &Path) -> Result<()> {
    let mut reg = Registry::load(out).unwrap_or_else(|_| Registry::new(out));
    reg.dir = out.to_path_buf();
    let rel = checkpoint.strip_prefix(out).unwrap_or(checkpoint).to_path_buf();
    reg.entries.insert(
        target,
        RegistryEntry {
            modality: target,
            status: EntryStatus::Ok,
            checkpoint: rel,
            sha256: file_sha256(checkpoint)?,
        },
    );
    reg.save()
}

pub fn train(a: TrainArgs) -> Result<Outcome> {
    let cfg = resolve_train(&a)?;
    let tc = cfg.train_config();
    tc.validate()?;
    let subjects = training_records(&tc)?.len();
    if let Some(r) = &a.resume {
        super::require_file(r, "resume checkpoint")?;
    }
    let dir = cfg.output_dir.join(tc.target.code());
    cfg.echo_into(&dir)?;
    tracing::info!(target = %tc.target, subjects, iterations = tc.iterations, "training");
    let outcome = trainer::train(
        &tc,
        &dir,
        &TrainOptions {
            resume: a.resume.clone(),
            stop_after: a.stop_after,
        },
    )?;
    if outcome.final_checkpoint.file_name().is_some_and(|n| n == FINAL_CHECKPOINT) {
        register(&cfg.output_dir, tc.target, &outcome.final_checkpoint)?;
    }
    let l = &outcome.losses;
    let k = (l.len() / 2).clamp(1, 100);
    if k > 0 {
        let first = l[..k].iter().sum::<f64>() / k as f64;
        let last = l[l.len() - k..].iter().sum::<f64>() / k as f64;
        println!("loss: first-{k} mean {first:.6e}, last-{k} mean {last:.6e}");
    }
    println!(
        "iteration {} checkpoint {} log {}",
        outcome.iteration,
        outcome.final_checkpoint.display(),
        outcome.loss_log.display()
    );
    Ok(Outcome::Complete)
}

#[derive(Debug, Args)]
pub struct TrainAllArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `dataset_root`
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `output_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `train.iterations`
    #[arg(long)]
    pub iterations: Option<u64>,
    /// `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave targets with a current registry entry alone.
    #[arg(long)]
    pub skip_existing: bool,
    /// Make these targets fail, for testing partial-failure handling.
    #[arg(long, hide = true, value_delimiter = ',')]
    pub inject_fault: Vec<Modality>,
}

pub fn train_all(a: TrainAllArgs) -> Result<Outcome> {
    let cfg = Flags::default()
        .path("dataset_root", &a.root)
        .path("output_dir", &a.out)
        .uint("train.iterations", a.iterations)
        .uint("train.seed", a.seed)
        .resolve(&a.cfg)?;
    let tc = cfg.train_config();
    tc.validate()?;
    training_records(&tc)?;
    cfg.echo_into(&cfg.output_dir)?;
    let s = trainer::train_all(
        &tc,
        &cfg.output_dir,
        &TrainAllOptions {
            skip_existing: a.skip_existing,
            inject_fault: a.inject_fault.clone(),
        },
    )?;
    let codes = |v: &[Modality]| v.iter().map(|m| m.code()).collect::<Vec<_>>().join(",");
    println!(
        "trained [{}] skipped [{}] failed [{}]; registry {}",
        codes(&s.trained),
        codes(&s.skipped),
        s.failed.iter().map(|(m, _)| m.code()).collect::<Vec<_>>().join(","),
        s.registry.display()
    );
    if s.is_success() {
        Ok(Outcome::Complete)
    } else {
        let msg = s.failed.iter().map(|(m, e)| format!("{m}: {e}")).collect::<Vec<_>>().join("; ");
        Ok(Outcome::Partial(msg))
    }
}
