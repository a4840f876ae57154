use std::path::PathBuf;

use clap::Args;
use cwdm::checkpoint::write_atomic;
use cwdm::data::read_manifest;
use cwdm::metrics::{evaluate_split, MetricsReport};
use cwdm::{Error, Result};

use super::Flags;
use crate::config::RunConfig;
use crate::{ConfigArgs, Outcome};

pub const METRICS_TABLE: &str = "metrics.txt";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Prediction directory laid out as `<pred>/<case>/<case>-<suffix><ext>`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Pseudo-validation manifest with ground-truth paths.
    #[arg(long)]
    pub manifest: PathBuf,
    /// `evaluate.crop_mode`
    #[arg(long, value_parser = ["full", "cropped_224"])]
    pub crop: Option<String>,
    /// `evaluate.workers`
    #[arg(long)]
    pub workers: Option<u64>,
    /// `output_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Scores predictions against a manifest with the resolved evaluation settings.
pub fn run_evaluation(cfg: &RunConfig, pred: &std::path::Path, manifest: &std::path::Path) -> Result<MetricsReport> {
    let rows = read_manifest(manifest)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.evaluate.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| evaluate_split(pred, &rows, &cfg.naming, cfg.evaluate.crop_mode, &cfg.evaluate.ssim))
}

pub fn evaluate(a: EvaluateArgs) -> Result<Outcome> {
    let cfg = Flags::default()
        .path("output_dir", &a.out)
        .string("evaluate.crop_mode", a.crop.clone())
        .uint("evaluate.workers", a.workers)
        .resolve(&a.cfg)?;
    if cfg.evaluate.workers == 0 {
        return Err(Error::Config("evaluate.workers must be at least 1".into()));
    }
    cfg.evaluate.ssim.validate()?;
    super::require_dir(&a.pred, "prediction directory")?;
    super::require_file(&a.manifest, "manifest")?;
    let report = run_evaluation(&cfg, &a.pred, &a.manifest)?;

    let out = &cfg.output_dir;
    cfg.echo_into(out)?;
    let table = report.render_table();
    print!("{table}");
    write_atomic(&out.join(METRICS_TABLE), table.as_bytes())?;
    report.write_csv(&out.join(METRICS_CSV))?;
    if report.is_complete() {
        Ok(Outcome::Complete)
    } else {
        Ok(Outcome::Partial(format!("{} prediction(s) missing", report.missing.len())))
    }
}
