//! Skip-connection × schedule × width grid at desk scale.
//!
//! Each cell is an ordinary `train` run followed by `synthesize` on the
//! ablation manifest, both executed as child processes of this binary so
//! that wall time and peak memory are per cell. Scores come from the same
//! evaluation path as the `evaluate` subcommand.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use clap::Args;
use cwdm::checkpoint::write_atomic;
use cwdm::data::{scan_dataset, write_manifest, ManifestRow};
use cwdm::denoiser::SkipMode;
use cwdm::{Error, Modality, Result, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::commands::evaluate::run_evaluation;
use crate::commands::synth::SUMMARY;
use crate::commands::Flags;
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::{ConfigArgs, Outcome};

pub const MANIFEST: &str = "ablation_manifest.tsv";
pub const REPORT: &str = "ablation.txt";
pub const REPORT_CSV: &str = "ablation.csv";

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// `dataset_root`
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `output_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `ablate.skip_modes`
    #[arg(long, value_delimiter = ',')]
    pub skip_modes: Vec<SkipMode>,
    /// `ablate.schedules`
    #[arg(long, value_delimiter = ',')]
    pub schedules: Vec<ScheduleKind>,
    /// `ablate.base_channels`
    #[arg(long, value_delimiter = ',')]
    pub base_channels: Vec<i64>,
    /// `ablate.target`
    #[arg(long)]
    pub target: Option<Modality>,
    /// `train.iterations`
    #[arg(long)]
    pub iterations: Option<u64>,
}

/// One row of the ablation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub skip_mode: SkipMode,
    pub schedule: ScheduleKind,
    pub base_channels: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean synthesis wall time per case.
    pub time_s: f64,
    /// Peak resident memory of the synthesis process, if the platform reports it.
    pub memory_mb: Option<f64>,
    pub train_s: f64,
    pub cell_dir: PathBuf,
}

pub fn cell_name(skip: SkipMode, sched: ScheduleKind, c: usize) -> String {
    format!("{skip}_{sched}_C{c}")
}

fn grid(cfg: &RunConfig) -> Result<Vec<RunConfig>> {
    let a = &cfg.ablate;
    if a.skip_modes.is_empty() || a.schedules.is_empty() || a.base_channels.is_empty() {
        return Err(Error::Config(format!(
            "empty ablation grid: {} skip modes x {} schedules x {} widths",
            a.skip_modes.len(),
            a.schedules.len(),
            a.base_channels.len()
        )));
    }
    let mut cells = Vec::new();
    for &skip in &a.skip_modes {
        for &sched in &a.schedules {
            for &c in &a.base_channels {
                let mut cell = cfg.clone();
                cell.denoiser.skip_mode = skip;
                cell.denoiser.base_channels = c;
                cell.schedule.kind = sched;
                cell.train.target = a.target;
                cell.output_dir = cfg.output_dir.join("cells").join(cell_name(skip, sched, c));
                cell.denoiser.validate()?;
                cell.train_config().validate()?;
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

fn run_child(exe: &Path, args: &[&std::ffi::OsStr], log: &Path) -> Result<()> {
    let file = fs::File::create(log).map_err(|e| Error::io(log, e))?;
    let err = file.try_clone().map_err(|e| Error::io(log, e))?;
    let status = Command::new(exe)
        .args(args)
        .stdin(Stdio::null())
        .stdout(file)
        .stderr(err)
        .status()
        .map_err(|e| Error::io(exe, e))?;
    if status.success() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "{} {} exited with {status}; see {}",
            exe.display(),
            args.first().map(|a| a.to_string_lossy()).unwrap_or_default(),
            log.display()
        )))
    }
}

fn run_cell(exe: &Path, cell: &RunConfig, manifest: &Path) -> Result<CellResult> {
    let dir = &cell.output_dir;
    cell.echo_into(dir)?;
    let config = dir.join(RESOLVED_CONFIG);

    let t0 = Instant::now();
    run_child(
        exe,
        &["train".as_ref(), "--config".as_ref(), config.as_os_str()],
        &dir.join("train.log"),
    )?;
    let train_s = t0.elapsed().as_secs_f64();

    let pred = dir.join("pred");
    run_child(
        exe,
        &[
            "synthesize".as_ref(),
            "--config".as_ref(),
            config.as_os_str(),
            "--manifest".as_ref(),
            manifest.as_os_str(),
            "--registry".as_ref(),
            dir.as_os_str(),
            "--out".as_ref(),
            pred.as_os_str(),
        ],
        &dir.join("synthesize.log"),
    )?;
    let summary_path = pred.join(SUMMARY);
    let text = fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    let summary: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(&summary_path, e))?;
    let secs: Vec<f64> = summary["cases"]
        .as_array()
        .map(|a| a.iter().filter_map(|c| c["seconds"].as_f64()).collect())
        .unwrap_or_default();
    let time_s = secs.iter().sum::<f64>() / secs.len().max(1) as f64;
    let memory_mb = summary["peak_rss_kib"].as_f64().map(|k| k / 1024.0);

    let mut eval_cfg = cell.clone();
    eval_cfg.evaluate.crop_mode = cell.ablate.crop_mode;
    let report = run_evaluation(&eval_cfg, &pred, manifest)?;
    if !report.is_complete() {
        return Err(Error::Data(format!("{}: missing predictions {:?}", dir.display(), report.missing)));
    }
    report.write_csv(&dir.join(crate::commands::evaluate::METRICS_CSV))?;
    let g = report
        .overall
        .ok_or_else(|| Error::Data(format!("{}: nothing was scored", dir.display())))?;
    Ok(CellResult {
        skip_mode: cell.denoiser.skip_mode,
        schedule: cell.schedule.kind,
        base_channels: cell.denoiser.base_channels,
        mse: g.mse,
        psnr: g.psnr,
        ssim: g.ssim,
        time_s,
        memory_mb,
        train_s,
        cell_dir: dir.clone(),
    })
}

/// Rank markers per column: `*` best, `+` second best.
fn markers(values: &[Option<f64>], lower_is_better: bool) -> Vec<&'static str> {
    let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| if lower_is_better { a.total_cmp(b) } else { b.total_cmp(a) });
    distinct.dedup();
    values
        .iter()
        .map(|v| match v {
            Some(x) if distinct.first() == Some(x) => "*",
            Some(x) if distinct.get(1) == Some(x) => "+",
            _ => " ",
        })
        .collect()
}

/// Index of the overall best setup: highest SSIM, then highest PSNR.
pub fn overall_best(rows: &[CellResult]) -> Option<usize> {
    (0..rows.len()).max_by(|&a, &b| {
        rows[a]
            .ssim
            .total_cmp(&rows[b].ssim)
            .then(rows[a].psnr.total_cmp(&rows[b].psnr))
            .then(b.cmp(&a))
    })
}

pub fn render_report(rows: &[CellResult], target: Modality, crop: &str) -> String {
    let col = |f: fn(&CellResult) -> Option<f64>, low: bool| markers(&rows.iter().map(f).collect::<Vec<_>>(), low);
    let m_mse = col(|r| Some(r.mse), true);
    let m_psnr = col(|r| Some(r.psnr), false);
    let m_ssim = col(|r| Some(r.ssim), false);
    let m_time = col(|r| Some(r.time_s), true);
    let m_mem = col(|r| r.memory_mb, true);
    let best = overall_best(rows);

    let mut out = String::new();
    let _ = writeln!(out, "# target {target}; crop {crop}; * best, + second best, > overall best setup");
    let _ = writeln!(
        out,
        "  {:<14} {:<8} {:>4} {:>12} {:>9} {:>8} {:>10} {:>12} {:>10}",
        "Skip", "Schedule", "C", "MSE", "PSNR", "SSIM", "Time [s]", "Memory [MB]", "Train [s]"
    );
    for (i, r) in rows.iter().enumerate() {
        let mem = r.memory_mb.map_or_else(|| "n/a".to_string(), |m| format!("{m:.1}"));
        let _ = writeln!(
            out,
            "{} {:<14} {:<8} {:>4} {:>11.3e}{} {:>8.2}{} {:>7.3}{} {:>9.2}{} {:>11}{} {:>10.1}",
            if Some(i) == best { ">" } else { " " },
            r.skip_mode.to_string(),
            r.schedule.to_string(),
            r.base_channels,
            r.mse,
            m_mse[i],
            r.psnr,
            m_psnr[i],
            r.ssim,
            m_ssim[i],
            r.time_s,
            m_time[i],
            mem,
            m_mem[i],
            r.train_s
        );
    }
    out
}

pub fn write_report_csv(path: &Path, rows: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<CellResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e))).collect()
}

pub fn ablate(a: AblateArgs) -> Result<Outcome> {
    let base_channels: Vec<i64> = a.base_channels.clone();
    let cfg = Flags::default()
        .path("dataset_root", &a.root)
        .path("output_dir", &a.out)
        .list("ablate.skip_modes", &a.skip_modes.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        .list("ablate.schedules", &a.schedules.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        .list("ablate.base_channels", &base_channels)
        .string("ablate.target", a.target.map(|m| m.code().to_string()))
        .uint("train.iterations", a.iterations)
        .resolve(&a.cfg)?;
    let cells = grid(&cfg)?;
    let target = cfg.ablate.target;
    let records = scan_dataset(&cfg.dataset_root, &cfg.naming)?;
    let rows: Vec<ManifestRow> = records
        .iter()
        .filter(|r| r.is_complete())
        .map(|r| ManifestRow {
            case_id: r.subject_id.clone(),
            dropped: target,
            ground_truth: r.modality_paths[&target].clone(),
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{}: no complete subjects to evaluate on",
            cfg.dataset_root.display()
        )));
    }
    let exe = std::env::current_exe().map_err(|e| Error::io(Path::new("current_exe"), e))?;

    let out = &cfg.output_dir;
    cfg.echo_into(out)?;
    let manifest = out.join(MANIFEST);
    write_manifest(&manifest, &rows)?;

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for cell in &cells {
        let name = cell.output_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        tracing::info!(cell = %name, "running");
        match run_cell(&exe, cell, &manifest) {
            Ok(r) => results.push(r),
            Err(e) => {
                tracing::error!(cell = %name, "{e}");
                failures.push(format!("{name}: {e}"));
            }
        }
    }
    if results.is_empty() {
        return Err(Error::Data(format!("every ablation cell failed: {}", failures.join("; "))));
    }
    let table = render_report(&results, target, &cfg.ablate.crop_mode.to_string());
    print!("{table}");
    write_atomic(&out.join(REPORT), table.as_bytes())?;
    write_report_csv(&out.join(REPORT_CSV), &results)?;
    if failures.is_empty() {
        Ok(Outcome::Complete)
    } else {
        Ok(Outcome::Partial(failures.join("; ")))
    }
}
