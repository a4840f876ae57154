use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use cwdm::checkpoint::{write_atomic, Registry};
use cwdm::data::{read_manifest, scan_case};
use cwdm::sampler::{process_case, ModelStore, SynthesisConfig};
use cwdm::{Error, Modality, Result};
use rayon::prelude::*;
use serde::Serialize;

use super::Flags;
use crate::{ConfigArgs, Outcome};

pub const SUMMARY: &str = "synthesis_summary.json";

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// One case directory with exactly one modality missing.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub case: Option<PathBuf>,
    /// Pseudo-validation manifest; each row's dropped modality is withheld.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// With `--case`, ignore this modality even if its file exists.
    #[arg(long, requires = "case")]
    pub withhold: Option<Modality>,
    /// Registry file or directory holding `registry.tsv`.
    #[arg(long)]
    pub registry: PathBuf,
    /// `output_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `sampling.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// `sampling.workers`
    #[arg(long)]
    pub workers: Option<u64>,
    /// `sampling.snapshot_stride`
    #[arg(long)]
    pub snapshot_stride: Option<u64>,
}

#[derive(Debug, Serialize)]
struct CaseSummary {
    case_dir: PathBuf,
    case_id: Option<String>,
    target: Option<Modality>,
    seconds: f64,
    output: Option<PathBuf>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct Summary {
    seed: u64,
    workers: usize,
    total_seconds: f64,
    peak_rss_kib: Option<u64>,
    cases: Vec<CaseSummary>,
}

/// Peak resident set size of this process, where the platform reports it.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

struct Job {
    case_dir: PathBuf,
    withhold: Option<Modality>,
    target: Modality,
}

fn plan(a: &SynthesizeArgs, naming: &cwdm::NamingProfile) -> Result<Vec<Job>> {
    if let Some(case) = &a.case {
        super::require_dir(case, "case")?;
        let rec = scan_case(case, naming)?;
        let missing: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| !rec.modality_paths.contains_key(m) || Some(*m) == a.withhold)
            .collect();
        return match missing.as_slice() {
            [t] => Ok(vec![Job {
                case_dir: case.clone(),
                withhold: a.withhold,
                target: *t,
            }]),
            [] => Err(Error::Request(format!("{}: nothing to synthesize", case.display()))),
            _ => Err(Error::Request(format!(
                "{}: exactly one modality may be missing, found {}",
                case.display(),
                missing.iter().map(|m| m.code()).collect::<Vec<_>>().join(",")
            ))),
        };
    }
    let path = a.manifest.as_ref().expect("clap enforces --case or --manifest");
    super::require_file(path, "manifest")?;
    let rows = read_manifest(path)?;
    if rows.is_empty() {
        return Err(Error::Config(format!("manifest {} has no rows", path.display())));
    }
    rows.into_iter()
        .map(|r| {
            let dir = r
                .ground_truth
                .parent()
                .map(Path::to_path_buf)
                .ok_or_else(|| Error::Data(format!("{}: ground truth path has no parent", r.case_id)))?;
            Ok(Job {
                case_dir: dir,
                withhold: Some(r.dropped),
                target: r.dropped,
            })
        })
        .collect()
}

pub fn synthesize(a: SynthesizeArgs) -> Result<Outcome> {
    let cfg = Flags::default()
        .path("output_dir", &a.out)
        .uint("sampling.seed", a.seed)
        .uint("sampling.workers", a.workers)
        .uint("sampling.snapshot_stride", a.snapshot_stride)
        .resolve(&a.cfg)?;
    if cfg.sampling.workers == 0 {
        return Err(Error::Config("sampling.workers must be at least 1".into()));
    }
    let registry = Registry::load(&a.registry)?;
    let jobs = plan(&a, &cfg.naming)?;

    // Every needed model must resolve and load before any sampling starts.
    let store = ModelStore::new(registry);
    let targets: BTreeSet<Modality> = jobs.iter().map(|j| j.target).collect();
    for &t in &targets {
        store.get(t)?;
    }

    let out = cfg.output_dir.clone();
    cfg.echo_into(&out)?;
    let sc = SynthesisConfig {
        seed: cfg.sampling.seed,
        naming: cfg.naming.clone(),
        snapshot_stride: cfg.sampling.snapshot_stride,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sampling.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let clock = Instant::now();
    let results: Vec<(CaseSummary, Option<Error>)> = pool.install(|| {
        jobs.par_iter()
            .map(|j| {
                let t0 = Instant::now();
                let res = process_case(&j.case_dir, j.withhold, &store, &out, &sc);
                let seconds = t0.elapsed().as_secs_f64();
                match res {
                    Ok(log) => {
                        println!("{} {} -> {}", log.case_id, log.target, log.output.display());
                        (
                            CaseSummary {
                                case_dir: j.case_dir.clone(),
                                case_id: Some(log.case_id),
                                target: Some(log.target),
                                seconds,
                                output: Some(log.output),
                                error: None,
                            },
                            None,
                        )
                    }
                    Err(e) => {
                        tracing::error!(case = %j.case_dir.display(), "{e}");
                        (
                            CaseSummary {
                                case_dir: j.case_dir.clone(),
                                case_id: None,
                                target: Some(j.target),
                                seconds,
                                output: None,
                                error: Some(e.to_string()),
                            },
                            Some(e),
                        )
                    }
                }
            })
            .collect()
    });
    let failed = results.iter().filter(|r| r.1.is_some()).count();
    let n = results.len();
    let mut first_err = None;
    let mut cases = Vec::with_capacity(n);
    for (s, e) in results {
        if first_err.is_none() {
            first_err = e;
        }
        cases.push(s);
    }
    let summary = Summary {
        seed: sc.seed,
        workers: cfg.sampling.workers,
        total_seconds: clock.elapsed().as_secs_f64(),
        peak_rss_kib: peak_rss_kib(),
        cases,
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&out.join(SUMMARY), &json)?;
    match first_err {
        None => Ok(Outcome::Complete),
        Some(e) if failed == n => Err(e),
        Some(_) => Ok(Outcome::Partial(format!("{failed} of {n} cases failed"))),
    }
}
