use std::fs;
use std::path::PathBuf;

use clap::Args;
use cwdm::checkpoint::{file_sha256, write_atomic};
use cwdm::data::{
    generate_toy_dataset, make_pseudo_validation, preprocess_volume_with_status, read_volume, scan_dataset,
    write_manifest, NormalizationStatus,
};
use cwdm::{Error, Result};

use super::{create_dir, require_dir, Flags};
use crate::{ConfigArgs, Outcome};

#[derive(Debug, Args)]
pub struct GenerateToyArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset root to create (`dataset_root`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `toy.subjects`
    #[arg(long)]
    pub subjects: Option<u32>,
    /// Cubic side length (`toy.shape`).
    #[arg(long)]
    pub size: Option<u32>,
    /// `toy.seed`
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn generate_toy(a: GenerateToyArgs) -> Result<Outcome> {
    let mut flags = Flags::default().path("dataset_root", &a.out).int("toy.subjects", a.subjects).uint("toy.seed", a.seed);
    if let Some(s) = a.size {
        let v = toml::Value::Integer(s.into());
        flags.0.push(("toy.shape", toml::Value::Array(vec![v.clone(), v.clone(), v])));
    }
    let cfg = flags.resolve(&a.cfg)?;
    cfg.naming.validate()?;
    let records = generate_toy_dataset(cfg.toy.subjects, cfg.toy.shape, cfg.toy.seed, &cfg.dataset_root, &cfg.naming)?;
    println!("wrote {} toy subjects to {}", records.len(), cfg.dataset_root.display());
    Ok(Outcome::Complete)
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Raw dataset root (`dataset_root`).
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Output tree (`output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const PREPROCESS_MANIFEST: &str = "preprocess_manifest.tsv";

pub fn preprocess(a: PreprocessArgs) -> Result<Outcome> {
    let cfg = Flags::default().path("dataset_root", &a.root).path("output_dir", &a.out).resolve(&a.cfg)?;
    require_dir(&cfg.dataset_root, "dataset root")?;
    cfg.preprocess.validate()?;
    let records = scan_dataset(&cfg.dataset_root, &cfg.naming)?;
    let src = fs::canonicalize(&cfg.dataset_root).map_err(|e| Error::Config(e.to_string()))?;
    if fs::canonicalize(&cfg.output_dir).is_ok_and(|o| o == src) {
        return Err(Error::Config("output directory must differ from the dataset root".into()));
    }
    create_dir(&cfg.output_dir)?;
    cfg.echo_into(&cfg.output_dir)?;

    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["case_id", "modality", "source", "output", "status", "sha256"]).map_err(csv_err)?;
    let mut degenerate = 0;
    for r in &records {
        for (m, path) in &r.modality_paths {
            let raw = read_volume(path)?;
            let (vol, status) = preprocess_volume_with_status(&raw, &cfg.preprocess)?;
            let name = path.file_name().expect("scanned files have names");
            let out = cfg.output_dir.join(&r.subject_id).join(name);
            cwdm::data::write_volume(&out, &vol)?;
            let status = match status {
                NormalizationStatus::Normalized => "normalized",
                NormalizationStatus::Degenerate => {
                    degenerate += 1;
                    "degenerate"
                }
            };
            w.write_record([
                r.subject_id.as_str(),
                m.code(),
                &path.display().to_string(),
                &out.display().to_string(),
                status,
                &file_sha256(&out)?,
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(&cfg.output_dir.join(PREPROCESS_MANIFEST), &bytes)?;
    println!(
        "preprocessed {} subjects into {} ({degenerate} degenerate volumes)",
        records.len(),
        cfg.output_dir.display()
    );
    Ok(Outcome::Complete)
}

#[derive(Debug, Args)]
pub struct PseudovalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Complete dataset root (`dataset_root`).
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// `pseudoval.seed`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving the manifest (`output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const PSEUDOVAL_MANIFEST: &str = "pseudoval_manifest.tsv";

pub fn pseudoval(a: PseudovalArgs) -> Result<Outcome> {
    let cfg = Flags::default()
        .path("dataset_root", &a.root)
        .uint("pseudoval.seed", a.seed)
        .path("output_dir", &a.out)
        .resolve(&a.cfg)?;
    require_dir(&cfg.dataset_root, "dataset root")?;
    let records = scan_dataset(&cfg.dataset_root, &cfg.naming)?;
    let entries = make_pseudo_validation(&records, cfg.pseudoval.seed)?;
    create_dir(&cfg.output_dir)?;
    cfg.echo_into(&cfg.output_dir)?;
    let rows: Vec<_> = entries.iter().map(|e| e.manifest_row()).collect();
    let path = cfg.output_dir.join(PSEUDOVAL_MANIFEST);
    write_manifest(&path, &rows)?;
    println!("{} cases -> {}", rows.len(), path.display());
    Ok(Outcome::Complete)
}
