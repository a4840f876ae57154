use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Split, SubjectRecord};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rng::{stream_rng, Stream};

/// A complete subject with one modality withheld. The withheld file stays
/// on disk and is referenced as ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoValEntry {
    pub record: SubjectRecord,
    pub dropped: Modality,
    pub ground_truth: PathBuf,
}

impl PseudoValEntry {
    pub fn manifest_row(&self) -> ManifestRow {
        ManifestRow {
            case_id: self.record.subject_id.clone(),
            dropped: self.dropped,
            ground_truth: self.ground_truth.clone(),
        }
    }
}

/// Drops one modality per subject, independently and uniformly, from a
/// single seeded stream consumed in record order.
pub fn make_pseudo_validation(records: &[SubjectRecord], seed: u64) -> Result<Vec<PseudoValEntry>> {
    if let Some(bad) = records.iter().find(|r| !r.is_complete()) {
        return Err(Error::Data(format!(
            "case {} is already missing a modality; pseudo-validation needs complete cases",
            bad.subject_id
        )));
    }
    let mut rng = stream_rng(seed, Stream::PseudoVal, 0);
    Ok(records
        .iter()
        .map(|r| {
            let dropped = Modality::ALL[rng.random_range(0..Modality::ALL.len())];
            let mut record = r.clone();
            let ground_truth = record.modality_paths.remove(&dropped).expect("complete record");
            record.missing = Some(dropped);
            record.split = Split::PseudoVal;
            PseudoValEntry {
                record,
                dropped,
                ground_truth,
            }
        })
        .collect())
}

/// One line of the pseudo-validation manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub dropped: Modality,
    pub ground_truth: PathBuf,
}

/// Tab-separated, header `case_id  dropped  ground_truth`.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e)))
        .collect()
}
