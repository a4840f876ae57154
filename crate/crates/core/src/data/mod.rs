//! Dataset ingestion, preprocessing, pseudo-validation and toy data.

mod io;
mod preprocess;
mod pseudoval;
mod scan;
mod toy;

use std::collections::BTreeMap;
use std::path::PathBuf;

pub use io::{read_volume, write_volume};
pub use preprocess::{
    percentile, preprocess_volume, preprocess_volume_with_status, NormalizationStatus,
    PreprocessSpec,
};
pub use pseudoval::{
    make_pseudo_validation, read_manifest, write_manifest, ManifestRow, PseudoValEntry,
};
pub use scan::{scan_case, scan_dataset};
pub use toy::{generate_toy_dataset, toy_intensity, toy_phantom};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::volume::Volume3D;
use crate::wavelet::{pad_to_multiple, PaddingRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// All four modalities present.
    Train,
    /// As found on disk with at least one modality absent.
    Val,
    /// Complete on disk, one modality withheld on purpose.
    PseudoVal,
}

/// One case: where its modality files live and which one (if any) is missing.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub case_dir: PathBuf,
    pub modality_paths: BTreeMap<Modality, PathBuf>,
    /// Set when exactly one modality is absent.
    pub missing: Option<Modality>,
    pub split: Split,
}

impl SubjectRecord {
    pub fn is_complete(&self) -> bool {
        Modality::ALL.iter().all(|m| self.modality_paths.contains_key(m))
    }

    pub fn available(&self) -> Vec<Modality> {
        self.modality_paths.keys().copied().collect()
    }

    /// Loads every listed modality, optionally preprocessing each volume.
    pub fn load(&self, preprocess: Option<&PreprocessSpec>) -> Result<SubjectVolumes> {
        let mut volumes = BTreeMap::new();
        for (&m, path) in &self.modality_paths {
            let raw = read_volume(path)?;
            let v = match preprocess {
                Some(spec) => preprocess_volume(&raw, spec)?,
                None => raw,
            };
            volumes.insert(m, v);
        }
        SubjectVolumes::new(self.subject_id.clone(), volumes)
    }
}

/// In-memory volumes of one subject, all sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectVolumes {
    pub subject_id: String,
    pub volumes: BTreeMap<Modality, Volume3D>,
}

impl SubjectVolumes {
    pub fn new(subject_id: String, volumes: BTreeMap<Modality, Volume3D>) -> Result<Self> {
        let mut shapes = volumes.values().map(Volume3D::shape);
        if let Some(first) = shapes.next() {
            if let Some(other) = shapes.find(|s| *s != first) {
                return Err(Error::Data(format!(
                    "subject {subject_id}: modality shapes differ ({first:?} vs {other:?})"
                )));
            }
        }
        Ok(Self {
            subject_id,
            volumes,
        })
    }

    pub fn get(&self, m: Modality) -> Result<&Volume3D> {
        self.volumes
            .get(&m)
            .ok_or_else(|| Error::Data(format!("subject {} has no {m} volume", self.subject_id)))
    }

    pub fn shape(&self) -> Option<[usize; 3]> {
        self.volumes.values().next().map(Volume3D::shape)
    }

    /// Zero-pads every volume to a multiple of `multiple` per axis.
    pub fn padded(&self, multiple: usize) -> (SubjectVolumes, Option<PaddingRecord>) {
        let mut record = None;
        let volumes = self
            .volumes
            .iter()
            .map(|(&m, v)| {
                let (p, r) = pad_to_multiple(v, multiple);
                record = Some(r);
                (m, p)
            })
            .collect();
        (
            SubjectVolumes {
                subject_id: self.subject_id.clone(),
                volumes,
            },
            record,
        )
    }
}
