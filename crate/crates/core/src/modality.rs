use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// MR contrast. `Ord` follows the display order T1, T1ce, T2, FLAIR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn code(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1ce => "T1ce",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The three conditioning modalities for `target`, sorted by code
    /// (FLAIR, T1, T1ce, T2 with the target removed).
    ///
    /// Checkpoints record this order; sampling reads it from the checkpoint
    /// rather than calling this again.
    pub fn condition_order(self) -> [Modality; 3] {
        let mut rest: Vec<Modality> = Self::ALL.into_iter().filter(|&m| m != self).collect();
        rest.sort_by_key(|m| m.code());
        [rest[0], rest[1], rest[2]]
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "t1n" => Ok(Modality::T1),
            "t1ce" | "t1c" => Ok(Modality::T1ce),
            "t2" | "t2w" => Ok(Modality::T2),
            "flair" | "t2f" => Ok(Modality::Flair),
            _ => Err(Error::Config(format!(
                "unknown modality {s:?}; expected one of T1, T1ce, T2, FLAIR"
            ))),
        }
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Volume file extensions the I/O adapter understands, longest first.
pub const SUPPORTED_EXTENSIONS: [&str; 3] = [".nii.gz", ".nii", ".npy"];

/// Maps modalities to filename suffixes: `<case>/<case>-<suffix><extension>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NamingProfile {
    pub t1: String,
    pub t1ce: String,
    pub t2: String,
    pub flair: String,
    /// Extension used when writing. Reading accepts any supported extension.
    pub extension: String,
}

impl Default for NamingProfile {
    fn default() -> Self {
        Self {
            t1: "t1n".into(),
            t1ce: "t1c".into(),
            t2: "t2w".into(),
            flair: "t2f".into(),
            extension: ".nii.gz".into(),
        }
    }
}

impl NamingProfile {
    pub fn suffix(&self, m: Modality) -> &str {
        match m {
            Modality::T1 => &self.t1,
            Modality::T1ce => &self.t1ce,
            Modality::T2 => &self.t2,
            Modality::Flair => &self.flair,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let suffixes: BTreeMap<&str, Modality> =
            Modality::ALL.iter().map(|&m| (self.suffix(m), m)).collect();
        if suffixes.len() != 4 || suffixes.keys().any(|s| s.is_empty()) {
            return Err(Error::Config(
                "naming profile needs four distinct, non-empty suffixes".into(),
            ));
        }
        if !SUPPORTED_EXTENSIONS.contains(&self.extension.as_str()) {
            return Err(Error::Config(format!(
                "unsupported volume extension {:?}; expected one of {SUPPORTED_EXTENSIONS:?}",
                self.extension
            )));
        }
        Ok(())
    }

    pub fn file_name(&self, case_id: &str, m: Modality) -> String {
        format!("{case_id}-{}{}", self.suffix(m), self.extension)
    }

    /// Recognizes `<case_id>-<suffix><ext>` for any supported extension.
    pub fn classify(&self, case_id: &str, file_name: &str) -> Option<Modality> {
        let stem = SUPPORTED_EXTENSIONS
            .iter()
            .find_map(|ext| file_name.strip_suffix(ext))?;
        let suffix = stem.strip_prefix(case_id)?.strip_prefix('-')?;
        Modality::ALL.into_iter().find(|&m| self.suffix(m) == suffix)
    }

    /// Human-readable list of the expected file names for a case.
    pub fn expected_patterns(&self, case_id: &str) -> String {
        Modality::ALL
            .iter()
            .map(|&m| format!("{case_id}-{}{{.nii.gz,.nii,.npy}}", self.suffix(m)))
            .collect::<Vec<_>>()
            .join(", ")
    }
}
