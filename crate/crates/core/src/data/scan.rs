use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{Split, SubjectRecord};
use crate::error::{Error, Result};
use crate::modality::{Modality, NamingProfile};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Builds a record from one case directory `<root>/<case_id>/`.
pub fn scan_case(case_dir: &Path, profile: &NamingProfile) -> Result<SubjectRecord> {
    let case_id = case_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Data(format!("unusable case directory {}", case_dir.display())))?
        .to_string();
    let mut modality_paths: BTreeMap<Modality, PathBuf> = BTreeMap::new();
    for path in sorted_entries(case_dir)? {
        if !path.is_file() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match profile.classify(&case_id, name) {
            Some(m) => {
                if let Some(prev) = modality_paths.insert(m, path.clone()) {
                    return Err(Error::Data(format!(
                        "case {case_id}: both {} and {} map to {m}",
                        prev.display(),
                        path.display()
                    )));
                }
            }
            None => tracing::debug!(case = %case_id, file = %name, "ignoring unrecognized file"),
        }
    }
    let absent: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|m| !modality_paths.contains_key(m))
        .collect();
    Ok(SubjectRecord {
        subject_id: case_id,
        case_dir: case_dir.to_path_buf(),
        missing: (absent.len() == 1).then(|| absent[0]),
        split: if absent.is_empty() { Split::Train } else { Split::Val },
        modality_paths,
    })
}

/// One record per case directory under `root`, sorted by case id.
pub fn scan_dataset(root: &Path, profile: &NamingProfile) -> Result<Vec<SubjectRecord>> {
    profile.validate()?;
    let mut records = Vec::new();
    for path in sorted_entries(root)? {
        if path.is_dir() {
            records.push(scan_case(&path, profile)?);
        } else {
            tracing::debug!(path = %path.display(), "ignoring non-directory entry");
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, b"").unwrap();
    }

    #[test]
    fn brats_suffixes_map_to_modalities() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("BraTS-GLI-00001-000");
        for s in ["t1n", "t1c", "t2w", "t2f"] {
            touch(&case.join(format!("BraTS-GLI-00001-000-{s}.nii.gz")));
        }
        touch(&case.join("BraTS-GLI-00001-000-seg.nii.gz"));
        touch(&dir.path().join("README.txt"));
        let records = scan_dataset(dir.path(), &NamingProfile::default()).unwrap();
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.modality_paths.len(), 4);
        assert_eq!(r.split, Split::Train);
        assert_eq!(r.missing, None);
        assert!(r.modality_paths[&Modality::Flair].ends_with("BraTS-GLI-00001-000-t2f.nii.gz"));
    }

    #[test]
    fn empty_root_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset(dir.path(), &NamingProfile::default()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_modality_is_an_error_naming_the_case() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("c1");
        touch(&case.join("c1-t1n.nii.gz"));
        touch(&case.join("c1-t1n.npy"));
        let err = scan_dataset(dir.path(), &NamingProfile::default()).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn single_gap_is_recorded_as_missing() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("c2");
        for s in ["t1n", "t1c", "t2w"] {
            touch(&case.join(format!("c2-{s}.nii.gz")));
        }
        let r = scan_case(&case, &NamingProfile::default()).unwrap();
        assert_eq!(r.missing, Some(Modality::Flair));
        assert_eq!(r.split, Split::Val);
    }
}
