//! Cohort manifest: a JSON array of subject metadata plus relative paths.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SubjectMeta;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub meta: SubjectMeta,
    /// Volume file, relative to the manifest's directory.
    pub path: String,
    /// Phantom ground-truth record, when the cohort is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
}

impl ManifestEntry {
    pub fn resolve(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.path)
    }
}

pub fn validate_entries(entries: &[ManifestEntry]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in entries {
        if !(e.meta.age > 0.0) {
            return Err(Error::Validation(format!(
                "subject {} has non-positive age {}",
                e.meta.subject_id, e.meta.age
            )));
        }
        if !seen.insert((e.meta.cohort, e.meta.subject_id.as_str())) {
            return Err(Error::Validation(format!(
                "duplicate subject id {} in {:?} cohort",
                e.meta.subject_id, e.meta.cohort
            )));
        }
    }
    Ok(())
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    validate_entries(entries)?;
    let json = serde_json::to_string_pretty(entries).map_err(|e| Error::json("manifest", e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    validate_entries(&entries)?;
    Ok(entries)
}
