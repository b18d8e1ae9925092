use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Subtype;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Full CT volumes with tumor masks, whole slides with ROI masks.
    Raw,
    /// CT patches in `[0, 1]` and patch-bag directories.
    Preprocessed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub case_id: String,
    pub label: Subtype,
    /// Relative to the manifest directory.
    pub ct_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct_mask_path: Option<PathBuf>,
    /// Present iff the case is paired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wsi_patch_dir: Option<PathBuf>,
    pub center: String,
}

impl CaseRecord {
    pub fn is_paired(&self) -> bool {
        self.wsi_patch_dir.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub stage: Stage,
    pub cases: Vec<CaseRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(stage: Stage, cases: Vec<CaseRecord>) -> Self {
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            stage,
            cases,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Input(format!("duplicate case id {}", c.case_id)));
            }
            if self.stage == Stage::Raw && c.ct_mask_path.is_none() {
                return Err(Error::Input(format!("raw case {} has no CT mask", c.case_id)));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == id)
    }

    pub fn paired(&self) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(|c| c.is_paired())
    }

    pub fn ct_only(&self) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(|c| !c.is_paired())
    }
}

/// Directory that relative manifest paths are resolved against.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
