// SPDX-License-Identifier: MIT OR Apache-2.0

//! Append-only JSON-lines manifest.
//!
//! Line 1 is a [`ManifestHeader`]; every following line is one
//! [`CellRecord`]. A cell id may appear at most once.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::ExperimentPlan;
use crate::error::{Error, Result};
use crate::idp::LatentPolicy;
use crate::reptypes::{Condition, Method};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub plan_hash: String,
    pub method: Method,
    pub backend_id: String,
    pub config_hash: String,
    pub extractor_id: String,
    pub toolkit_version: String,
    /// Clean-stream latent policy; IDP runs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_policy: Option<LatentPolicy>,
    /// Conditions executed, including the implicit `full` reference.
    pub conditions: Vec<Condition>,
    pub plan: ExperimentPlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub plan_hash: String,
    pub cell_id: String,
    /// Position in the plan's canonical cell order.
    pub index: usize,
    pub prompt_id: String,
    pub replicate: u32,
    pub condition: Condition,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_text: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn cell_id(prompt_id: &str, replicate: u32, condition: Condition) -> String {
    format!("{prompt_id}/{replicate}/{condition}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub cells: Vec<CellRecord>,
}

impl Manifest {
    pub fn completed(&self) -> HashSet<String> {
        self.cells.iter().map(|c| c.cell_id.clone()).collect()
    }
}

/// Reads and integrity-checks a manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Integrity("manifest is empty".into()))?;
    let header: ManifestHeader =
        serde_json::from_str(first).map_err(|e| Error::Integrity(format!("header: {e}")))?;
    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for (n, line) in lines {
        let cell: CellRecord = serde_json::from_str(line)
            .map_err(|e| Error::Integrity(format!("line {}: {e}", n + 1)))?;
        if cell.plan_hash != header.plan_hash {
            return Err(Error::Integrity(format!(
                "line {}: cell `{}` belongs to plan {}, manifest is for {}",
                n + 1,
                cell.cell_id,
                cell.plan_hash,
                header.plan_hash
            )));
        }
        if !seen.insert(cell.cell_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate cell id `{}`",
                cell.cell_id
            )));
        }
        cells.push(cell);
    }
    Ok(Manifest { header, cells })
}

/// Single serialization point for cell records.
#[derive(Debug)]
pub struct ManifestWriter {
    path: PathBuf,
    file: File,
    seen: HashSet<String>,
}

impl ManifestWriter {
    /// Opens `path` for appending, writing `header` if the file is new.
    /// An existing manifest must carry the same header.
    pub fn open(path: &Path, header: &ManifestHeader) -> Result<(Self, Vec<CellRecord>)> {
        let existing = if path.exists() {
            let m = read_manifest(path)?;
            if m.header.plan_hash != header.plan_hash {
                return Err(Error::Integrity(format!(
                    "manifest is for plan {}, not {}",
                    m.header.plan_hash, header.plan_hash
                )));
            }
            if m.header.method != header.method
                || m.header.config_hash != header.config_hash
                || m.header.latent_policy != header.latent_policy
            {
                return Err(Error::Integrity(
                    "manifest was produced with a different method, backend config or latent policy".into(),
                ));
            }
            Some(m.cells)
        } else {
            None
        };
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let cells = match existing {
            Some(cells) => cells,
            None => {
                let mut line = serde_json::to_string(header)?;
                line.push('\n');
                file.write_all(line.as_bytes())
                    .map_err(|e| Error::io(path, e))?;
                Vec::new()
            }
        };
        let seen = cells.iter().map(|c| c.cell_id.clone()).collect();
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                seen,
            },
            cells,
        ))
    }

    pub fn append(&mut self, cell: &CellRecord) -> Result<()> {
        if !self.seen.insert(cell.cell_id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate cell id `{}`",
                cell.cell_id
            )));
        }
        let mut line = serde_json::to_string(cell)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}
