//! Filesystem helpers: atomic writes plus the roster manifest and
//! per-speaker frame CSV formats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::simcore::{FrameSet, Openness, Roster, SpeakerId};

/// Writes `contents` to `path` through a temporary file in the same
/// directory followed by a rename, so readers never observe a torn file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub label: String,
    /// Frames CSV path, relative to the manifest's directory.
    pub frames: String,
}

/// Roster manifest: `speakers`, `closed_count`, `feature_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub speakers: Vec<ManifestEntry>,
    pub closed_count: usize,
    pub feature_dim: usize,
}

impl Manifest {
    pub fn roster(&self) -> Result<Roster> {
        if self.closed_count > self.speakers.len() {
            return Err(Error::Input(format!(
                "manifest closed_count {} exceeds speaker count {}",
                self.closed_count,
                self.speakers.len()
            )));
        }
        Roster::new(
            self.speakers
                .iter()
                .map(|e| SpeakerId {
                    index: e.index,
                    label: e.label.clone(),
                    openness: if e.index < self.closed_count {
                        Openness::Closed
                    } else {
                        Openness::Open
                    },
                })
                .collect(),
        )
    }
}

/// Writes one frames CSV with header `voiced,f1,...,fF`.
pub fn frames_csv(frames: &FrameSet) -> String {
    let mut out = String::from("voiced");
    for k in 1..=frames.feature_dim() {
        out.push_str(&format!(",f{k}"));
    }
    out.push('\n');
    for (row, &voiced) in frames.frames().rows().into_iter().zip(frames.voiced()) {
        out.push_str(if voiced { "1" } else { "0" });
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_frames_csv(path: &Path, speaker: SpeakerId, feature_dim: usize) -> Result<FrameSet> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    if header.len() != feature_dim + 1 || &header[0] != "voiced" {
        return Err(Error::parse(
            path,
            format!("expected header voiced,f1..f{feature_dim}"),
        ));
    }
    let mut values = Vec::new();
    let mut voiced = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        voiced.push(match &record[0] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::parse(
                    path,
                    format!(
                        "row {}: voiced flag must be 0 or 1, got {other:?}",
                        line + 1
                    ),
                ))
            }
        });
        for field in record.iter().skip(1) {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("row {}: {e}", line + 1)))?,
            );
        }
    }
    let frames = Array2::from_shape_vec((voiced.len(), feature_dim), values)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    FrameSet::new(speaker, frames, voiced)
}

/// Loads every speaker listed in a manifest, resolving frame paths
/// relative to the manifest file.
pub fn load_roster(manifest_path: &Path) -> Result<(Roster, Vec<FrameSet>)> {
    let manifest: Manifest = read_json(manifest_path)?;
    let roster = manifest.roster()?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let sets = manifest
        .speakers
        .iter()
        .zip(roster.speakers())
        .map(|(entry, id)| {
            read_frames_csv(&base.join(&entry.frames), id.clone(), manifest.feature_dim)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((roster, sets))
}
