//! JSON-lines manifests and in-memory sample sets.
//!
//! A manifest row is `{"id": ..., "path": ..., "label": 0|1}` with `path`
//! resolved relative to the manifest's directory, so a dataset tree can move
//! as a unit.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{assemble_volume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}: manifest contains no records")]
    EmptyManifest { path: PathBuf },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// One manifest row as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub label: usize,
}

/// A manifest row with its scan path resolved.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub id: String,
    pub label: usize,
    pub path: PathBuf,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ScanRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| DatasetError::Manifest {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let rec: ManifestRecord = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        if rec.label > 1 {
            return Err(bad(format!("label must be 0 or 1, got {}", rec.label)));
        }
        if let Some(prev) = seen.insert(rec.id.clone(), line) {
            return Err(bad(format!("duplicate id {:?} (also on line {prev})", rec.id)));
        }
        records.push(ScanRecord {
            id: rec.id,
            label: rec.label,
            path: dir.join(&rec.path),
        });
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyManifest { path: path.to_path_buf() });
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DatasetError> {
    let mut body = String::new();
    for rec in records {
        body.push_str(&serde_json::to_string(rec).expect("manifest record serializes"));
        body.push('\n');
    }
    fs::write(path, body).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A labeled volume ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub volume: Volume,
}

/// Assembles every referenced scan (raw cache or PGM stack) into memory.
pub fn load_samples(records: &[ScanRecord]) -> Result<Vec<Sample>, DatasetError> {
    records
        .iter()
        .map(|rec| {
            let mut volume = assemble_volume(&rec.path)?;
            volume.scan_id = rec.id.clone();
            Ok(Sample { id: rec.id.clone(), label: rec.label, volume })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{write_raw_cache, IntensityDomain};
    use tempfile::TempDir;

    fn write_lines(dir: &TempDir, name: &str, lines: &[&str]) -> PathBuf {
        let path = dir.path().join(name);
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    #[test]
    fn loads_and_resolves_relative_paths() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(
            &dir,
            "train.jsonl",
            &[
                r#"{"id":"a","path":"scans/a","label":0}"#,
                "",
                r#"{"id":"b","path":"scans/b","label":1}"#,
            ],
        );
        let recs = load_manifest(&path).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].path, dir.path().join("scans/a"));
        assert_eq!(recs[1].label, 1);
    }

    #[test]
    fn roundtrips_through_write_manifest() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![
            ManifestRecord { id: "x".into(), path: "x".into(), label: 1 },
            ManifestRecord { id: "y".into(), path: "sub/y".into(), label: 0 },
        ];
        write_manifest(&path, &records).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].id, "x");
        assert_eq!(back[1].path, dir.path().join("sub/y"));
    }

    #[test]
    fn rejects_duplicate_ids_with_both_lines() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(
            &dir,
            "dup.jsonl",
            &[
                r#"{"id":"a","path":"p1","label":0}"#,
                r#"{"id":"a","path":"p2","label":1}"#,
            ],
        );
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("also on line 1"), "{msg}");
    }

    #[test]
    fn rejects_out_of_range_labels_and_unknown_keys() {
        let dir = TempDir::new().unwrap();
        let bad_label = write_lines(&dir, "l.jsonl", &[r#"{"id":"a","path":"p","label":2}"#]);
        let err = load_manifest(&bad_label).unwrap_err();
        assert!(err.to_string().contains("label must be 0 or 1"), "{err}");

        let extra = write_lines(&dir, "k.jsonl", &[r#"{"id":"a","path":"p","label":0,"lable":1}"#]);
        let err = load_manifest(&extra).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("lable"), "{msg}");
    }

    #[test]
    fn reports_parse_errors_with_line_numbers() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(
            &dir,
            "bad.jsonl",
            &[r#"{"id":"a","path":"p","label":0}"#, "not json"],
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(&dir, "empty.jsonl", &["", "  "]);
        assert!(matches!(load_manifest(&path).unwrap_err(), DatasetError::EmptyManifest { .. }));
    }

    #[test]
    fn load_samples_reads_raw_caches_and_renames_to_manifest_id() {
        let dir = TempDir::new().unwrap();
        let scan = dir.path().join("cachedir");
        let v = Volume::new(2, 2, 2, vec![0.25; 8], IntensityDomain::Unit, "orig");
        write_raw_cache(&scan, &v).unwrap();
        let path = write_lines(&dir, "m.jsonl", &[r#"{"id":"s1","path":"cachedir","label":1}"#]);
        let samples = load_samples(&load_manifest(&path).unwrap()).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].volume.shape(), (2, 2, 2));
        assert_eq!(samples[0].volume.scan_id, "s1");
        assert_eq!(samples[0].volume.intensity_domain, IntensityDomain::Unit);
        assert_eq!(samples[0].label, 1);
    }

    #[test]
    fn load_samples_surfaces_missing_scan_errors() {
        let dir = TempDir::new().unwrap();
        let path = write_lines(&dir, "m.jsonl", &[r#"{"id":"s1","path":"gone","label":0}"#]);
        let err = load_samples(&load_manifest(&path).unwrap()).unwrap_err();
        assert!(matches!(err, DatasetError::Volume(_)));
    }
}
