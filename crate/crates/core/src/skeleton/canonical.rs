//! Canonical on-disk sample format consumed by every downstream stage.
//!
//! One JSON file per sample, `{sample_id, label, D, T, V, body_count, coords}`
//! with `coords` nested as `[D][T][V]`, plus a `manifest.json` listing the
//! files and per-class counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{SequenceError, SkeletonSequence};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CanonicalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {message}")]
    Json { path: PathBuf, message: String },
    #[error("{path}: coords shape does not match D={d}, T={t}, V={v}")]
    Shape {
        path: PathBuf,
        d: usize,
        t: usize,
        v: usize,
    },
    #[error("{path}: {source}")]
    Sequence {
        path: PathBuf,
        #[source]
        source: SequenceError,
    },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalSample {
    sample_id: String,
    label: Option<String>,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(default = "one")]
    body_count: usize,
    coords: Vec<Vec<Vec<f64>>>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_count: usize,
    pub class_counts: BTreeMap<String, usize>,
    /// Sample files relative to the manifest, sorted by sample id.
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<String>,
    #[serde(default)]
    pub skipped: Vec<SkippedFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

/// Serializes the first held body.
pub fn to_canonical_json(seq: &SkeletonSequence) -> String {
    let coords = (0..seq.dims())
        .map(|d| {
            (0..seq.frames())
                .map(|t| (0..seq.joints()).map(|v| seq.at(d, t, v)).collect())
                .collect()
        })
        .collect();
    let sample = CanonicalSample {
        sample_id: seq.sample_id.clone(),
        label: seq.label.clone(),
        d: seq.dims(),
        t: seq.frames(),
        v: seq.joints(),
        body_count: seq.body_count(),
        coords,
    };
    serde_json::to_string(&sample).expect("sample serializes")
}

pub fn from_canonical_json(text: &str, path: &Path) -> Result<SkeletonSequence, CanonicalError> {
    let s: CanonicalSample = serde_json::from_str(text).map_err(|e| CanonicalError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let shape_err = || CanonicalError::Shape {
        path: path.to_path_buf(),
        d: s.d,
        t: s.t,
        v: s.v,
    };
    if s.coords.len() != s.d {
        return Err(shape_err());
    }
    let mut flat = Vec::with_capacity(s.d * s.t * s.v);
    for plane in &s.coords {
        if plane.len() != s.t {
            return Err(shape_err());
        }
        for row in plane {
            if row.len() != s.v {
                return Err(shape_err());
            }
            flat.extend_from_slice(row);
        }
    }
    SkeletonSequence::with_body_count(
        s.sample_id.clone(),
        s.label.clone(),
        s.d,
        s.t,
        s.v,
        vec![flat],
        s.body_count,
    )
    .map_err(|source| CanonicalError::Sequence {
        path: path.to_path_buf(),
        source,
    })
}

/// File name for a sample id; characters outside `[A-Za-z0-9._-]` become `_`.
pub fn sample_file_name(sample_id: &str) -> String {
    let stem: String = sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{stem}.json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CanonicalError + '_ {
    move |source| CanonicalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes every sample plus the manifest. Output is byte-identical for
/// identical inputs regardless of input order.
pub fn write_dataset(
    dir: &Path,
    samples: &[SkeletonSequence],
    topology: Option<&str>,
    skipped: Vec<SkippedFile>,
) -> Result<Manifest, CanonicalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut order: Vec<&SkeletonSequence> = samples.iter().collect();
    order.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut files = Vec::with_capacity(order.len());
    let mut class_counts = BTreeMap::new();
    for seq in &order {
        let name = sample_file_name(&seq.sample_id);
        if files.last() == Some(&name) || files.contains(&name) {
            return Err(CanonicalError::DuplicateId(seq.sample_id.clone()));
        }
        let path = dir.join(&name);
        fs::write(&path, to_canonical_json(seq)).map_err(io_err(&path))?;
        *class_counts
            .entry(seq.label.clone().unwrap_or_default())
            .or_insert(0) += 1;
        files.push(name);
    }
    let mut skipped = skipped;
    skipped.sort_by(|a, b| a.file.cmp(&b.file));
    let manifest = Manifest {
        sample_count: files.len(),
        class_counts,
        files,
        topology: topology.map(str::to_string),
        skipped,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CanonicalError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| CanonicalError::Json {
        path,
        message: e.to_string(),
    })
}

/// Loads every sample listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SkeletonSequence>, CanonicalError> {
    let manifest = read_manifest(dir)?;
    let mut ids = std::collections::BTreeSet::new();
    manifest
        .files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            let seq = from_canonical_json(&text, &path)?;
            if !ids.insert(seq.sample_id.clone()) {
                return Err(CanonicalError::DuplicateId(seq.sample_id));
            }
            Ok(seq)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: &str) -> SkeletonSequence {
        let body = (0..3 * 5 * 4).map(|i| (i as f64 * 0.3).sin()).collect();
        SkeletonSequence::with_body_count(id, Some(label.into()), 3, 5, 4, vec![body], 2).unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let s = sample("x", "A3");
        let back = from_canonical_json(&to_canonical_json(&s), Path::new("x.json")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let text = r#"{"sample_id":"a","label":null,"D":3,"T":1,"V":2,"coords":[[[0,0]],[[0,0]]]}"#;
        assert!(matches!(
            from_canonical_json(text, Path::new("a.json")),
            Err(CanonicalError::Shape { .. })
        ));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = std::env::temp_dir().join(format!("protoparts-canon-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let samples = vec![sample("b", "A2"), sample("a", "A1"), sample("c", "A2")];
        let m = write_dataset(&dir, &samples, Some("ntu25"), vec![]).unwrap();
        assert_eq!(m.sample_count, 3);
        assert_eq!(m.class_counts["A2"], 2);
        let first = fs::read(dir.join(MANIFEST_FILE)).unwrap();

        let loaded = load_dataset(&dir).unwrap();
        let ids: Vec<_> = loaded.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);

        let mut reversed = samples.clone();
        reversed.reverse();
        write_dataset(&dir, &reversed, Some("ntu25"), vec![]).unwrap();
        assert_eq!(fs::read(dir.join(MANIFEST_FILE)).unwrap(), first);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(sample_file_name("a/b c"), "a_b_c.json");
    }
}
