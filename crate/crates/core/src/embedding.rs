//! Labeled feature embeddings and their on-disk format.
//!
//! A cache is a JSON manifest next to a headerless blob of little-endian
//! `f32` values stored row-major:
//!
//! ```json
//! { "version": 1, "dtype": "f32le", "dim": 640, "count": 12000,
//!   "blob": "features.f32", "labels": [0, 0, 1, ...],
//!   "class_names": ["n01532829", ...], "ids": ["img_0001.jpg", ...] }
//! ```
//!
//! Values are widened to `f64` on load; all downstream math is double precision.
//! Small fixtures may instead be written as CSV with header `id,label,f0,...`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const DTYPE_F32LE: &str = "f32le";
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "features.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub dim: usize,
    pub count: usize,
    pub blob: String,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
}

/// Immutable, validated set of labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
    ids: Option<Vec<String>>,
}

impl EmbeddingSet {
    /// Validates and wraps a feature matrix (one row per sample).
    ///
    /// The class count is `class_names.len()` when names are given, otherwise
    /// one past the largest label.
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let count = features.nrows();
        if count == 0 {
            return Err(Error::InvalidParameter(
                "embedding set must contain at least one row".into(),
            ));
        }
        if labels.len() != count {
            return Err(Error::Shape(format!(
                "{} labels for {} feature rows",
                labels.len(),
                count
            )));
        }
        let num_classes = match &class_names {
            Some(names) => names.len(),
            None => labels.iter().max().map_or(0, |&m| m + 1),
        };
        let mut members = vec![0usize; num_classes];
        for (row, &label) in labels.iter().enumerate() {
            if label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    classes: num_classes,
                });
            }
            members[label] += 1;
        }
        if let Some(class) = members.iter().position(|&m| m == 0) {
            return Err(Error::EmptyClass { class });
        }
        for row in 0..count {
            for col in 0..features.ncols() {
                let value = features[(row, col)];
                if !value.is_finite() {
                    return Err(Error::NonFinite { row, col, value });
                }
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            class_names,
            ids: None,
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.count() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                self.count()
            )));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    /// Row indices grouped by class.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (row, &label) in self.labels.iter().enumerate() {
            out[label].push(row);
        }
        out
    }

    /// Copies the given rows into a new `rows.len() x dim` matrix.
    pub fn gather(&self, rows: &[usize]) -> DMatrix<f64> {
        gather_rows(&self.features, rows)
    }

    /// Rescales every row to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Self> {
        let mut features = self.features.clone();
        for (row, mut r) in features.row_iter_mut().enumerate() {
            let norm = r.norm();
            if norm == 0.0 {
                return Err(Error::ZeroNorm { row });
            }
            r /= norm;
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }
}

pub(crate) fn gather_rows(matrix: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), matrix.ncols(), |i, j| matrix[(rows[i], j)])
}

/// Loads a manifest-described cache, or a CSV fixture when the path ends in `.csv`.
pub fn load(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_csv(path),
        _ => load_embeddings(path),
    }
}

pub fn read_manifest(manifest_path: impl AsRef<Path>) -> Result<Manifest> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let bad = |message: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message,
    };
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != DTYPE_F32LE {
        return Err(bad(format!("unsupported dtype '{}'", manifest.dtype)));
    }
    if manifest.labels.len() != manifest.count {
        return Err(bad(format!(
            "{} labels but count is {}",
            manifest.labels.len(),
            manifest.count
        )));
    }
    if let Some(ids) = &manifest.ids {
        if ids.len() != manifest.count {
            return Err(bad(format!(
                "{} ids but count is {}",
                ids.len(),
                manifest.count
            )));
        }
    }
    Ok(manifest)
}

pub fn blob_path(manifest_path: &Path, manifest: &Manifest) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob)
}

pub fn load_embeddings(manifest_path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let blob = blob_path(manifest_path, &manifest);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let expected = (manifest.count * manifest.dim * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::BlobSize {
            path: blob,
            actual: bytes.len() as u64,
            expected,
            count: manifest.count,
            dim: manifest.dim,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let features = DMatrix::from_row_slice(manifest.count, manifest.dim, &values);
    let set = EmbeddingSet::new(features, manifest.labels, manifest.class_names)?;
    match manifest.ids {
        Some(ids) => set.with_ids(ids),
        None => Ok(set),
    }
}

/// Writes `manifest.json` and `features.f32` into `dir`, narrowing values to `f32`.
pub fn save_embeddings(set: &EmbeddingSet, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(set.count() * set.dim() * 4);
    for (row, r) in set.features.row_iter().enumerate() {
        for (col, &v) in r.iter().enumerate() {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                return Err(Error::NonFinite { row, col, value: v });
            }
            bytes.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    let blob = dir.join(BLOB_FILE);
    fs::write(&blob, &bytes).map_err(|e| Error::io(&blob, e))?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dtype: DTYPE_F32LE.to_string(),
        dim: set.dim(),
        count: set.count(),
        blob: BLOB_FILE.to_string(),
        labels: set.labels.clone(),
        class_names: set.class_names.clone(),
        ids: set.ids.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a CSV fixture with header `id,label,f0,...,f{d-1}`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            message: "expected header 'id,label,f0,...'".into(),
        });
    }
    let dim = headers.len() - 2;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse_err = |what: &str| Error::Manifest {
            path: path.to_path_buf(),
            message: format!("row {row}: cannot parse {what}"),
        };
        ids.push(record[0].to_string());
        labels.push(
            record[1]
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err("label"))?,
        );
        for col in 0..dim {
            let v = record[col + 2]
                .trim()
                .parse::<f64>()
                .map_err(|_| parse_err(&format!("f{col}")))?;
            values.push(v);
        }
    }
    let features = DMatrix::from_row_slice(labels.len(), dim, &values);
    EmbeddingSet::new(features, labels, None)?.with_ids(ids)
}
