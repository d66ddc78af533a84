//! Embedding and label files, metric reports, and atomic output staging.
//!
//! # Embedding file format
//!
//! One UTF-8 JSON header line terminated by `\n`, then the raw row-major
//! little-endian payload:
//!
//! ```text
//! {"version":1,"count":2,"dim":2,"dtype":"f32le","modality":"image","normalized":true}\n
//! <count * dim * 4 bytes>
//! ```
//!
//! `dtype` is `f32le` or `f64le`, `modality` one of `image`, `text`,
//! `unspecified`. The payload length must match `count * dim * size` exactly.
//! Files written from NumPy need nothing more than
//! `f.write(header + b"\n"); f.write(arr.astype("<f4").tobytes())`; see
//! `crates/python/python/convert_npy.py`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{EmbeddingSet, Modality, ZERO_NORM};

pub const FORMAT_VERSION: u32 = 1;
/// Normalized-flagged rows further than this from unit length are rejected.
pub const INGEST_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
    F64le,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::F64le => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFileHeader {
    pub version: u32,
    pub count: usize,
    pub dim: usize,
    pub dtype: Dtype,
    pub modality: Modality,
    pub normalized: bool,
}

impl EmbeddingFileHeader {
    pub fn payload_len(&self) -> Option<usize> {
        self.count.checked_mul(self.dim)?.checked_mul(self.dtype.size())
    }
}

/// Serializes a matrix with the given header fields.
pub fn encode_matrix(data: &DMatrix<f64>, dtype: Dtype, modality: Modality, normalized: bool) -> Result<Vec<u8>> {
    let header = EmbeddingFileHeader {
        version: FORMAT_VERSION,
        count: data.nrows(),
        dim: data.ncols(),
        dtype,
        modality,
        normalized,
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;
    out.push(b'\n');
    out.reserve(data.len() * dtype.size());
    for row in data.row_iter() {
        for &v in row.iter() {
            match dtype {
                Dtype::F32le => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64le => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn encode_embeddings(e: &EmbeddingSet, dtype: Dtype) -> Result<Vec<u8>> {
    encode_matrix(e.data(), dtype, e.modality(), e.is_normalized())
}

/// Parses header and payload without any normalization semantics.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<(EmbeddingFileHeader, DMatrix<f64>)> {
    let bad = |reason: String| Error::BadHeader {
        path: path.to_path_buf(),
        reason,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("no header line".into()))?;
    let header_text = std::str::from_utf8(&bytes[..newline]).map_err(|e| bad(e.to_string()))?;
    let header: EmbeddingFileHeader = serde_json::from_str(header_text).map_err(|e| bad(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    if header.count == 0 || header.dim == 0 {
        return Err(bad("count and dim must be positive".into()));
    }
    let expected = header.payload_len().ok_or_else(|| bad("payload size overflows".into()))?;
    let payload = &bytes[newline + 1..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::TrailingPayload {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let size = header.dtype.size();
    let mut data = DMatrix::zeros(header.count, header.dim);
    for (k, chunk) in payload.chunks_exact(size).enumerate() {
        let v = match header.dtype {
            Dtype::F32le => f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes"))),
            Dtype::F64le => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
        };
        let (row, col) = (k / header.dim, k % header.dim);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.to_path_buf(),
                row,
                col,
            });
        }
        data[(row, col)] = v;
    }
    Ok((header, data))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<(EmbeddingFileHeader, DMatrix<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

/// Applies the ingestion rules to a decoded embedding matrix: rows of a file
/// flagged normalized must be within [`INGEST_NORM_TOL`] of unit length
/// (rows off by more than `1e-6` are rescaled); unflagged files are
/// normalized with a warning.
pub fn embeddings_from_decoded(header: &EmbeddingFileHeader, mut data: DMatrix<f64>, path: &Path) -> Result<EmbeddingSet> {
    if header.normalized {
        for (row, mut r) in data.row_iter_mut().enumerate() {
            let norm = r.norm();
            let dev = (norm - 1.0).abs();
            if dev > INGEST_NORM_TOL {
                return Err(Error::NotNormalized {
                    path: path.to_path_buf(),
                    row,
                    norm,
                });
            }
            if dev > crate::geometry::UNIT_NORM_TOL {
                r /= norm;
            }
        }
        EmbeddingSet::new_normalized(data, header.modality)
    } else {
        if let Some((row, norm)) = data
            .row_iter()
            .map(|r| r.norm())
            .enumerate()
            .find(|(_, n)| *n <= ZERO_NORM)
        {
            return Err(Error::ZeroRow { row, norm });
        }
        log::warn!("{} is not flagged as normalized; normalizing rows", path.display());
        crate::geometry::normalize_rows(&EmbeddingSet::new(data, header.modality)?)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let (header, data) = load_matrix(path)?;
    embeddings_from_decoded(&header, data, path)
}

pub fn save_embeddings(path: impl AsRef<Path>, e: &EmbeddingSet, dtype: Dtype) -> Result<()> {
    write_atomic(path.as_ref(), &encode_embeddings(e, dtype)?)
}

pub fn save_matrix(path: impl AsRef<Path>, data: &DMatrix<f64>, dtype: Dtype) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(data, dtype, Modality::Unspecified, false)?)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Dense class ids and the mapping from the original labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFile {
    pub ids: Vec<usize>,
    /// Original label to dense id; ids follow ascending original labels.
    pub id_map: BTreeMap<i64, usize>,
}

impl LabelFile {
    pub fn id_map_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(["label", "id"]).map_err(ser)?;
        for (label, id) in &self.id_map {
            w.write_record(&[label.to_string(), id.to_string()]).map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct LabelRecord {
    index: usize,
    label: i64,
}

pub fn parse_labels(text: &str) -> Result<LabelFile> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::BadLabels(e.to_string()))?;
    if headers.len() != 2 || &headers[0] != "index" || &headers[1] != "label" {
        return Err(Error::BadLabels(format!(
            "expected header `index,label`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut by_index: BTreeMap<usize, i64> = BTreeMap::new();
    for record in reader.deserialize::<LabelRecord>() {
        let r = record.map_err(|e| Error::BadLabels(e.to_string()))?;
        if by_index.insert(r.index, r.label).is_some() {
            return Err(Error::DuplicateIndex(r.index));
        }
    }
    let n = match by_index.keys().next_back() {
        Some(&max) => max + 1,
        None => return Err(Error::BadLabels("no rows".into())),
    };
    if let Some(missing) = (0..n).find(|i| !by_index.contains_key(i)) {
        return Err(Error::MissingIndex(missing));
    }
    let mut id_map = BTreeMap::new();
    for &label in by_index.values() {
        id_map.insert(label, 0);
    }
    for (id, v) in id_map.values_mut().enumerate() {
        *v = id;
    }
    let ids = by_index.values().map(|l| id_map[l]).collect();
    Ok(LabelFile { ids, id_map })
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

/// `index,label` CSV for dense labels.
pub fn labels_csv(labels: &[usize]) -> String {
    let mut out = String::from("index,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// JSON record of one CLI run. Contains no timestamps, so identical inputs,
/// flags and seed reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    pub inputs: BTreeMap<String, InputDigest>,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query_ap: Option<Vec<f64>>,
    pub artifacts: Vec<String>,
    /// SHA-256 of the report serialized with this field empty.
    #[serde(default)]
    pub digest: String,
}

impl MetricReport {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.parameters.insert(key.to_string(), v);
        self
    }

    pub fn metric(&mut self, key: &str, value: f64) -> &mut Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<&mut Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(
            role.to_string(),
            InputDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(self)
    }

    pub fn compute_digest(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.digest = String::new();
        let bytes = serde_json::to_vec(&copy).map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(sha256_hex(&bytes))
    }

    /// Checks that all metrics are finite and fills in the digest.
    pub fn finalize(&mut self) -> Result<()> {
        if let Some((k, v)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Serialization(format!("metric {k} is not finite ({v})")));
        }
        if let Some(ap) = &self.per_query_ap {
            if ap.iter().any(|v| !v.is_finite()) {
                return Err(Error::Serialization("per-query AP is not finite".into()));
            }
        }
        self.digest = self.compute_digest()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Collects output files in memory and writes them all-or-nothing.
#[derive(Debug)]
pub struct OutputStage {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl OutputStage {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Writes every file to a temporary name first, then renames them into
    /// place. On any failure, files already renamed are removed again.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut temps = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
            tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
            temps.push((self.dir.join(name), tmp));
        }
        let mut written: Vec<PathBuf> = Vec::with_capacity(temps.len());
        for (target, tmp) in temps {
            if let Err(e) = tmp.persist(&target) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                return Err(Error::io(&target, e.error));
            }
            written.push(target);
        }
        Ok(written)
    }
}
