//! Dense embedding sets, labels and cosine-similarity matrices.
//!
//! Matrices are `nalgebra::DMatrix<f64>` with one embedding per row. Files may
//! carry `f32` values; everything is widened to `f64` on construction.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row norms for sets flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Rows with norm at or below this cannot be normalized.
pub const ZERO_NORM: f64 = 1e-12;
/// Slack allowed on similarity entries, symmetry and unit diagonals.
pub const SIMILARITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Unspecified,
}

/// An `n x d` matrix of embeddings, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: DMatrix<f64>,
    modality: Modality,
    normalized: bool,
}

impl EmbeddingSet {
    /// Wraps `data` as an unnormalized set.
    pub fn new(data: DMatrix<f64>, modality: Modality) -> Result<Self> {
        Self::validate_shape(&data)?;
        Ok(Self {
            data,
            modality,
            normalized: false,
        })
    }

    /// Wraps `data` whose rows are already unit length. Fails if any row is
    /// further than [`UNIT_NORM_TOL`] from 1.
    pub fn new_normalized(data: DMatrix<f64>, modality: Modality) -> Result<Self> {
        Self::validate_shape(&data)?;
        for (i, row) in data.row_iter().enumerate() {
            let norm = row.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidEmbeddings(format!(
                    "row {i} has norm {norm}, expected unit length"
                )));
            }
        }
        Ok(Self {
            data,
            modality,
            normalized: true,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], modality: Modality) -> Result<Self> {
        Self::new(rows_to_matrix(rows)?, modality)
    }

    fn validate_shape(data: &DMatrix<f64>) -> Result<()> {
        if data.nrows() < 1 {
            return Err(Error::InvalidEmbeddings("need at least one row".into()));
        }
        if data.ncols() < 2 {
            return Err(Error::InvalidEmbeddings(format!(
                "dimension must be at least 2, got {}",
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            // column-major position
            let (row, col) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidEmbeddings(format!(
                "non-finite entry at ({row}, {col})"
            )));
        }
        Ok(())
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> RowDVector<f64> {
        self.data.row(i).into_owned()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Column-wise mean of the rows.
    pub fn mean(&self) -> DVector<f64> {
        self.data.row_mean().transpose()
    }

    /// New set holding the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidEmbeddings("empty row selection".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidEmbeddings(format!(
                "row index {bad} out of range for {} rows",
                self.len()
            )));
        }
        Ok(Self {
            data: self.data.select_rows(indices),
            modality: self.modality,
            normalized: self.normalized,
        })
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::ShapeMismatch(format!(
            "ragged rows: expected length {d}, found {}",
            bad.len()
        )));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(e: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = e.data.clone();
    for (i, mut row) in data.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm <= ZERO_NORM {
            return Err(Error::ZeroRow { row: i, norm });
        }
        row /= norm;
    }
    Ok(EmbeddingSet {
        data,
        modality: e.modality,
        normalized: true,
    })
}

/// Borrowed-or-normalized view used by operations that require unit rows.
pub(crate) fn ensure_normalized(e: &EmbeddingSet) -> Result<std::borrow::Cow<'_, EmbeddingSet>> {
    if e.normalized {
        Ok(std::borrow::Cow::Borrowed(e))
    } else {
        Ok(std::borrow::Cow::Owned(normalize_rows(e)?))
    }
}

/// Integer class labels, contiguous from 0, one per embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddingSet {
    embeddings: EmbeddingSet,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledEmbeddingSet {
    pub fn new(embeddings: EmbeddingSet, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != embeddings.len() {
            return Err(Error::InvalidLabels(format!(
                "{} labels for {} rows",
                labels.len(),
                embeddings.len()
            )));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n_classes];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidLabels(format!(
                "class ids must be contiguous; class {missing} has no rows"
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            n_classes,
        })
    }

    pub fn embeddings(&self) -> &EmbeddingSet {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    /// Row indices grouped by class id.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            members[l].push(i);
        }
        members
    }

    /// Subset with the given rows. Labels keep their ids, so every class must
    /// still be represented.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let embeddings = self.embeddings.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(embeddings, labels)
    }

    pub fn with_embeddings(&self, embeddings: EmbeddingSet) -> Result<Self> {
        Self::new(embeddings, self.labels.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Inter,
    Intra,
}

/// Dense matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    data: DMatrix<f64>,
    kind: SimilarityKind,
}

impl SimilarityMatrix {
    /// Validates the entry range, and for square intra-modal matrices the
    /// symmetry and unit diagonal.
    pub fn new(data: DMatrix<f64>, kind: SimilarityKind) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidSimilarity("empty matrix".into()));
        }
        for (pos, &v) in data.iter().enumerate() {
            if !v.is_finite() || v.abs() > 1.0 + SIMILARITY_TOL {
                let (i, j) = (pos % data.nrows(), pos / data.nrows());
                return Err(Error::InvalidSimilarity(format!(
                    "entry ({i}, {j}) = {v} outside [-1, 1]"
                )));
            }
        }
        if kind == SimilarityKind::Intra && data.is_square() {
            let n = data.nrows();
            for i in 0..n {
                if (data[(i, i)] - 1.0).abs() > SIMILARITY_TOL {
                    return Err(Error::InvalidSimilarity(format!(
                        "diagonal entry {i} = {} is not 1",
                        data[(i, i)]
                    )));
                }
                for j in (i + 1)..n {
                    if (data[(i, j)] - data[(j, i)]).abs() > SIMILARITY_TOL {
                        return Err(Error::InvalidSimilarity(format!(
                            "not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        Ok(Self { data, kind })
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: SimilarityKind) -> Result<Self> {
        Self::new(rows_to_matrix(rows)?, kind)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// Rows at `indices`, as an inter-modal matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.nrows()) {
            return Err(Error::ShapeMismatch(format!(
                "row index {bad} out of range for {} rows",
                self.nrows()
            )));
        }
        Self::new(self.data.select_rows(indices), SimilarityKind::Inter)
    }

    pub fn max_abs_diff(&self, other: &SimilarityMatrix) -> Result<f64> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        Ok((&self.data - &other.data).amax())
    }
}

/// Pairwise cosine similarities between the rows of `a` and `b`.
///
/// Unnormalized inputs are normalized on a copy first. The result is
/// intra-modal when both arguments hold the same rows with the same modality.
pub fn cosine_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let a_n = ensure_normalized(a)?;
    let b_n = ensure_normalized(b)?;
    let mut data = a_n.data() * b_n.data().transpose();
    let same = a.modality == b.modality && a.data == b.data;
    let kind = if same {
        // The product is symmetric up to rounding; make it exact.
        let n = data.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (data[(i, j)] + data[(j, i)]);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        SimilarityKind::Intra
    } else {
        SimilarityKind::Inter
    };
    SimilarityMatrix::new(data, kind)
}
