//! Class-axis projection of image embeddings.
//!
//! A basis `B` is fitted by PCA on text embeddings of class-name prompts. An
//! embedding `x` is projected as `B · diag(keep) · Bᵀ · x`: rotate into the
//! principal axes, zero the discarded components, rotate back. The optional
//! mean adjustment adds `B · diag(1 - keep) · Bᵀ · μ`, the part of the image
//! mean that the projection removed. It is a constant translation and leaves
//! pairwise distances untouched.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{cosine_matrix, normalize_rows, EmbeddingSet, SimilarityMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalProjector {
    basis: DMatrix<f64>,
    keep: Vec<bool>,
    mean: DVector<f64>,
    eigenvalues: Vec<f64>,
}

/// `floor(d / 2)`, at least 1.
pub fn default_keep_count(d: usize) -> usize {
    (d / 2).max(1)
}

/// Number of kept components for a fraction of the dimension, clamped to
/// `[1, d]`.
pub fn keep_count_from_fraction(d: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "keep fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(((fraction * d as f64).floor() as usize).clamp(1, d))
}

impl PrincipalProjector {
    /// Builds a projector from parts. `basis` columns must be orthonormal and
    /// `eigenvalues` non-increasing.
    pub fn new(basis: DMatrix<f64>, keep: Vec<bool>, mean: DVector<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        let d = basis.nrows();
        if !basis.is_square() || keep.len() != d || mean.len() != d || eigenvalues.len() != d {
            return Err(Error::InvalidProjector(format!(
                "inconsistent sizes: basis {:?}, keep {}, mean {}, eigenvalues {}",
                basis.shape(),
                keep.len(),
                mean.len(),
                eigenvalues.len()
            )));
        }
        let gram_err = (basis.transpose() * &basis - DMatrix::identity(d, d)).amax();
        if gram_err > 1e-10 {
            return Err(Error::InvalidProjector(format!(
                "basis is not orthogonal (max |BᵀB - I| = {gram_err:e})"
            )));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) || eigenvalues.iter().any(|&l| l < -1e-10) {
            return Err(Error::InvalidProjector(
                "eigenvalues must be non-increasing and non-negative".into(),
            ));
        }
        Ok(Self {
            basis,
            keep,
            mean,
            eigenvalues,
        })
    }

    /// Axis-aligned projector (`B = I`) with the given mask.
    pub fn axis_aligned(keep: Vec<bool>) -> Result<Self> {
        let d = keep.len();
        Self::new(DMatrix::identity(d, d), keep, DVector::zeros(d), vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Eigenvectors as columns, sorted by descending eigenvalue.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn keep_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Mean of the rows the basis was fitted on.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Fraction of fitted variance captured by the kept components.
    pub fn explained_variance(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let kept: f64 = self
            .eigenvalues
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(l, _)| l)
            .sum();
        kept / total
    }

    /// Same basis with a different mask of the leading `keep_count` axes.
    pub fn with_keep_count(&self, keep_count: usize) -> Result<Self> {
        let d = self.dim();
        if keep_count == 0 || keep_count > d {
            return Err(Error::InvalidParameter(format!(
                "keep_count must be in [1, {d}], got {keep_count}"
            )));
        }
        let mut p = self.clone();
        p.keep = (0..d).map(|i| i < keep_count).collect();
        Ok(p)
    }

    /// `B · diag(mask) · Bᵀ` for the kept (or, with `kept = false`, the
    /// discarded) components.
    fn operator(&self, kept: bool) -> DMatrix<f64> {
        let d = self.dim();
        if self.keep.iter().all(|&k| k == kept) {
            return DMatrix::identity(d, d);
        }
        if self.keep.iter().all(|&k| k != kept) {
            return DMatrix::zeros(d, d);
        }
        let mut scaled = self.basis.clone();
        for j in 0..d {
            if self.keep[j] != kept {
                scaled.column_mut(j).fill(0.0);
            }
        }
        scaled * self.basis.transpose()
    }
}

/// PCA of the class-name text embeddings; the leading `keep_count` axes are
/// kept. Covariance uses the `1 / (n - 1)` convention.
pub fn fit_class_axes(class_text: &EmbeddingSet, keep_count: usize) -> Result<PrincipalProjector> {
    let n = class_text.len();
    let d = class_text.dim();
    if n < 2 {
        return Err(Error::TooFewRows(n));
    }
    if keep_count == 0 || keep_count > d {
        return Err(Error::InvalidParameter(format!(
            "keep_count must be in [1, {d}], got {keep_count}"
        )));
    }
    if !class_text.is_normalized() {
        return Err(Error::InvalidEmbeddings(
            "class-name embeddings must be normalized".into(),
        ));
    }
    let mean = class_text.mean();
    let mut centered = class_text.data().clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(d, d);
    let mut eigenvalues = Vec::with_capacity(d);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // Sign convention: largest-magnitude entry positive.
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col = -col;
        }
        basis.set_column(dst, &col);
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }
    let keep = (0..d).map(|i| i < keep_count).collect();
    PrincipalProjector::new(basis, keep, mean, eigenvalues)
}

/// Projects every row of `x`. With `mean_adjust`, the discarded part of the
/// mean of `x` is added back before the optional renormalization.
pub fn project(x: &EmbeddingSet, p: &PrincipalProjector, mean_adjust: bool, renormalize: bool) -> Result<EmbeddingSet> {
    let offset = mean_adjust.then(|| x.mean());
    project_with_offset_mean(x, p, offset.as_ref(), renormalize)
}

/// Like [`project`], with an explicit mean for the adjustment (`None` skips
/// it).
pub fn project_with_offset_mean(
    x: &EmbeddingSet,
    p: &PrincipalProjector,
    mean: Option<&DVector<f64>>,
    renormalize: bool,
) -> Result<EmbeddingSet> {
    if x.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: x.dim(),
        });
    }
    let mut data = x.data() * p.operator(true);
    if let Some(mu) = mean {
        if mu.len() != p.dim() {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                found: mu.len(),
            });
        }
        let delta = (p.operator(false) * mu).transpose();
        for mut row in data.row_iter_mut() {
            row += &delta;
        }
    }
    let projected = EmbeddingSet::new(data, x.modality())?;
    if renormalize {
        normalize_rows(&projected)
    } else {
        Ok(projected)
    }
}

/// Cosine similarities measured inside the kept subspace: both sets are
/// projected without mean adjustment and renormalized.
pub fn projected_similarity(a: &EmbeddingSet, b: &EmbeddingSet, p: &PrincipalProjector) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let pa = project(a, p, false, true)?;
    if a == b {
        return cosine_matrix(&pa, &pa);
    }
    let pb = project(b, p, false, true)?;
    cosine_matrix(&pa, &pb)
}
