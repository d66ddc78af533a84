//! Recovery of image-image similarities from image-text similarities.
//!
//! Two routes are provided:
//!
//! * **Anchor-based.** Given `d` text rows with known coordinates, the image
//!   embeddings solve `X_T[J] · X_Iᵀ = S_inter[J]`, and `S_intra = X_I X_Iᵀ`.
//! * **Anchor-free.** `S_inter` has rank `d`, so its right singular vectors
//!   `V` (`n_I x d`) span the column space of `X_I`, i.e. `X_I = V C` for some
//!   `d x d` matrix `C`. With `M = C Cᵀ`, unit-norm image rows give one linear
//!   equation `v_iᵀ M v_i = 1` per image in the `d(d+1)/2` free entries of
//!   the symmetric `M`. For `n_I > d(d+1)/2` that system is overdetermined
//!   and its least-squares solution fixes `S_intra = V M Vᵀ` uniquely.
//!
//! Both routes finish by rescaling the result to an exact unit diagonal,
//! which is a no-op for exact inputs and absorbs rounding for `f32` data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{
    ensure_normalized, EmbeddingSet, Modality, SimilarityKind, SimilarityMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryConfig {
    /// Singular value `k` counts towards the rank when `σ_k > rank_tol · σ_1`.
    pub rank_tol: f64,
    /// Largest accepted condition number of the anchor matrix.
    pub condition_cap: f64,
    /// Eigenvalues of `M` in `[-psd_tol, 0)` are clamped to zero; anything
    /// more negative is an error.
    pub psd_tol: f64,
    /// Largest accepted root-mean-square residual of the unit-diagonal system.
    pub residual_tol: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            rank_tol: 1e-8,
            condition_cap: 1e8,
            psd_tol: 1e-8,
            residual_tol: 1e-4,
        }
    }
}

/// `d` distinct text-row indices whose embeddings form a well-conditioned
/// basis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSelection {
    indices: Vec<usize>,
}

impl AnchorSelection {
    /// Validates explicit indices against `text`.
    pub fn new(indices: Vec<usize>, text: &EmbeddingSet, cfg: &RecoveryConfig) -> Result<Self> {
        let d = text.dim();
        if indices.len() != d {
            return Err(Error::InvalidAnchors(format!(
                "need exactly d = {d} anchors, got {}",
                indices.len()
            )));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidAnchors("anchor indices must be distinct".into()));
        }
        if let Some(&bad) = sorted.iter().find(|&&i| i >= text.len()) {
            return Err(Error::InvalidAnchors(format!(
                "anchor index {bad} out of range for {} text rows",
                text.len()
            )));
        }
        let basis = ensure_normalized(text)?.data().select_rows(&indices);
        check_conditioning(&basis, cfg.condition_cap)?;
        Ok(Self { indices })
    }

    /// Greedy pivoted Gram-Schmidt over the text rows: each step takes the row
    /// with the largest component orthogonal to the rows already chosen
    /// (ties to the lowest index).
    pub fn greedy(text: &EmbeddingSet, cfg: &RecoveryConfig) -> Result<Self> {
        let d = text.dim();
        if text.len() < d {
            return Err(Error::InvalidAnchors(format!(
                "need at least d = {d} text rows, got {}",
                text.len()
            )));
        }
        let mut residual = ensure_normalized(text)?.data().clone();
        let mut chosen = Vec::with_capacity(d);
        let mut taken = vec![false; text.len()];
        for _ in 0..d {
            let mut best = None;
            let mut best_norm = -1.0;
            for (i, row) in residual.row_iter().enumerate() {
                let norm = row.norm();
                if !taken[i] && norm > best_norm {
                    best = Some(i);
                    best_norm = norm;
                }
            }
            let pivot = best.expect("at least d rows");
            if best_norm <= 1e-12 {
                return Err(Error::SingularAnchors {
                    condition: f64::INFINITY,
                });
            }
            taken[pivot] = true;
            chosen.push(pivot);
            let q = residual.row(pivot).transpose() / best_norm;
            let coeffs = &residual * &q;
            residual -= coeffs * q.transpose();
        }
        Self::new(chosen, text, cfg)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

fn check_conditioning(basis: &DMatrix<f64>, cap: f64) -> Result<f64> {
    let sv = basis.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= cap) {
        return Err(Error::SingularAnchors { condition });
    }
    Ok(condition)
}

/// Solves `anchors · X_Iᵀ = s_inter_rows` for the image embeddings.
///
/// `anchors` is the `d x d` block of text embeddings and `s_inter_rows` the
/// matching `d x n_I` rows of the inter-modal similarity matrix. Returned rows
/// are rescaled to exact unit length.
pub fn recover_image_embeddings(
    s_inter_rows: &SimilarityMatrix,
    anchors: &EmbeddingSet,
    cfg: &RecoveryConfig,
) -> Result<EmbeddingSet> {
    let d = anchors.dim();
    if anchors.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "anchor block must be square, got {} x {d}",
            anchors.len()
        )));
    }
    if s_inter_rows.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: s_inter_rows.nrows(),
        });
    }
    let basis = ensure_normalized(anchors)?.data().clone();
    check_conditioning(&basis, cfg.condition_cap)?;
    let lu = basis.lu();
    let images_t = lu
        .solve(s_inter_rows.data())
        .ok_or(Error::SingularAnchors {
            condition: f64::INFINITY,
        })?;
    let images = EmbeddingSet::new(images_t.transpose(), Modality::Image)?;
    crate::geometry::normalize_rows(&images)
}

/// Anchor-based recovery of the `n_I x n_I` image-image similarity matrix.
pub fn recover_intra_anchor(
    s_inter: &SimilarityMatrix,
    text: &EmbeddingSet,
    anchors: &AnchorSelection,
    cfg: &RecoveryConfig,
) -> Result<SimilarityMatrix> {
    if text.len() != s_inter.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} text rows but similarity matrix has {} rows",
            text.len(),
            s_inter.nrows()
        )));
    }
    if anchors.indices.len() != text.dim() {
        return Err(Error::InvalidAnchors(format!(
            "selection has {} anchors for dimension {}",
            anchors.indices.len(),
            text.dim()
        )));
    }
    let rows = s_inter.select_rows(&anchors.indices)?;
    let basis = text.select_rows(&anchors.indices)?;
    let images = recover_image_embeddings(&rows, &basis, cfg)?;
    let gram = images.data() * images.data().transpose();
    unit_diagonal_similarity(gram)
}

/// Result of the anchor-free factorization `S_intra = V M Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFactorization {
    /// `n_I x d`, orthonormal columns: leading right singular vectors of
    /// `S_inter`.
    pub v: DMatrix<f64>,
    /// `d x d` symmetric positive semidefinite.
    pub m: DMatrix<f64>,
    /// Euclidean norm of `A x - 1` for the unit-diagonal system.
    pub residual: f64,
    /// Singular values of `S_inter`, descending.
    pub singular_values: Vec<f64>,
}

impl GramFactorization {
    pub fn rank(&self) -> usize {
        self.m.nrows()
    }

    /// `diag(V M Vᵀ)`.
    pub fn diagonal(&self) -> DVector<f64> {
        let vm = &self.v * &self.m;
        DVector::from_fn(self.v.nrows(), |i, _| vm.row(i).dot(&self.v.row(i)))
    }
}

/// Number of free entries of a symmetric `d x d` matrix.
pub fn symmetric_unknowns(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Row `i` holds the coefficients of `v_iᵀ M v_i` in the upper-triangular
/// entries `M_jk`, `j <= k`, taken row by row. Off-diagonal coefficients are
/// doubled since `M_jk = M_kj`.
pub fn unit_diagonal_system(v: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = v.shape();
    let mut a = DMatrix::zeros(n, symmetric_unknowns(d));
    for i in 0..n {
        let mut col = 0;
        for j in 0..d {
            let vj = v[(i, j)];
            a[(i, col)] = vj * vj;
            col += 1;
            for k in (j + 1)..d {
                a[(i, col)] = 2.0 * vj * v[(i, k)];
                col += 1;
            }
        }
    }
    a
}

/// Inverse of the upper-triangular packing used by [`unit_diagonal_system`].
pub fn unpack_symmetric(x: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut col = 0;
    for j in 0..d {
        for k in j..d {
            m[(j, k)] = x[col];
            m[(k, j)] = x[col];
            col += 1;
        }
    }
    m
}

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub(crate) fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON;
    svd.solve(b, eps)
        .map_err(|e| Error::InfeasibleDiagonal(format!("least-squares solve failed: {e}")))
}

fn repair_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    if min < -tol {
        return Err(Error::InfeasibleDiagonal(format!(
            "recovered M has eigenvalue {min:e}, not positive semidefinite"
        )));
    }
    if min >= 0.0 {
        return Ok(m.clone());
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// Rescales a Gram matrix to unit diagonal, `D^{-1/2} G D^{-1/2}`, and clamps
/// rounding excursions into `[-1, 1]`.
fn unit_diagonal_similarity(mut gram: DMatrix<f64>) -> Result<SimilarityMatrix> {
    let n = gram.nrows();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let g = gram[(i, i)];
            if g > 0.0 {
                Ok(1.0 / g.sqrt())
            } else {
                Err(Error::InfeasibleDiagonal(format!(
                    "recovered self-similarity {i} is {g:e}"
                )))
            }
        })
        .collect::<Result<_>>()?;
    for i in 0..n {
        gram[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let v = (0.5 * (gram[(i, j)] + gram[(j, i)]) * scale[i] * scale[j]).clamp(-1.0, 1.0);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    SimilarityMatrix::new(gram, SimilarityKind::Intra)
}

/// Numerical rank: singular values above `tol · σ_1`.
pub fn numerical_rank(singular_values: &[f64], tol: f64) -> usize {
    match singular_values.first() {
        Some(&s1) if s1 > 0.0 => singular_values.iter().filter(|&&s| s > tol * s1).count(),
        _ => 0,
    }
}

/// Anchor-free recovery of `S_intra` from `S_inter` alone, given the
/// embedding dimension `d`.
pub fn recover_intra_anchorfree(
    s_inter: &SimilarityMatrix,
    d: usize,
    cfg: &RecoveryConfig,
) -> Result<(SimilarityMatrix, GramFactorization)> {
    if d == 0 {
        return Err(Error::InvalidParameter("rank must be positive".into()));
    }
    let n_images = s_inter.ncols();
    if d > n_images.min(s_inter.nrows()) {
        return Err(Error::RankDeficient {
            requested: d,
            found: n_images.min(s_inter.nrows()),
        });
    }
    let svd = s_inter.data().clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();

    let rank = numerical_rank(&singular_values, cfg.rank_tol);
    if rank < d {
        return Err(Error::RankDeficient {
            requested: d,
            found: rank,
        });
    }
    if rank > d {
        return Err(Error::RankExcess {
            requested: d,
            found: rank,
        });
    }

    let v = DMatrix::from_fn(n_images, d, |i, k| v_t[(order[k], i)]);
    let a = unit_diagonal_system(&v);
    let b = DVector::from_element(n_images, 1.0);
    let x = least_squares(&a, &b)?;
    let residual = (&a * &x - &b).norm();
    let rms = residual / (n_images as f64).sqrt();
    if !(rms <= cfg.residual_tol) {
        return Err(Error::InfeasibleDiagonal(format!(
            "unit-diagonal residual rms {rms:e} exceeds {:e}",
            cfg.residual_tol
        )));
    }
    let m = repair_psd(&unpack_symmetric(&x, d), cfg.psd_tol)?;
    let gram = &v * &m * v.transpose();
    let s_intra = unit_diagonal_similarity(gram)?;
    Ok((
        s_intra,
        GramFactorization {
            v,
            m,
            residual,
            singular_values,
        },
    ))
}
