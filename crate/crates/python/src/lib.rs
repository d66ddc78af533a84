//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use embspace_core::geometry::{self, SimilarityKind, SimilarityMatrix};
use embspace_core::io::{self as eio, Dtype};
use embspace_core::projection::{self, default_keep_count, PrincipalProjector};
use embspace_core::recovery::{self, AnchorSelection, RecoveryConfig};
use embspace_core::synthetic::{self, ConeSpec};
use embspace_core::tasks::{self, ClassifierKind, FewShotMethod, LinearClassifier};
use embspace_core::{EmbeddingSet, LabeledEmbeddingSet, Modality};
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

pyo3::create_exception!(embspace, EmbspaceError, PyValueError, "Raised for any failed embspace operation.");

fn to_py(e: embspace_core::Error) -> PyErr {
    EmbspaceError::new_err(format!("{}: {e}", e.code()))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_modality(s: &str) -> PyResult<Modality> {
    match s {
        "image" => Ok(Modality::Image),
        "text" => Ok(Modality::Text),
        "unspecified" => Ok(Modality::Unspecified),
        _ => Err(PyValueError::new_err(format!("unknown modality {s:?}"))),
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Image => "image",
        Modality::Text => "text",
        Modality::Unspecified => "unspecified",
    }
}

fn labeled(e: &Embeddings, labels: Vec<usize>) -> PyResult<LabeledEmbeddingSet> {
    LabeledEmbeddingSet::new(e.inner.clone(), labels).map_err(to_py)
}

/// A set of embedding rows, optionally normalized to unit length.
#[pyclass(name = "EmbeddingSet", module = "embspace", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Embeddings {
    inner: EmbeddingSet,
}

#[pymethods]
impl Embeddings {
    #[new]
    #[pyo3(signature = (rows, modality = "unspecified", normalize = true))]
    fn new(rows: Vec<Vec<f64>>, modality: &str, normalize: bool) -> PyResult<Self> {
        let e = EmbeddingSet::from_rows(&rows, parse_modality(modality)?).map_err(to_py)?;
        let inner = if normalize { geometry::normalize_rows(&e).map_err(to_py)? } else { e };
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "EmbeddingSet(n={}, dim={}, modality={}, normalized={})",
            self.inner.len(),
            self.inner.dim(),
            modality_name(self.inner.modality()),
            self.inner.is_normalized()
        )
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn modality(&self) -> &'static str {
        modality_name(self.inner.modality())
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.is_normalized()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.to_rows()
    }

    fn mean(&self) -> Vec<f64> {
        self.inner.mean().iter().copied().collect()
    }

    fn select(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.select_rows(&indices).map_err(to_py)? })
    }
}

#[pyfunction]
fn cosine_matrix(a: &Embeddings, b: &Embeddings) -> PyResult<Vec<Vec<f64>>> {
    Ok(geometry::cosine_matrix(&a.inner, &b.inner).map_err(to_py)?.to_rows())
}

/// Anchor-based recovery of the image-image similarity matrix. Anchors are
/// chosen greedily when not given.
#[pyfunction]
#[pyo3(signature = (s_inter, texts, anchors = None))]
fn recover_anchor(py: Python<'_>, s_inter: Vec<Vec<f64>>, texts: &Embeddings, anchors: Option<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
    let s = SimilarityMatrix::from_rows(&s_inter, SimilarityKind::Inter).map_err(to_py)?;
    let text = texts.inner.clone();
    py.detach(move || {
        let cfg = RecoveryConfig::default();
        let sel = match anchors {
            Some(idx) => AnchorSelection::new(idx, &text, &cfg)?,
            None => AnchorSelection::greedy(&text, &cfg)?,
        };
        recovery::recover_intra_anchor(&s, &text, &sel, &cfg).map(|m| m.to_rows())
    })
    .map_err(to_py)
}

/// Anchor-free recovery from `s_inter` and the embedding dimension. Returns
/// the recovered matrix and a dict with the factorization diagnostics.
#[pyfunction]
fn recover_anchorfree<'py>(py: Python<'py>, s_inter: Vec<Vec<f64>>, dim: usize) -> PyResult<(Vec<Vec<f64>>, Bound<'py, PyDict>)> {
    let s = SimilarityMatrix::from_rows(&s_inter, SimilarityKind::Inter).map_err(to_py)?;
    let (m, f) = py
        .detach(move || recovery::recover_intra_anchorfree(&s, dim, &RecoveryConfig::default()))
        .map_err(to_py)?;
    let info = PyDict::new(py);
    info.set_item("residual", f.residual)?;
    info.set_item("rank", f.rank())?;
    info.set_item("singular_values", f.singular_values.clone())?;
    info.set_item("m", matrix_rows(&f.m))?;
    Ok((m.to_rows(), info))
}

/// Principal axes of class-name text embeddings with a keep mask.
#[pyclass(name = "PrincipalProjector", module = "embspace", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Projector {
    inner: PrincipalProjector,
}

#[pymethods]
impl Projector {
    /// Fits the axes on `texts`, keeping the leading `keep_count` axes
    /// (half the dimension by default).
    #[staticmethod]
    #[pyo3(signature = (texts, keep_count = None))]
    fn fit(texts: &Embeddings, keep_count: Option<usize>) -> PyResult<Self> {
        let k = keep_count.unwrap_or_else(|| default_keep_count(texts.inner.dim()));
        Ok(Self { inner: projection::fit_class_axes(&texts.inner, k).map_err(to_py)? })
    }

    #[staticmethod]
    fn axis_aligned(keep: Vec<bool>) -> PyResult<Self> {
        Ok(Self { inner: PrincipalProjector::axis_aligned(keep).map_err(to_py)? })
    }

    fn with_keep_count(&self, keep_count: usize) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_keep_count(keep_count).map_err(to_py)? })
    }

    #[pyo3(signature = (x, mean_adjust = false, renormalize = true))]
    fn project(&self, x: &Embeddings, mean_adjust: bool, renormalize: bool) -> PyResult<Embeddings> {
        Ok(Embeddings { inner: projection::project(&x.inner, &self.inner, mean_adjust, renormalize).map_err(to_py)? })
    }

    fn similarity(&self, a: &Embeddings, b: &Embeddings) -> PyResult<Vec<Vec<f64>>> {
        Ok(projection::projected_similarity(&a.inner, &b.inner, &self.inner).map_err(to_py)?.to_rows())
    }

    /// Columns are the principal axes, in descending eigenvalue order.
    #[getter]
    fn basis(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.inner.basis())
    }

    #[getter]
    fn keep(&self) -> Vec<bool> {
        self.inner.keep().to_vec()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    #[getter]
    fn explained_variance(&self) -> f64 {
        self.inner.explained_variance()
    }
}

fn histogram_dict<'py>(py: Python<'py>, h: &embspace_core::indicators::HistogramPair) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("bin_edges", h.bin_edges.clone())?;
    d.set_item("density_a", h.density_a.clone())?;
    d.set_item("density_b", h.density_b.clone())?;
    d.set_item("counts_a", h.counts_a.clone())?;
    d.set_item("counts_b", h.counts_b.clone())?;
    d.set_item("overlap", h.overlap)?;
    d.set_item("mean_a", h.summary_a.mean)?;
    d.set_item("mean_b", h.summary_b.mean)?;
    d.set_item("std_a", h.summary_a.std)?;
    d.set_item("std_b", h.summary_b.std)?;
    Ok(d)
}

/// Same-class (`a`) versus different-class (`b`) similarity histograms.
#[pyfunction]
#[pyo3(signature = (images, labels, bins = 100, max_pairs = 1_000_000, seed = 0))]
fn class_pair_histograms<'py>(
    py: Python<'py>,
    images: &Embeddings,
    labels: Vec<usize>,
    bins: usize,
    max_pairs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = labeled(images, labels)?;
    let h = embspace_core::indicators::class_pair_histograms(&ds, bins, max_pairs, seed).map_err(to_py)?;
    histogram_dict(py, &h)
}

/// Image-image (`a`) versus image-text (`b`) similarity histograms.
#[pyfunction]
#[pyo3(signature = (images, texts, bins = 100, max_pairs = 1_000_000, seed = 0))]
fn modality_pair_histograms<'py>(
    py: Python<'py>,
    images: &Embeddings,
    texts: &Embeddings,
    bins: usize,
    max_pairs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let h = embspace_core::indicators::modality_pair_histograms(&images.inner, &texts.inner, bins, max_pairs, seed)
        .map_err(to_py)?;
    histogram_dict(py, &h)
}

#[pyfunction]
fn modality_gap(images: &Embeddings, texts: &Embeddings) -> PyResult<f64> {
    embspace_core::indicators::modality_gap(&images.inner, &texts.inner).map_err(to_py)
}

/// Image-to-image mAP with self-matches excluded, optionally in the
/// projected space.
#[pyfunction]
#[pyo3(signature = (images, labels, projector = None))]
fn retrieval_map(images: &Embeddings, labels: Vec<usize>, projector: Option<&Projector>) -> PyResult<f64> {
    let ds = labeled(images, labels)?;
    let sim = match projector {
        Some(p) => projection::projected_similarity(&images.inner, &images.inner, &p.inner),
        None => geometry::cosine_matrix(&images.inner, &images.inner),
    }
    .map_err(to_py)?;
    Ok(tasks::retrieval_map(&ds, &ds, &sim, true).map_err(to_py)?.map)
}

#[pyfunction]
fn average_precision(ranked_relevance: Vec<bool>) -> Option<f64> {
    tasks::average_precision(&ranked_relevance)
}

/// A linear classifier `argmax(W x + b)`.
#[pyclass(name = "LinearClassifier", module = "embspace", frozen)]
struct Classifier {
    inner: LinearClassifier,
}

#[pymethods]
impl Classifier {
    #[staticmethod]
    fn prototype(images: &Embeddings, labels: Vec<usize>) -> PyResult<Self> {
        let ds = labeled(images, labels)?;
        Ok(Self { inner: tasks::prototype_classifier(&ds).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (images, labels, shrinkage = tasks::DEFAULT_SHRINKAGE))]
    fn lda(images: &Embeddings, labels: Vec<usize>, shrinkage: f64) -> PyResult<Self> {
        let ds = labeled(images, labels)?;
        Ok(Self { inner: tasks::lda_classifier(&ds, shrinkage).map_err(to_py)? })
    }

    #[staticmethod]
    fn zero_shot(texts: &Embeddings, labels: Vec<usize>) -> PyResult<Self> {
        let ds = labeled(texts, labels)?;
        Ok(Self { inner: tasks::zero_shot_classifier(&ds).map_err(to_py)? })
    }

    fn classify(&self, x: &Embeddings) -> PyResult<Vec<usize>> {
        tasks::classify(&self.inner, &x.inner).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind() {
            ClassifierKind::Prototype => "prototype",
            ClassifierKind::Lda => "lda",
            ClassifierKind::ZeroShotText => "zero-shot",
        }
    }

    #[getter]
    fn weights(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.inner.weights())
    }

    #[getter]
    fn biases(&self) -> Vec<f64> {
        self.inner.biases().to_vec()
    }
}

#[pyfunction]
fn accuracy(predicted: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
    tasks::accuracy(&predicted, &truth).map_err(to_py)
}

/// Accuracy of one seeded few-shot episode; `classifier` is "prototype" or
/// "lda".
#[pyfunction]
#[pyo3(signature = (images, labels, shots, seed = 0, classifier = "prototype", shrinkage = tasks::DEFAULT_SHRINKAGE))]
fn fewshot_accuracy(
    images: &Embeddings,
    labels: Vec<usize>,
    shots: usize,
    seed: u64,
    classifier: &str,
    shrinkage: f64,
) -> PyResult<f64> {
    let method = match classifier {
        "prototype" => FewShotMethod::Prototype,
        "lda" => FewShotMethod::Lda { shrinkage },
        _ => return Err(PyValueError::new_err(format!("unknown classifier {classifier:?}"))),
    };
    tasks::fewshot_accuracy(&labeled(images, labels)?, method, shots, seed).map_err(to_py)
}

/// Synthetic class cones for images and texts. Returns a dict with
/// `images`, `texts`, `labels` and `s_inter`.
#[pyfunction]
#[pyo3(signature = (dim = 16, n_classes = 16, per_class = 32, spread = 0.3, offset = 0.0, seed = 0))]
fn synth<'py>(
    py: Python<'py>,
    dim: usize,
    n_classes: usize,
    per_class: usize,
    spread: f64,
    offset: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = ConeSpec::new(dim, n_classes, per_class, spread, seed).with_axis_offset(offset);
    let pair = synthetic::generate_modality_pair(&spec).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("images", Embeddings { inner: pair.images.embeddings().clone() })?;
    d.set_item("texts", Embeddings { inner: pair.texts.embeddings().clone() })?;
    d.set_item("labels", pair.images.labels().to_vec())?;
    d.set_item("s_inter", pair.s_inter.to_rows())?;
    Ok(d)
}

#[pyfunction]
fn load_embeddings(path: PathBuf) -> PyResult<Embeddings> {
    Ok(Embeddings { inner: eio::load_embeddings(path).map_err(to_py)? })
}

#[pyfunction]
#[pyo3(signature = (path, embeddings, dtype = "f32"))]
fn save_embeddings(path: PathBuf, embeddings: &Embeddings, dtype: &str) -> PyResult<()> {
    let dtype = match dtype {
        "f32" => Dtype::F32le,
        "f64" => Dtype::F64le,
        _ => return Err(PyValueError::new_err(format!("dtype must be f32 or f64, got {dtype:?}"))),
    };
    eio::save_embeddings(path, &embeddings.inner, dtype).map_err(to_py)
}

/// Dense class ids of a labels CSV, in row order.
#[pyfunction]
fn load_labels(path: PathBuf) -> PyResult<Vec<usize>> {
    Ok(eio::load_labels(path).map_err(to_py)?.ids)
}

#[pymodule]
pub fn embspace(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EmbspaceError", m.py().get_type::<EmbspaceError>())?;
    m.add_class::<Embeddings>()?;
    m.add_class::<Projector>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(cosine_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(recover_anchor, m)?)?;
    m.add_function(wrap_pyfunction!(recover_anchorfree, m)?)?;
    m.add_function(wrap_pyfunction!(class_pair_histograms, m)?)?;
    m.add_function(wrap_pyfunction!(modality_pair_histograms, m)?)?;
    m.add_function(wrap_pyfunction!(modality_gap, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_map, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(fewshot_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(load_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(save_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(load_labels, m)?)?;
    Ok(())
}
