//! Evaluation harness: image-to-image retrieval mAP and few-shot / zero-shot
//! linear classifiers.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ensure_normalized, EmbeddingSet, LabeledEmbeddingSet, SimilarityMatrix};
use crate::rng::SplitMix64;

pub const DEFAULT_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// AP of every evaluated query, in query order.
    pub per_query_ap: Vec<f64>,
    /// Row indices of the evaluated queries.
    pub evaluated: Vec<usize>,
    /// Queries without any relevant gallery item.
    pub skipped: Vec<usize>,
    pub map: f64,
}

/// Average precision of a ranked relevance list: the mean, over relevant
/// positions `k` (1-based), of the fraction of relevant items in the top `k`.
/// `None` when nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranks the gallery for every query by descending similarity (ties to the
/// lower gallery index) and averages the per-query AP.
///
/// With `exclude_self`, gallery item `i` is dropped from the ranking of
/// query `i`; use it when the queries are the gallery.
pub fn retrieval_map(
    queries: &LabeledEmbeddingSet,
    gallery: &LabeledEmbeddingSet,
    sim: &SimilarityMatrix,
    exclude_self: bool,
) -> Result<RetrievalResult> {
    if sim.nrows() != queries.len() || sim.ncols() != gallery.len() {
        return Err(Error::ShapeMismatch(format!(
            "similarity is {} x {}, expected {} x {}",
            sim.nrows(),
            sim.ncols(),
            queries.len(),
            gallery.len()
        )));
    }
    let aps: Vec<Option<f64>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let mut ranked: Vec<usize> = (0..gallery.len())
                .filter(|&g| !(exclude_self && g == q))
                .collect();
            ranked.sort_by(|&a, &b| sim.get(q, b).total_cmp(&sim.get(q, a)).then(a.cmp(&b)));
            let label = queries.labels()[q];
            let relevance: Vec<bool> = ranked.iter().map(|&g| gallery.labels()[g] == label).collect();
            average_precision(&relevance)
        })
        .collect();
    let mut result = RetrievalResult {
        per_query_ap: Vec::new(),
        evaluated: Vec::new(),
        skipped: Vec::new(),
        map: 0.0,
    };
    for (q, ap) in aps.into_iter().enumerate() {
        match ap {
            Some(ap) => {
                result.per_query_ap.push(ap);
                result.evaluated.push(q);
            }
            None => result.skipped.push(q),
        }
    }
    if result.per_query_ap.is_empty() {
        return Err(Error::NoRelevant);
    }
    result.map = result.per_query_ap.iter().sum::<f64>() / result.per_query_ap.len() as f64;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Prototype,
    Lda,
    ZeroShotText,
}

/// `argmax_c (weights_c · x + bias_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    weights: DMatrix<f64>,
    biases: Vec<f64>,
    kind: ClassifierKind,
}

impl LinearClassifier {
    pub fn new(weights: DMatrix<f64>, biases: Vec<f64>, kind: ClassifierKind) -> Result<Self> {
        if weights.nrows() < 2 {
            return Err(Error::InsufficientClassData(format!(
                "a classifier needs at least 2 classes, got {}",
                weights.nrows()
            )));
        }
        if biases.len() != weights.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} biases for {} classes",
                biases.len(),
                weights.nrows()
            )));
        }
        Ok(Self { weights, biases, kind })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

fn class_means(ds: &LabeledEmbeddingSet, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let members = ds.class_members();
    let mut means = DMatrix::zeros(members.len(), data.ncols());
    for (c, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let mut acc = means.row_mut(c);
        for &i in rows {
            acc += data.row(i);
        }
        acc /= rows.len() as f64;
    }
    Ok(means)
}

fn normalized_means(ds: &LabeledEmbeddingSet, kind: ClassifierKind) -> Result<LinearClassifier> {
    let e = ensure_normalized(ds.embeddings())?;
    let means = EmbeddingSet::new(class_means(ds, e.data())?, e.modality())?;
    let weights = crate::geometry::normalize_rows(&means)?.into_data();
    let c = weights.nrows();
    LinearClassifier::new(weights, vec![0.0; c], kind)
}

/// Nearest-prototype classifier: each row is the normalized class mean.
pub fn prototype_classifier(fewshot: &LabeledEmbeddingSet) -> Result<LinearClassifier> {
    normalized_means(fewshot, ClassifierKind::Prototype)
}

/// Zero-shot classifier from text embeddings: each row is the normalized
/// mean of that class's prompts.
pub fn zero_shot_classifier(class_text: &LabeledEmbeddingSet) -> Result<LinearClassifier> {
    normalized_means(class_text, ClassifierKind::ZeroShotText)
}

/// Linear discriminant with one shared covariance.
///
/// The pooled within-class covariance (divided by `N - C`) is shrunk towards
/// `tr(S)/d · I`. When the pooled scatter is identically zero, which is the
/// case with a single shot per class, the discriminant has no information
/// beyond the uniform prior: all weights are zero and every class scores
/// alike. A covariance that is nonzero but singular at zero shrinkage is an
/// error.
pub fn lda_classifier(fewshot: &LabeledEmbeddingSet, shrinkage: f64) -> Result<LinearClassifier> {
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidParameter(format!(
            "shrinkage must be in [0, 1], got {shrinkage}"
        )));
    }
    let data = fewshot.embeddings().data();
    let (n, d) = data.shape();
    let means = class_means(fewshot, data)?;
    let c = means.nrows();
    let prior = -(c as f64).ln();

    let mut centered = data.clone();
    for (i, mut row) in centered.row_iter_mut().enumerate() {
        row -= means.row(fewshot.labels()[i]);
    }
    let scatter = centered.transpose() * &centered;
    let pooled = if n > c { scatter / (n - c) as f64 } else { scatter };
    let trace = pooled.trace();
    let mut cov = pooled * (1.0 - shrinkage);
    for k in 0..d {
        cov[(k, k)] += shrinkage * trace / d as f64;
    }
    cov = (&cov + cov.transpose()) * 0.5;

    if cov.iter().all(|&v| v == 0.0) {
        return LinearClassifier::new(DMatrix::zeros(c, d), vec![prior; c], ClassifierKind::Lda);
    }
    let eig = SymmetricEigen::new(cov);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max) {
        return Err(Error::SingularCovariance);
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let q = &eig.eigenvectors;
    let precision = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    let weights = &means * &precision;
    let biases = (0..c)
        .map(|k| -0.5 * weights.row(k).dot(&means.row(k)) + prior)
        .collect();
    LinearClassifier::new(weights, biases, ClassifierKind::Lda)
}

/// Predicted class per test row; ties go to the lowest class id.
pub fn classify(c: &LinearClassifier, test: &EmbeddingSet) -> Result<Vec<usize>> {
    if test.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: test.dim(),
        });
    }
    let x = match c.kind {
        ClassifierKind::Lda => std::borrow::Cow::Borrowed(test),
        ClassifierKind::Prototype | ClassifierKind::ZeroShotText => ensure_normalized(test)?,
    };
    let scores = x.data() * c.weights.transpose();
    Ok(scores
        .row_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (k, &s) in row.iter().enumerate() {
                let s = s + c.biases[k];
                if s > best_score {
                    best = k;
                    best_score = s;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Row indices of a few-shot split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws `shots` rows per class for training; the rest form the test set.
/// The draw depends only on the pool labels and `seed`, so every classifier
/// evaluated with the same seed sees the same split.
pub fn sample_shots(pool: &LabeledEmbeddingSet, shots: usize, seed: u64) -> Result<ShotSplit> {
    if shots == 0 {
        return Err(Error::InvalidParameter("shots must be positive".into()));
    }
    let mut rng = SplitMix64::labelled(seed, "tasks.shots");
    let mut split = ShotSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (c, mut members) in pool.class_members().into_iter().enumerate() {
        if members.len() < shots {
            return Err(Error::InsufficientClassData(format!(
                "class {c} has {} rows, fewer than {shots} shots",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        split.train.extend_from_slice(&members[..shots]);
        split.test.extend_from_slice(&members[shots..]);
    }
    if split.test.is_empty() {
        return Err(Error::InsufficientClassData("no rows left for testing".into()));
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "classifier")]
pub enum FewShotMethod {
    Prototype,
    Lda { shrinkage: f64 },
}

/// Accuracy of one seeded few-shot episode on `pool`.
pub fn fewshot_accuracy(pool: &LabeledEmbeddingSet, method: FewShotMethod, shots: usize, seed: u64) -> Result<f64> {
    let split = sample_shots(pool, shots, seed)?;
    let train = pool.select_rows(&split.train)?;
    let classifier = match method {
        FewShotMethod::Prototype => prototype_classifier(&train)?,
        FewShotMethod::Lda { shrinkage } => lda_classifier(&train, shrinkage)?,
    };
    let test = pool.embeddings().select_rows(&split.test)?;
    let truth: Vec<usize> = split.test.iter().map(|&i| pool.labels()[i]).collect();
    accuracy(&classify(&classifier, &test)?, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cosine_matrix, Modality, SimilarityKind};
    use crate::synthetic::{generate_labeled, ConeSpec};

    const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn labeled(rows: &[Vec<f64>], labels: Vec<usize>) -> LabeledEmbeddingSet {
        LabeledEmbeddingSet::new(EmbeddingSet::from_rows(rows, Modality::Image).unwrap(), labels).unwrap()
    }

    #[test]
    fn ap_hand_case() {
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, false]), Some(1.0));
        assert_eq!(average_precision(&[false, false]), None);
    }

    fn one_query(scores: &[f64], gallery_labels: Vec<usize>) -> RetrievalResult {
        let g = gallery_labels.len();
        let q = labeled(&[vec![1.0, 0.0]], vec![0]);
        let rows = vec![vec![1.0, 0.0]; g];
        let gallery = LabeledEmbeddingSet::new(
            EmbeddingSet::from_rows(&rows, Modality::Image).unwrap(),
            gallery_labels,
        )
        .unwrap();
        let sim = SimilarityMatrix::from_rows(&[scores.to_vec()], SimilarityKind::Inter).unwrap();
        retrieval_map(&q, &gallery, &sim, false).unwrap()
    }

    #[test]
    fn retrieval_relevance_pattern() {
        let r = one_query(&[0.9, 0.5, 0.1], vec![0, 1, 0]);
        assert!((r.map - 0.8333333333333334).abs() < 1e-15);
        let r = one_query(&[0.9, 0.5], vec![0, 1]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        // Relevant item at the lower index wins the tie: AP 1.
        assert_eq!(one_query(&[0.5, 0.5], vec![0, 1]).map, 1.0);
        // Relevant at the higher index is ranked second: AP 1/2.
        assert_eq!(one_query(&[0.5, 0.5], vec![1, 0]).map, 0.5);
    }

    #[test]
    fn self_match_exclusion_and_skips() {
        let ds = labeled(
            &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]],
            vec![0, 0, 1],
        );
        let sim = cosine_matrix(ds.embeddings(), ds.embeddings()).unwrap();
        let r = retrieval_map(&ds, &ds, &sim, true).unwrap();
        assert_eq!(r.skipped, vec![2]);
        assert_eq!(r.evaluated, vec![0, 1]);
        assert_eq!(r.map, 1.0);
        let none = labeled(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let sim = cosine_matrix(none.embeddings(), none.embeddings()).unwrap();
        assert!(matches!(retrieval_map(&none, &none, &sim, true), Err(Error::NoRelevant)));
        let bad = SimilarityMatrix::from_rows(&[vec![0.0]], SimilarityKind::Inter).unwrap();
        assert!(matches!(retrieval_map(&none, &none, &bad, true), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn prototype_examples() {
        let one = labeled(&[vec![0.6, 0.8], vec![1.0, 0.0]], vec![0, 1]);
        let c = prototype_classifier(&one).unwrap();
        assert_eq!(c.weights().row(0).iter().copied().collect::<Vec<_>>(), vec![0.6, 0.8]);

        let two = labeled(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], vec![0, 0, 1]);
        let c = prototype_classifier(&two).unwrap();
        assert!((c.weights()[(0, 0)] - H).abs() < 1e-15);
        assert!((c.weights()[(0, 1)] - H).abs() < 1e-15);
        assert_eq!(c.kind(), ClassifierKind::Prototype);
    }

    #[test]
    fn classify_examples() {
        let c = prototype_classifier(&labeled(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1])).unwrap();
        let test = EmbeddingSet::from_rows(&[vec![0.9, 0.1], vec![1.0, 1.0], vec![0.1, 0.9]], Modality::Image).unwrap();
        assert_eq!(classify(&c, &test).unwrap(), vec![0, 0, 1]);
        let wrong = EmbeddingSet::from_rows(&[vec![0.9, 0.1, 0.0]], Modality::Image).unwrap();
        assert!(matches!(classify(&c, &wrong), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn batch_matches_per_row() {
        let ds = generate_labeled(&ConeSpec::new(8, 4, 10, 0.4, 3)).unwrap();
        for c in [prototype_classifier(&ds).unwrap(), lda_classifier(&ds, 0.3).unwrap()] {
            let batch = classify(&c, ds.embeddings()).unwrap();
            for (i, &p) in batch.iter().enumerate() {
                let row = ds.embeddings().select_rows(&[i]).unwrap();
                assert_eq!(classify(&c, &row).unwrap(), vec![p]);
            }
        }
    }

    fn nearest_centroid_cosine(train: &LabeledEmbeddingSet, test: &EmbeddingSet) -> Vec<usize> {
        let tr = train.embeddings().to_rows();
        let c = train.n_classes();
        let d = train.dim();
        let mut cent = vec![vec![0.0; d]; c];
        let mut counts = vec![0.0; c];
        for (r, &l) in tr.iter().zip(train.labels()) {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..d {
                cent[l][j] += r[j] / n;
            }
            counts[l] += 1.0;
        }
        test.to_rows()
            .iter()
            .map(|x| {
                let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let score = |k: usize| {
                    let m: Vec<f64> = cent[k].iter().map(|v| v / counts[k]).collect();
                    let nm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                    m.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (nm * nx)
                };
                (0..c).fold(0, |best, k| if score(k) > score(best) { k } else { best })
            })
            .collect()
    }

    #[test]
    fn prototype_matches_nearest_centroid_oracle() {
        let pool = generate_labeled(&ConeSpec::new(10, 4, 30, 0.6, 21)).unwrap();
        let split = sample_shots(&pool, 2, 5).unwrap();
        let train = pool.select_rows(&split.train).unwrap();
        let test = pool.embeddings().select_rows(&split.test).unwrap();
        let c = prototype_classifier(&train).unwrap();
        assert_eq!(classify(&c, &test).unwrap(), nearest_centroid_cosine(&train, &test));
    }

    #[test]
    fn zero_shot_examples() {
        let text = labeled(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let c = zero_shot_classifier(&text).unwrap();
        assert_eq!(c.kind(), ClassifierKind::ZeroShotText);
        assert_eq!(c.weights(), text.embeddings().data());

        let text = labeled(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]],
            vec![0, 0, 1, 1],
        );
        let c = zero_shot_classifier(&text).unwrap();
        assert!((c.weights()[(1, 0)] + H).abs() < 1e-15);
        assert!((c.weights()[(1, 1)] + H).abs() < 1e-15);
    }

    #[test]
    fn zero_shot_matches_nearest_text_oracle() {
        let images = generate_labeled(&ConeSpec::new(6, 3, 20, 0.5, 30)).unwrap();
        let prompts = generate_labeled(&ConeSpec::new(6, 3, 2, 0.2, 30)).unwrap();
        let c = zero_shot_classifier(&prompts).unwrap();
        let pred = classify(&c, images.embeddings()).unwrap();
        assert_eq!(pred, nearest_centroid_cosine(&prompts, images.embeddings()));
        let acc = accuracy(&pred, images.labels()).unwrap();
        let oracle = accuracy(&nearest_centroid_cosine(&prompts, images.embeddings()), images.labels()).unwrap();
        assert_eq!(acc, oracle);
    }

    #[test]
    fn lda_separable_classes() {
        let pool = generate_labeled(&ConeSpec::new(16, 2, 216, 0.1, 40)).unwrap();
        let acc = fewshot_accuracy(&pool, FewShotMethod::Lda { shrinkage: DEFAULT_SHRINKAGE }, 16, 1).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn lda_full_shrinkage_is_nearest_mean() {
        let pool = generate_labeled(&ConeSpec::new(5, 3, 20, 0.7, 50)).unwrap();
        let split = sample_shots(&pool, 4, 2).unwrap();
        let train = pool.select_rows(&split.train).unwrap();
        let test = pool.embeddings().select_rows(&split.test).unwrap();
        let c = lda_classifier(&train, 1.0).unwrap();
        let means = class_means(&train, train.embeddings().data()).unwrap();
        let oracle: Vec<usize> = test
            .data()
            .row_iter()
            .map(|x| {
                (0..3)
                    .map(|k| (x - means.row(k)).norm_squared())
                    .enumerate()
                    .fold((0, f64::INFINITY), |(bi, bd), (k, dist)| if dist < bd { (k, dist) } else { (bi, bd) })
                    .0
            })
            .collect();
        assert_eq!(classify(&c, &test).unwrap(), oracle);
    }

    #[test]
    fn lda_one_shot_degenerates_to_constant() {
        let pool = generate_labeled(&ConeSpec::new(8, 5, 6, 0.3, 60)).unwrap();
        let split = sample_shots(&pool, 1, 0).unwrap();
        let train = pool.select_rows(&split.train).unwrap();
        for shrinkage in [0.0, 0.5] {
            let c = lda_classifier(&train, shrinkage).unwrap();
            assert!(c.weights().iter().all(|&w| w == 0.0));
            let pred = classify(&c, pool.embeddings()).unwrap();
            assert!(pred.iter().all(|&p| p == 0));
        }
    }

    #[test]
    fn lda_singular_without_shrinkage() {
        // Two shots per class in d = 8: pooled scatter has rank 2.
        let pool = generate_labeled(&ConeSpec::new(8, 2, 5, 0.3, 61)).unwrap();
        let split = sample_shots(&pool, 2, 0).unwrap();
        let train = pool.select_rows(&split.train).unwrap();
        assert!(matches!(lda_classifier(&train, 0.0), Err(Error::SingularCovariance)));
        assert!(lda_classifier(&train, 0.1).is_ok());
        assert!(lda_classifier(&train, 1.5).is_err());
    }

    #[test]
    fn shot_sampling_is_seeded_and_balanced() {
        let pool = generate_labeled(&ConeSpec::new(4, 3, 7, 0.3, 70)).unwrap();
        let a = sample_shots(&pool, 3, 9).unwrap();
        assert_eq!(a, sample_shots(&pool, 3, 9).unwrap());
        assert_ne!(a, sample_shots(&pool, 3, 10).unwrap());
        assert_eq!(a.train.len(), 9);
        assert_eq!(a.test.len(), 12);
        assert!(sample_shots(&pool, 8, 0).is_err());
    }
}
