//! Seeded ground-truth geometries: class clusters on the unit sphere, and
//! paired image/text sets displaced by a modality offset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EmbeddingSet, LabeledEmbeddingSet, Modality, SimilarityKind, SimilarityMatrix};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub d: usize,
    pub n_classes: usize,
    pub per_class: usize,
    /// Standard deviation of the isotropic Gaussian added to class centers
    /// before normalization.
    pub class_spread: f64,
    /// Added to every text sample before normalization. Empty means zero.
    pub modality_offset: Vec<f64>,
    pub seed: u64,
}

impl ConeSpec {
    pub fn new(d: usize, n_classes: usize, per_class: usize, class_spread: f64, seed: u64) -> Self {
        Self {
            d,
            n_classes,
            per_class,
            class_spread,
            modality_offset: Vec::new(),
            seed,
        }
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        self.modality_offset = offset;
        self
    }

    /// Offset of `magnitude` along the first axis.
    pub fn with_axis_offset(self, magnitude: f64) -> Self {
        let mut off = vec![0.0; self.d];
        if let Some(first) = off.first_mut() {
            *first = magnitude;
        }
        self.with_offset(off)
    }

    pub fn total(&self) -> usize {
        self.n_classes * self.per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidParameter(format!("d must be >= 2, got {}", self.d)));
        }
        if self.n_classes < 1 || self.per_class < 1 {
            return Err(Error::InvalidParameter(
                "n_classes and per_class must be >= 1".into(),
            ));
        }
        if !(self.class_spread >= 0.0 && self.class_spread.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "class_spread must be finite and >= 0, got {}",
                self.class_spread
            )));
        }
        if !self.modality_offset.is_empty() && self.modality_offset.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: self.modality_offset.len(),
            });
        }
        if self.modality_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("modality_offset must be finite".into()));
        }
        Ok(())
    }
}

/// Uniform draw on the sphere: normalized standard Gaussian, redrawn in the
/// (practically impossible) event of a zero vector.
fn unit_gaussian(rng: &mut SplitMix64, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.normal());
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

struct Draw {
    centers: Vec<DVector<f64>>,
    noise: Vec<DVector<f64>>,
    labels: Vec<usize>,
}

fn draw(spec: &ConeSpec) -> Result<Draw> {
    spec.validate()?;
    let mut center_rng = SplitMix64::labelled(spec.seed, "synthetic.centers");
    let centers: Vec<_> = (0..spec.n_classes)
        .map(|_| unit_gaussian(&mut center_rng, spec.d))
        .collect();
    let mut noise_rng = SplitMix64::labelled(spec.seed, "synthetic.noise");
    let mut noise = Vec::with_capacity(spec.total());
    let mut labels = Vec::with_capacity(spec.total());
    for c in 0..spec.n_classes {
        for _ in 0..spec.per_class {
            noise.push(DVector::from_fn(spec.d, |_, _| noise_rng.normal()));
            labels.push(c);
        }
    }
    Ok(Draw {
        centers,
        noise,
        labels,
    })
}

fn assemble(draw: &Draw, spread: f64, offset: Option<&DVector<f64>>, modality: Modality) -> Result<EmbeddingSet> {
    let n = draw.labels.len();
    let d = draw.centers[0].len();
    let mut data = DMatrix::zeros(n, d);
    for (i, &c) in draw.labels.iter().enumerate() {
        let mut v = &draw.centers[c] + &draw.noise[i] * spread;
        if let Some(off) = offset {
            v += off;
        }
        let norm = v.norm();
        if norm <= 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "sample {i} collapsed to the origin; change the offset or seed"
            )));
        }
        data.set_row(i, &(v / norm).transpose());
    }
    EmbeddingSet::new_normalized(data, modality)
}

/// Class-structured unit embeddings. Rows are ordered by class, `per_class`
/// consecutive rows each.
pub fn generate_labeled(spec: &ConeSpec) -> Result<LabeledEmbeddingSet> {
    let draw = draw(spec)?;
    let set = assemble(&draw, spec.class_spread, None, Modality::Image)?;
    LabeledEmbeddingSet::new(set, draw.labels)
}

#[derive(Debug, Clone)]
pub struct ModalityPair {
    pub images: LabeledEmbeddingSet,
    pub texts: LabeledEmbeddingSet,
    /// `texts · imagesᵀ`, `n_texts x n_images`.
    pub s_inter: SimilarityMatrix,
}

/// Paired image and text sets sharing class centers and per-sample noise;
/// texts are displaced by the modality offset before normalization, so a zero
/// offset makes the two sets coincide.
pub fn generate_modality_pair(spec: &ConeSpec) -> Result<ModalityPair> {
    if spec.d >= spec.total() {
        return Err(Error::InvalidParameter(format!(
            "need more than d = {} samples per modality, got {}",
            spec.d,
            spec.total()
        )));
    }
    let draw = draw(spec)?;
    let images = assemble(&draw, spec.class_spread, None, Modality::Image)?;
    let offset = if spec.modality_offset.is_empty() {
        DVector::zeros(spec.d)
    } else {
        DVector::from_column_slice(&spec.modality_offset)
    };
    let texts = assemble(&draw, spec.class_spread, Some(&offset), Modality::Text)?;
    let s_data = texts.data() * images.data().transpose();
    let s_inter = SimilarityMatrix::new(s_data, SimilarityKind::Inter)?;
    Ok(ModalityPair {
        images: LabeledEmbeddingSet::new(images, draw.labels.clone())?,
        texts: LabeledEmbeddingSet::new(texts, draw.labels)?,
        s_inter,
    })
}

/// `n` independent uniform unit vectors in `d` dimensions.
pub fn random_unit_vectors(n: usize, d: usize, seed: u64, modality: Modality) -> Result<EmbeddingSet> {
    let mut rng = SplitMix64::labelled(seed, "synthetic.uniform");
    let mut data = DMatrix::zeros(n, d);
    for i in 0..n {
        data.set_row(i, &unit_gaussian(&mut rng, d).transpose());
    }
    EmbeddingSet::new_normalized(data, modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cosine_matrix;
    use crate::indicators::modality_gap;

    fn mean_within_class_cosine(ds: &LabeledEmbeddingSet) -> f64 {
        let s = cosine_matrix(ds.embeddings(), ds.embeddings()).unwrap();
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                if ds.labels()[i] == ds.labels()[j] {
                    sum += s.get(i, j);
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn zero_spread_gives_centers() {
        let ds = generate_labeled(&ConeSpec::new(5, 3, 4, 0.0, 11)).unwrap();
        for members in ds.class_members() {
            let first = ds.embeddings().row(members[0]);
            for &m in &members[1..] {
                assert_eq!(ds.embeddings().row(m), first);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = ConeSpec::new(8, 4, 5, 0.3, 99).with_axis_offset(1.0);
        let a = generate_modality_pair(&spec).unwrap();
        let b = generate_modality_pair(&spec).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.texts, b.texts);
        assert_eq!(a.s_inter, b.s_inter);
    }

    #[test]
    fn tighter_spread_raises_within_class_similarity() {
        let tight = generate_labeled(&ConeSpec::new(16, 5, 20, 0.1, 5)).unwrap();
        let loose = generate_labeled(&ConeSpec::new(16, 5, 20, 0.5, 5)).unwrap();
        assert!(mean_within_class_cosine(&tight) > mean_within_class_cosine(&loose));
    }

    #[test]
    fn rows_unit_and_labels_balanced() {
        let ds = generate_labeled(&ConeSpec::new(6, 7, 9, 0.4, 1)).unwrap();
        for row in ds.embeddings().data().row_iter() {
            assert!((row.norm() - 1.0).abs() <= 1e-12);
        }
        assert!(ds.class_members().iter().all(|m| m.len() == 9));
    }

    #[test]
    fn zero_offset_has_no_gap() {
        let pair = generate_modality_pair(&ConeSpec::new(4, 3, 5, 0.2, 2)).unwrap();
        let gap = modality_gap(pair.images.embeddings(), pair.texts.embeddings()).unwrap();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn offset_separates_modalities() {
        let pair = generate_modality_pair(&ConeSpec::new(8, 4, 25, 0.3, 8).with_axis_offset(2.0)).unwrap();
        let ii = cosine_matrix(pair.images.embeddings(), pair.images.embeddings()).unwrap();
        let ti = &pair.s_inter;
        assert!(ti.data().mean() < ii.data().mean());
    }

    #[test]
    fn s_inter_has_rank_d() {
        let pair = generate_modality_pair(&ConeSpec::new(6, 4, 10, 0.5, 3).with_axis_offset(0.5)).unwrap();
        let sv = pair.s_inter.data().clone().singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[5] > 1e-8 * sv[0]);
        assert!(sv[6] < 1e-10 * sv[0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_labeled(&ConeSpec::new(1, 2, 2, 0.1, 0)).is_err());
        assert!(generate_labeled(&ConeSpec::new(3, 0, 2, 0.1, 0)).is_err());
        assert!(generate_labeled(&ConeSpec::new(3, 2, 2, -0.1, 0)).is_err());
        assert!(generate_modality_pair(&ConeSpec::new(10, 2, 2, 0.1, 0)).is_err());
        assert!(generate_labeled(&ConeSpec::new(3, 2, 2, 0.1, 0).with_offset(vec![1.0])).is_err());
    }
}
