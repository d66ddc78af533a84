//! Misalignment indicators: similarity histograms for same-class versus
//! different-class image pairs and for image-image versus image-text pairs,
//! their overlap, and the centroid distance between modalities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ensure_normalized, EmbeddingSet, LabeledEmbeddingSet};
use crate::rng::SplitMix64;

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_MAX_PAIRS: usize = 1_000_000;

/// Two histograms over shared bins on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub bin_edges: Vec<f64>,
    pub counts_a: Vec<u64>,
    pub counts_b: Vec<u64>,
    /// Per-bin probability mass; sums to 1.
    pub density_a: Vec<f64>,
    pub density_b: Vec<f64>,
    /// Histogram intersection `Σ min(density_a, density_b)`.
    pub overlap: f64,
    pub summary_a: SampleSummary,
    pub summary_b: SampleSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
}

impl SampleSummary {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: values.len() as u64,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Histogram intersection of two probability vectors.
pub fn histogram_overlap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum::<f64>().clamp(0.0, 1.0)
}

fn bin_index(v: f64, bins: usize) -> usize {
    let pos = ((v + 1.0) * 0.5 * bins as f64).floor();
    if pos <= 0.0 {
        0
    } else {
        (pos as usize).min(bins - 1)
    }
}

impl HistogramPair {
    /// Bins both samples over `[-1, 1]`. Values within rounding of the range
    /// ends land in the end bins.
    pub fn from_samples(a: &[f64], b: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidParameter("bins must be positive".into()));
        }
        if a.is_empty() || b.is_empty() {
            return Err(Error::InsufficientClassData("both samples must be non-empty".into()));
        }
        let bin_edges = (0..=bins).map(|k| -1.0 + 2.0 * k as f64 / bins as f64).collect();
        let count = |xs: &[f64]| {
            let mut c = vec![0u64; bins];
            for &x in xs {
                c[bin_index(x, bins)] += 1;
            }
            c
        };
        let counts_a = count(a);
        let counts_b = count(b);
        let density = |c: &[u64], total: usize| c.iter().map(|&k| k as f64 / total as f64).collect::<Vec<_>>();
        let density_a = density(&counts_a, a.len());
        let density_b = density(&counts_b, b.len());
        let overlap = histogram_overlap(&density_a, &density_b);
        Ok(Self {
            bin_edges,
            counts_a,
            counts_b,
            density_a,
            density_b,
            overlap,
            summary_a: SampleSummary::of(a),
            summary_b: SampleSummary::of(b),
        })
    }

    pub fn bins(&self) -> usize {
        self.counts_a.len()
    }

    /// `bin_left,bin_right,density_a,density_b`, one line per bin.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ser = |e: csv::Error| Error::Serialization(e.to_string());
        w.write_record(["bin_left", "bin_right", "density_a", "density_b"])
            .map_err(ser)?;
        for k in 0..self.bins() {
            w.write_record(&[
                self.bin_edges[k].to_string(),
                self.bin_edges[k + 1].to_string(),
                self.density_a[k].to_string(),
                self.density_b[k].to_string(),
            ])
            .map_err(ser)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
    }
}

/// Rows copied into one contiguous row-major buffer.
fn row_major(e: &EmbeddingSet) -> Vec<f64> {
    let d = e.dim();
    let mut out = Vec::with_capacity(e.len() * d);
    for row in e.data().row_iter() {
        out.extend(row.iter());
    }
    out
}

fn dot(rows_a: &[f64], i: usize, rows_b: &[f64], j: usize, d: usize) -> f64 {
    rows_a[i * d..(i + 1) * d]
        .iter()
        .zip(&rows_b[j * d..(j + 1) * d])
        .map(|(x, y)| x * y)
        .sum()
}

/// Pairs enumerated as `(pos, partner)` over positions, where position `pos`
/// has `counts[pos]` partners. `prefix[pos]` is the number of pairs before
/// position `pos`.
struct PairIndex {
    prefix: Vec<u64>,
    total: u64,
}

impl PairIndex {
    fn new(counts: impl Iterator<Item = u64>) -> Self {
        let mut prefix = Vec::new();
        let mut total = 0u64;
        for c in counts {
            prefix.push(total);
            total += c;
        }
        Self { prefix, total }
    }

    /// Position and partner offset of linear pair index `k`.
    fn locate(&self, k: u64) -> (usize, u64) {
        let pos = self.prefix.partition_point(|&p| p <= k) - 1;
        (pos, k - self.prefix[pos])
    }
}

/// Same-class (`a`) and different-class (`b`) similarity histograms over
/// image pairs `i < j`, each side sampled without replacement down to at most
/// `max_pairs` pairs.
pub fn class_pair_histograms(
    ds: &LabeledEmbeddingSet,
    bins: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<HistogramPair> {
    let members = ds.class_members();
    if members.len() < 2 {
        return Err(Error::InsufficientClassData(format!(
            "need at least 2 classes, got {}",
            members.len()
        )));
    }
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::InsufficientClassData(format!(
            "class {c} has {} rows, need at least 2",
            m.len()
        )));
    }
    if max_pairs == 0 {
        return Err(Error::InvalidParameter("max_pairs must be positive".into()));
    }
    let e = ensure_normalized(ds.embeddings())?;
    let d = e.dim();
    let order: Vec<usize> = members.iter().flatten().copied().collect();
    let rows = row_major(&e.select_rows(&order)?);
    let n = order.len();
    let mut block_end = Vec::with_capacity(n);
    for m in &members {
        let end = block_end.len() + m.len();
        block_end.extend(std::iter::repeat_n(end, m.len()));
    }

    let same = PairIndex::new((0..n).map(|p| (block_end[p] - p - 1) as u64));
    let diff = PairIndex::new((0..n).map(|p| (n - block_end[p]) as u64));

    let mut rng = SplitMix64::labelled(seed, "indicators.class.same");
    let same_pairs = rng.sample_distinct(max_pairs as u64, same.total);
    let mut rng = SplitMix64::labelled(seed, "indicators.class.diff");
    let diff_pairs = rng.sample_distinct(max_pairs as u64, diff.total);

    let same_sims: Vec<f64> = same_pairs
        .par_iter()
        .map(|&k| {
            let (p, off) = same.locate(k);
            dot(&rows, p, &rows, p + 1 + off as usize, d)
        })
        .collect();
    let diff_sims: Vec<f64> = diff_pairs
        .par_iter()
        .map(|&k| {
            let (p, off) = diff.locate(k);
            dot(&rows, p, &rows, block_end[p] + off as usize, d)
        })
        .collect();
    HistogramPair::from_samples(&same_sims, &diff_sims, bins)
}

/// Image-image (`a`) and image-text (`b`) similarity histograms. Both sides
/// range over all ordered pairs (self-pairs included on the image side), so
/// identical image and text sets yield identical distributions.
pub fn modality_pair_histograms(
    images: &EmbeddingSet,
    texts: &EmbeddingSet,
    bins: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<HistogramPair> {
    if images.dim() != texts.dim() {
        return Err(Error::DimensionMismatch {
            expected: images.dim(),
            found: texts.dim(),
        });
    }
    if max_pairs == 0 {
        return Err(Error::InvalidParameter("max_pairs must be positive".into()));
    }
    let d = images.dim();
    let img = row_major(&*ensure_normalized(images)?);
    let txt = row_major(&*ensure_normalized(texts)?);
    let (n_i, n_t) = (images.len() as u64, texts.len() as u64);

    let mut rng = SplitMix64::labelled(seed, "indicators.modality.image");
    let ii = rng.sample_distinct(max_pairs as u64, n_i * n_i);
    let mut rng = SplitMix64::labelled(seed, "indicators.modality.text");
    let it = rng.sample_distinct(max_pairs as u64, n_i * n_t);

    let ii_sims: Vec<f64> = ii
        .par_iter()
        .map(|&k| dot(&img, (k / n_i) as usize, &img, (k % n_i) as usize, d))
        .collect();
    let it_sims: Vec<f64> = it
        .par_iter()
        .map(|&k| dot(&img, (k / n_t) as usize, &txt, (k % n_t) as usize, d))
        .collect();
    HistogramPair::from_samples(&ii_sims, &it_sims, bins)
}

/// Euclidean distance between the image centroid and the text centroid.
pub fn modality_gap(images: &EmbeddingSet, texts: &EmbeddingSet) -> Result<f64> {
    if images.dim() != texts.dim() {
        return Err(Error::DimensionMismatch {
            expected: images.dim(),
            found: texts.dim(),
        });
    }
    let img = ensure_normalized(images)?;
    let txt = ensure_normalized(texts)?;
    Ok((img.mean() - txt.mean()).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Modality;
    use crate::synthetic::{generate_labeled, generate_modality_pair, ConeSpec};

    fn set(rows: &[Vec<f64>], m: Modality) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows, m).unwrap()
    }

    #[test]
    fn separated_classes_have_no_overlap() {
        let e = set(
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
            Modality::Image,
        );
        let ds = LabeledEmbeddingSet::new(e, vec![0, 0, 1, 1]).unwrap();
        let h = class_pair_histograms(&ds, 100, 1000, 0).unwrap();
        assert_eq!(h.counts_a[99], 2);
        assert_eq!(h.counts_b[50], 4);
        assert_eq!(h.overlap, 0.0);
        assert_eq!(h.summary_a.mean, 1.0);
        assert_eq!(h.summary_b.mean, 0.0);
    }

    #[test]
    fn identical_embeddings_overlap_fully() {
        let e = set(&vec![vec![0.6, 0.8]; 6], Modality::Image);
        let ds = LabeledEmbeddingSet::new(e, vec![0, 0, 1, 1, 2, 2]).unwrap();
        let h = class_pair_histograms(&ds, 100, 1000, 0).unwrap();
        assert!((h.overlap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_shrinks_with_spread() {
        let overlap = |spread| {
            let ds = generate_labeled(&ConeSpec::new(16, 6, 30, spread, 17)).unwrap();
            class_pair_histograms(&ds, 100, 100_000, 1).unwrap().overlap
        };
        let (wide, mid, tight) = (overlap(0.5), overlap(0.25), overlap(0.1));
        assert!(wide > mid && mid > tight, "{wide} {mid} {tight}");
    }

    #[test]
    fn class_histograms_need_two_rows_per_class() {
        let e = set(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], Modality::Image);
        let ds = LabeledEmbeddingSet::new(e, vec![0, 0, 1]).unwrap();
        assert!(matches!(
            class_pair_histograms(&ds, 10, 10, 0),
            Err(Error::InsufficientClassData(_))
        ));
        let e = set(&[vec![1.0, 0.0], vec![1.0, 0.0]], Modality::Image);
        let ds = LabeledEmbeddingSet::new(e, vec![0, 0]).unwrap();
        assert!(class_pair_histograms(&ds, 10, 10, 0).is_err());
    }

    #[test]
    fn identical_modalities_overlap_fully() {
        let ds = generate_labeled(&ConeSpec::new(8, 3, 10, 0.4, 2)).unwrap();
        let imgs = ds.embeddings().clone();
        let txts = imgs.clone().with_modality(Modality::Text);
        let h = modality_pair_histograms(&imgs, &txts, 100, 10_000, 0).unwrap();
        assert_eq!(h.density_a, h.density_b);
        assert!((h.overlap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_clusters_have_no_overlap() {
        let imgs = set(&[vec![1.0, 0.01], vec![1.0, -0.01]], Modality::Image);
        let txts = set(&[vec![-1.0, 0.01], vec![-1.0, -0.02]], Modality::Text);
        let h = modality_pair_histograms(&imgs, &txts, 100, 100, 0).unwrap();
        assert_eq!(h.overlap, 0.0);
        assert!(h.summary_a.mean > 0.99);
        assert!(h.summary_b.mean < -0.99);
    }

    #[test]
    fn gapped_cones_favor_intra_modal_similarity() {
        let pair = generate_modality_pair(&ConeSpec::new(16, 5, 40, 0.4, 4).with_axis_offset(2.0)).unwrap();
        let h = modality_pair_histograms(pair.images.embeddings(), pair.texts.embeddings(), 100, 100_000, 3).unwrap();
        assert!(h.summary_a.mean > h.summary_b.mean);
    }

    #[test]
    fn gap_examples() {
        let a = set(&[vec![1.0, 0.0], vec![0.0, 1.0]], Modality::Image);
        assert_eq!(modality_gap(&a, &a).unwrap(), 0.0);
        let i = set(&vec![vec![1.0, 0.0, 0.0]; 3], Modality::Image);
        let t = set(&vec![vec![0.0, 1.0, 0.0]; 4], Modality::Text);
        assert!((modality_gap(&i, &t).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(modality_gap(&a, &t).is_err());
    }

    #[test]
    fn gap_matches_brute_force_centroids() {
        let pair = generate_modality_pair(&ConeSpec::new(6, 3, 8, 0.3, 12).with_axis_offset(1.5)).unwrap();
        let (img, txt) = (pair.images.embeddings().to_rows(), pair.texts.embeddings().to_rows());
        let mut sq = 0.0;
        for j in 0..6 {
            let mi: f64 = img.iter().map(|r| r[j]).sum::<f64>() / img.len() as f64;
            let mt: f64 = txt.iter().map(|r| r[j]).sum::<f64>() / txt.len() as f64;
            sq += (mi - mt).powi(2);
        }
        let gap = modality_gap(pair.images.embeddings(), pair.texts.embeddings()).unwrap();
        assert!((gap - sq.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sampling_caps_and_is_deterministic() {
        let ds = generate_labeled(&ConeSpec::new(8, 4, 20, 0.3, 6)).unwrap();
        let a = class_pair_histograms(&ds, 50, 100, 9).unwrap();
        let b = class_pair_histograms(&ds, 50, 100, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.summary_a.count, 100);
        assert_eq!(a.summary_b.count, 100);
        let full = class_pair_histograms(&ds, 50, usize::MAX, 9).unwrap();
        assert_eq!(full.summary_a.count, 4 * 190);
        assert_eq!(full.summary_b.count, 80 * 79 / 2 - 4 * 190);
    }

    #[test]
    fn refining_bins_is_stable() {
        let ds = generate_labeled(&ConeSpec::new(12, 5, 25, 0.35, 13)).unwrap();
        let hs: Vec<_> = [50, 100, 200]
            .iter()
            .map(|&b| class_pair_histograms(&ds, b, 50_000, 2).unwrap())
            .collect();
        for w in hs.windows(2) {
            let max_mass = w[0]
                .density_a
                .iter()
                .chain(&w[0].density_b)
                .fold(0.0f64, |m, &x| m.max(x));
            assert!(w[1].overlap <= w[0].overlap + max_mass);
        }
    }

    #[test]
    fn densities_sum_to_one_and_csv_shape() {
        let h = HistogramPair::from_samples(&[-1.0, 0.0, 1.0 + 1e-10], &[0.5], 4).unwrap();
        assert!((h.density_a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(h.counts_a, vec![1, 0, 1, 1]);
        let csv = h.to_csv().unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "bin_left,bin_right,density_a,density_b");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "-1,-0.5,0.3333333333333333,0");
    }

    #[test]
    fn overlap_is_symmetric() {
        let a = [0.1, 0.4, 0.5];
        let b = [0.3, 0.3, 0.4];
        assert_eq!(histogram_overlap(&a, &b), histogram_overlap(&b, &a));
    }
}
