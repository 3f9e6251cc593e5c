//! Score records, threshold filters, the alignment histogram and a
//! deterministic stand-in scorer.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_128_with_seed;

use crate::config::FilterConfig;

/// Allowed deviation of a row's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Model scores for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// Unsafe-content score in [0, 1].
    pub nsfw: f64,
    /// Image-text cosine similarity in [-1, 1].
    pub alignment: f64,
}

impl ScoreRecord {
    /// Whether both scores are finite and in range.
    pub fn is_valid(&self) -> bool {
        self.nsfw.is_finite()
            && self.alignment.is_finite()
            && (0.0..=1.0).contains(&self.nsfw)
            && (-1.0..=1.0).contains(&self.alignment)
    }
}

/// Malformed embedding input.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingError {
    /// Dimension of zero.
    ZeroDim,
    /// Buffer length not a multiple of the dimension, or batches of different sizes.
    Shape(&'static str),
    /// A row whose norm is off by more than [`NORM_TOLERANCE`].
    NotUnitNorm {
        /// Which matrix.
        matrix: &'static str,
        /// Row index.
        row: usize,
        /// Observed norm.
        norm: f64,
    },
}

impl fmt::Display for EmbeddingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingError::ZeroDim => f.write_str("embedding dimension is zero"),
            EmbeddingError::Shape(why) => write!(f, "embedding shape mismatch: {why}"),
            EmbeddingError::NotUnitNorm { matrix, row, norm } => {
                write!(f, "{matrix} row {row} has norm {norm}, expected 1")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EmbeddingError {}

/// Checks that `data` is a whole number of `dim`-wide unit rows.
pub(crate) fn check_unit_rows(matrix: &'static str, data: &[f32], dim: usize) -> Result<usize, EmbeddingError> {
    if dim == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    if !data.len().is_multiple_of(dim) {
        return Err(EmbeddingError::Shape("buffer length is not a multiple of dim"));
    }
    for (row, v) in data.chunks_exact(dim).enumerate() {
        let norm = libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum());
        if norm.is_nan() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnitNorm { matrix, row, norm });
        }
    }
    Ok(data.len() / dim)
}

/// Index-aligned unit-norm image and text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    image_vecs: Vec<f32>,
    text_vecs: Vec<f32>,
    dim: usize,
}

impl EmbeddingBatch {
    /// Validates shapes and norms.
    pub fn new(image_vecs: Vec<f32>, text_vecs: Vec<f32>, dim: usize) -> Result<Self, EmbeddingError> {
        let a = check_unit_rows("image_vecs", &image_vecs, dim)?;
        let b = check_unit_rows("text_vecs", &text_vecs, dim)?;
        if a != b {
            return Err(EmbeddingError::Shape("image and text batches differ in length"));
        }
        Ok(Self { image_vecs, text_vecs, dim })
    }

    /// Number of pairs.
    pub fn len(&self) -> usize {
        self.image_vecs.len() / self.dim
    }

    /// True when the batch holds no pairs.
    pub fn is_empty(&self) -> bool {
        self.image_vecs.is_empty()
    }

    /// Embedding width.
    pub fn dim(&self) -> usize {
        self.dim
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Row-wise cosine similarity, clamped to [-1, 1].
pub fn cosine_scores(batch: &EmbeddingBatch) -> Vec<f64> {
    batch
        .image_vecs
        .chunks_exact(batch.dim)
        .zip(batch.text_vecs.chunks_exact(batch.dim))
        .map(|(i, t)| dot(i, t).clamp(-1.0, 1.0))
        .collect()
}

/// Number of histogram bins over [-1, 1].
pub const HISTOGRAM_BINS: usize = 200;

/// Alignment scores bucketed in 0.01-wide bins over [-1, 1]; the last bin
/// is closed on the right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentHistogram {
    /// Left edge of the first bin.
    pub lo: i32,
    /// Right edge of the last bin.
    pub hi: i32,
    /// Per-bin counts, `HISTOGRAM_BINS` long.
    pub counts: Vec<u64>,
}

impl Default for AlignmentHistogram {
    fn default() -> Self {
        Self { lo: -1, hi: 1, counts: vec![0; HISTOGRAM_BINS] }
    }
}

impl AlignmentHistogram {
    /// Bin index of `score`; out-of-range scores land in the end bins.
    pub fn bin_of(score: f64) -> usize {
        let idx = libm::floor((score + 1.0) * 100.0);
        if idx.is_nan() || idx < 0.0 {
            0
        } else {
            (idx as usize).min(HISTOGRAM_BINS - 1)
        }
    }

    /// Adds one observation.
    pub fn add(&mut self, score: f64) {
        self.counts[Self::bin_of(score)] += 1;
    }

    /// Adds another histogram's counts.
    pub fn merge(&mut self, other: &AlignmentHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Sum of all bins.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Keeps items with `alignment >= cfg.alignment_min`; every input score
/// goes into the returned histogram.
pub fn filter_by_alignment<T>(items: Vec<(T, ScoreRecord)>, cfg: &FilterConfig) -> (Vec<(T, ScoreRecord)>, AlignmentHistogram) {
    let mut hist = AlignmentHistogram::default();
    let kept = items
        .into_iter()
        .filter(|(_, s)| {
            hist.add(s.alignment);
            s.alignment >= cfg.alignment_min
        })
        .collect();
    (kept, hist)
}

/// Keeps items with `nsfw <= cfg.nsfw_max`.
pub fn filter_by_nsfw<T>(items: Vec<(T, ScoreRecord)>, cfg: &FilterConfig) -> Vec<(T, ScoreRecord)> {
    items.into_iter().filter(|(_, s)| s.nsfw <= cfg.nsfw_max).collect()
}

const MOCK_SEED: u64 = 0x6d6f_636b_5f73_636f;

fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic scores from a keyed hash of the image digest and caption.
///
/// `nsfw = u^8` puts most mass near zero, `alignment = 0.6 v - 0.2` spans
/// [-0.2, 0.4), so with default thresholds roughly a quarter of pairs fail
/// the NSFW check and half fail alignment.
pub fn mock_scorer(image_digest: &[u8], caption: &str) -> ScoreRecord {
    let mut buf = Vec::with_capacity(image_digest.len() + caption.len() + 8);
    buf.extend_from_slice(&(image_digest.len() as u64).to_le_bytes());
    buf.extend_from_slice(image_digest);
    buf.extend_from_slice(caption.as_bytes());
    let h = xxh3_128_with_seed(&buf, MOCK_SEED);
    let u = unit_interval(h as u64);
    let v = unit_interval((h >> 64) as u64);
    ScoreRecord { nsfw: libm::pow(u, 8.0), alignment: 0.6 * v - 0.2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(nsfw: f64, alignment: f64) -> ScoreRecord {
        ScoreRecord { nsfw, alignment }
    }

    #[test]
    fn cosine_examples() {
        let b = EmbeddingBatch::new(vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 2).unwrap();
        let s = cosine_scores(&b);
        assert_eq!(s.len(), 3);
        assert!((s[0] - 1.0).abs() < 1e-6);
        assert!(s[1].abs() < 1e-6);
        assert!((s[2] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn batch_validation() {
        assert_eq!(EmbeddingBatch::new(vec![], vec![], 0), Err(EmbeddingError::ZeroDim));
        assert!(matches!(
            EmbeddingBatch::new(vec![2.0, 0.0], vec![1.0, 0.0], 2),
            Err(EmbeddingError::NotUnitNorm { matrix: "image_vecs", row: 0, .. })
        ));
        assert!(matches!(EmbeddingBatch::new(vec![1.0, 0.0], vec![], 2), Err(EmbeddingError::Shape(_))));
        assert!(matches!(EmbeddingBatch::new(vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0], 2), Err(EmbeddingError::Shape(_))));
    }

    #[test]
    fn alignment_threshold_examples() {
        let cfg = FilterConfig::default();
        let (kept, _) = filter_by_alignment(vec![(0, rec(0.0, 0.09)), (1, rec(0.0, 0.10))], &cfg);
        assert_eq!(kept.iter().map(|x| x.0).collect::<Vec<_>>(), [1]);
        let (kept, hist) = filter_by_alignment(vec![(0, rec(0.0, -0.2)), (1, rec(0.0, 0.1)), (2, rec(0.0, 0.5))], &cfg);
        assert_eq!(kept.len(), 2);
        assert_eq!(hist.total(), 3);
    }

    #[test]
    fn nsfw_threshold_examples() {
        let cfg = FilterConfig::default();
        let kept = filter_by_nsfw(vec![(0, rec(0.11, 0.0)), (1, rec(0.10, 0.0)), (2, rec(0.0, 0.0))], &cfg);
        assert_eq!(kept.iter().map(|x| x.0).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(AlignmentHistogram::bin_of(-1.0), 0);
        assert_eq!(AlignmentHistogram::bin_of(-2.0), 0);
        assert_eq!(AlignmentHistogram::bin_of(0.0), 100);
        assert_eq!(AlignmentHistogram::bin_of(0.105), 110);
        assert_eq!(AlignmentHistogram::bin_of(1.0), 199);
        assert_eq!(AlignmentHistogram::bin_of(f64::NAN), 0);
    }

    #[test]
    fn mock_scorer_is_deterministic_and_sensitive() {
        let a = mock_scorer(b"digest", "猫の写真");
        assert_eq!(a, mock_scorer(b"digest", "猫の写真"));
        assert_ne!(a, mock_scorer(b"digest", "犬の写真"));
        assert!(a.is_valid());
    }
}
