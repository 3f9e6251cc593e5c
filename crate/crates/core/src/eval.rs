//! Zero-shot top-1 classification accuracy and cross-modal recall@1.
//!
//! Similarities are dot products of unit rows accumulated in f64. Ties go to
//! the lowest index.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::scoring::{check_unit_rows, dot, EmbeddingError};

/// Invalid evaluation input.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    /// Embedding shape or norm problem.
    Embedding(EmbeddingError),
    /// Labels do not match the image count.
    LabelCount {
        /// Number of images.
        images: usize,
        /// Number of labels.
        labels: usize,
    },
    /// A label outside `[0, classes)`.
    LabelRange {
        /// Row index.
        row: usize,
        /// The label.
        label: usize,
        /// Number of classes.
        classes: usize,
    },
    /// Image and text sides differ in row count or dim.
    Mismatch,
    /// Nothing to evaluate.
    Empty,
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Embedding(e) => write!(f, "{e}"),
            EvalError::LabelCount { images, labels } => write!(f, "{labels} labels for {images} images"),
            EvalError::LabelRange { row, label, classes } => {
                write!(f, "label {label} at row {row} is outside [0, {classes})")
            }
            EvalError::Mismatch => f.write_str("image and text embeddings differ in shape"),
            EvalError::Empty => f.write_str("no rows to evaluate"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for EvalError {}

impl From<EmbeddingError> for EvalError {
    fn from(e: EmbeddingError) -> Self {
        EvalError::Embedding(e)
    }
}

/// Images, one text embedding per class, and ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationEval {
    image_vecs: Vec<f32>,
    class_text_vecs: Vec<f32>,
    labels: Vec<usize>,
    dim: usize,
}

impl ClassificationEval {
    /// Validates norms, shapes and label range.
    pub fn new(image_vecs: Vec<f32>, class_text_vecs: Vec<f32>, labels: Vec<usize>, dim: usize) -> Result<Self, EvalError> {
        let n = check_unit_rows("image_vecs", &image_vecs, dim)?;
        let c = check_unit_rows("class_text_vecs", &class_text_vecs, dim)?;
        if n == 0 || c == 0 {
            return Err(EvalError::Empty);
        }
        if labels.len() != n {
            return Err(EvalError::LabelCount { images: n, labels: labels.len() });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(EvalError::LabelRange { row, label, classes: c });
        }
        Ok(Self { image_vecs, class_text_vecs, labels, dim })
    }

    /// Predicted class per image.
    pub fn predictions(&self) -> Vec<usize> {
        self.image_vecs.chunks_exact(self.dim).map(|img| argmax(img, &self.class_text_vecs, self.dim)).collect()
    }
}

/// Index-aligned image and text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEval {
    image_vecs: Vec<f32>,
    text_vecs: Vec<f32>,
    dim: usize,
}

impl RetrievalEval {
    /// Validates norms and that both sides have the same row count.
    pub fn new(image_vecs: Vec<f32>, text_vecs: Vec<f32>, dim: usize) -> Result<Self, EvalError> {
        let a = check_unit_rows("image_vecs", &image_vecs, dim)?;
        let b = check_unit_rows("text_vecs", &text_vecs, dim)?;
        if a != b {
            return Err(EvalError::Mismatch);
        }
        if a == 0 {
            return Err(EvalError::Empty);
        }
        Ok(Self { image_vecs, text_vecs, dim })
    }
}

/// Query modality for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalDirection {
    /// Image queries against the text gallery.
    ImageToText,
    /// Text queries against the image gallery.
    TextToImage,
}

/// Index of the gallery row most similar to `query`; the first wins ties.
fn argmax(query: &[f32], gallery: &[f32], dim: usize) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, row) in gallery.chunks_exact(dim).enumerate() {
        let s = dot(query, row);
        if s > best_sim {
            best = j;
            best_sim = s;
        }
    }
    best
}

/// Fraction of images whose most similar class text is the true class.
pub fn top1_accuracy(eval: &ClassificationEval) -> f64 {
    let correct = eval.predictions().iter().zip(&eval.labels).filter(|(p, l)| p == l).count();
    correct as f64 / eval.labels.len() as f64
}

/// Fraction of queries whose nearest gallery item is their aligned partner.
pub fn recall_at_1(eval: &RetrievalEval, direction: RetrievalDirection) -> f64 {
    let (queries, gallery) = match direction {
        RetrievalDirection::ImageToText => (&eval.image_vecs, &eval.text_vecs),
        RetrievalDirection::TextToImage => (&eval.text_vecs, &eval.image_vecs),
    };
    let n = queries.len() / eval.dim;
    let hits = queries.chunks_exact(eval.dim).enumerate().filter(|(i, q)| argmax(q, gallery, eval.dim) == *i).count();
    hits as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn identity(n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v
    }

    #[test]
    fn identity_classification() {
        let e = ClassificationEval::new(identity(3), identity(3), vec![0, 1, 2], 3).unwrap();
        assert_eq!(top1_accuracy(&e), 1.0);
        let e = ClassificationEval::new(identity(3), identity(3), vec![1, 2, 0], 3).unwrap();
        assert_eq!(top1_accuracy(&e), 0.0);
    }

    #[test]
    fn identity_retrieval() {
        let e = RetrievalEval::new(identity(4), identity(4), 4).unwrap();
        assert_eq!(recall_at_1(&e, RetrievalDirection::ImageToText), 1.0);
        assert_eq!(recall_at_1(&e, RetrievalDirection::TextToImage), 1.0);
    }

    #[test]
    fn swapped_pairs_retrieve_nothing() {
        let images = vec![1.0, 0.0, 0.0, 1.0];
        let texts = vec![0.0, 1.0, 1.0, 0.0];
        let e = RetrievalEval::new(images, texts, 2).unwrap();
        assert_eq!(recall_at_1(&e, RetrievalDirection::ImageToText), 0.0);
        assert_eq!(recall_at_1(&e, RetrievalDirection::TextToImage), 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // both classes equally similar to the image
        let s = core::f32::consts::FRAC_1_SQRT_2;
        let e = ClassificationEval::new(vec![s, s], vec![1.0, 0.0, 0.0, 1.0], vec![0], 2).unwrap();
        assert_eq!(e.predictions(), [0]);
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(
            ClassificationEval::new(identity(2), identity(2), vec![0], 2),
            Err(EvalError::LabelCount { images: 2, labels: 1 })
        );
        assert_eq!(
            ClassificationEval::new(identity(2), identity(2), vec![0, 2], 2),
            Err(EvalError::LabelRange { row: 1, label: 2, classes: 2 })
        );
        assert_eq!(RetrievalEval::new(identity(2), vec![1.0, 0.0], 2), Err(EvalError::Mismatch));
        assert_eq!(RetrievalEval::new(vec![], vec![], 2), Err(EvalError::Empty));
    }
}
