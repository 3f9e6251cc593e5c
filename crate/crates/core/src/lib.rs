//! Allocation-only building blocks for curating web-scale image-text pair
//! datasets.
//!
//! Everything in this crate is a pure function over in-memory values: Bloom
//! filter deduplication, DCT perceptual hashing, heuristic image gates, score
//! thresholds, per-stage accounting and zero-shot metrics. IO, HTML parsing,
//! image decoding and networking live in the `waon` crate.
#![no_std]
#![deny(missing_docs)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod bloom;
pub mod config;
pub mod dedup;
pub mod eval;
pub mod image;
pub mod japanese;
pub mod lang;
pub mod pair;
pub mod phash;
pub mod scoring;
pub mod stats;

pub use bloom::{BloomError, BloomFilter, BloomParams};
pub use config::{ConfigError, FilterConfig};
pub use dedup::{
    dedup_stage, merge_snapshots, DedupKey, DedupOutcome, DedupSubject, Deduplicator, KeyKind, MergeError, MergeReport,
    SnapshotCount,
};
pub use eval::{recall_at_1, top1_accuracy, ClassificationEval, EvalError, RetrievalDirection, RetrievalEval};
pub use image::{count_unique_colors, quality_gate, DecodedImage, ImageError, QualityReject, SourceFormat};
pub use japanese::contains_japanese;
pub use lang::{gate, Detection, HtmlDoc, LangConfig, LangDecision, LangMethod, LanguageDetector, ScriptDetector};
pub use pair::{CaptionSource, PairCandidate};
pub use phash::{phash, PHash};
pub use scoring::{
    cosine_scores, filter_by_alignment, filter_by_nsfw, mock_scorer, AlignmentHistogram, EmbeddingBatch,
    EmbeddingError, ScoreRecord,
};
pub use stats::{summarize, Stage, StageLedger, StageStats, StatsError, Summary};
