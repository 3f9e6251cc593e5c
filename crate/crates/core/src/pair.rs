//! The (image URL, caption) candidate that flows through the pipeline.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::dedup::{DedupKey, DedupSubject, KeyKind};
use crate::japanese::contains_japanese;

/// Where a caption was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    /// The `alt` attribute of an `<img>`.
    AltAttr,
    /// The `<figcaption>` of the enclosing `<figure>`.
    Figcaption,
}

impl CaptionSource {
    /// Wire name.
    pub fn as_str(self) -> &'static str {
        match self {
            CaptionSource::AltAttr => "alt_attr",
            CaptionSource::Figcaption => "figcaption",
        }
    }
}

/// An image URL paired with a caption found on a page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCandidate {
    /// Absolute, normalized http(s) URL.
    pub image_url: String,
    /// Trimmed caption text with at least one Japanese code point.
    pub caption: String,
    /// Origin of `caption`.
    pub caption_source: CaptionSource,
    /// Page the pair was found on.
    pub page_url: String,
    /// Crawl the page belongs to, e.g. `2025-18`.
    pub snapshot_id: String,
    /// Scores attached by later stages.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_scores: BTreeMap<String, f64>,
}

impl PairCandidate {
    /// Checks the caption half of the candidate invariants. URL validity is
    /// established by the normalizer that produced `image_url`.
    pub fn caption_is_valid(&self) -> bool {
        !self.caption.trim().is_empty() && contains_japanese(&self.caption)
    }
}

impl DedupSubject for PairCandidate {
    fn dedup_key(&self, kind: KeyKind) -> Option<DedupKey> {
        match kind {
            KeyKind::ImageUrl => Some(DedupKey::image_url(&self.image_url)),
            KeyKind::Caption => Some(DedupKey::caption(&self.caption)),
            KeyKind::Phash => None,
        }
    }
}
