//! Exact-match deduplication over URL, caption and pHash keys, backed by one
//! Bloom filter per key kind.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;
use xxhash_rust::xxh3::xxh3_128;

use crate::bloom::{BloomError, BloomFilter, BloomParams};
use crate::phash::PHash;

/// Which value a key is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    /// Normalized image URL.
    ImageUrl,
    /// NFC-normalized, trimmed caption.
    Caption,
    /// 64-bit perceptual hash.
    Phash,
}

impl KeyKind {
    /// All kinds, in the order drops are attributed.
    pub const ALL: [KeyKind; 3] = [KeyKind::ImageUrl, KeyKind::Caption, KeyKind::Phash];

    /// Wire name.
    pub fn as_str(self) -> &'static str {
        match self {
            KeyKind::ImageUrl => "image_url",
            KeyKind::Caption => "caption",
            KeyKind::Phash => "phash",
        }
    }

    /// Reject reason recorded when this kind triggers a drop.
    pub fn reject_reason(self) -> &'static str {
        match self {
            KeyKind::ImageUrl => "duplicate_image_url",
            KeyKind::Caption => "duplicate_caption",
            KeyKind::Phash => "duplicate_phash",
        }
    }
}

/// 128-bit digest of a value's canonical bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DedupKey {
    /// Value kind.
    pub kind: KeyKind,
    /// xxh3-128 of the canonical bytes.
    pub value_hash: u128,
}

impl DedupKey {
    /// Key of an already normalized URL string.
    pub fn image_url(url: &str) -> Self {
        Self { kind: KeyKind::ImageUrl, value_hash: xxh3_128(url.as_bytes()) }
    }

    /// Key of a caption: trimmed, then Unicode NFC. No case folding.
    pub fn caption(caption: &str) -> Self {
        let canonical: String = caption.trim().nfc().collect();
        Self { kind: KeyKind::Caption, value_hash: xxh3_128(canonical.as_bytes()) }
    }

    /// Key of a perceptual hash, as its 8 big-endian bytes.
    pub fn phash(hash: PHash) -> Self {
        Self { kind: KeyKind::Phash, value_hash: xxh3_128(&hash.0.to_be_bytes()) }
    }
}

/// Something that can be deduplicated by one or more key kinds.
pub trait DedupSubject {
    /// Key for `kind`, or `None` when the value is not available yet.
    fn dedup_key(&self, kind: KeyKind) -> Option<DedupKey>;
}

/// A set of per-kind filters applied in one pass.
///
/// An item is dropped when any requested kind has been seen before. All of
/// its keys are inserted regardless, so the key spaces stay consistent no
/// matter which kind triggered the drop.
#[derive(Debug, Clone)]
pub struct Deduplicator {
    filters: BTreeMap<KeyKind, BloomFilter>,
}

impl Deduplicator {
    /// Fresh filters for `kinds`, each sized by `params`.
    pub fn new(kinds: &[KeyKind], params: &BloomParams) -> Result<Self, BloomError> {
        let mut filters = BTreeMap::new();
        for &kind in kinds {
            filters.insert(kind, BloomFilter::from_params(params)?);
        }
        Ok(Self { filters })
    }

    /// Wraps existing filters (e.g. restored from disk).
    pub fn from_filters(filters: BTreeMap<KeyKind, BloomFilter>) -> Self {
        Self { filters }
    }

    /// Kinds this deduplicator checks.
    pub fn kinds(&self) -> impl Iterator<Item = KeyKind> + '_ {
        self.filters.keys().copied()
    }

    /// The filters, e.g. for persisting.
    pub fn filters(&self) -> &BTreeMap<KeyKind, BloomFilter> {
        &self.filters
    }

    /// Consumes into the filter map.
    pub fn into_filters(self) -> BTreeMap<KeyKind, BloomFilter> {
        self.filters
    }

    /// `Ok(())` if `item` is new, else the first kind (in [`KeyKind::ALL`]
    /// order) that reported a previous occurrence.
    pub fn admit<T: DedupSubject + ?Sized>(&mut self, item: &T) -> Result<(), KeyKind> {
        let mut first_seen = None;
        for (&kind, filter) in self.filters.iter_mut() {
            if let Some(key) = item.dedup_key(kind) {
                if filter.check_and_insert(key.value_hash) && first_seen.is_none() {
                    first_seen = Some(kind);
                }
            }
        }
        match first_seen {
            Some(kind) => Err(kind),
            None => Ok(()),
        }
    }
}

/// Survivors of one dedup pass plus per-kind drop counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome<T> {
    /// First occurrences, in input order.
    pub survivors: Vec<T>,
    /// Drops attributed to each kind.
    pub dropped: BTreeMap<KeyKind, u64>,
}

/// Runs `dedup` over `items` in order, keeping first occurrences.
pub fn dedup_stage<T, I>(items: I, dedup: &mut Deduplicator) -> DedupOutcome<T>
where
    T: DedupSubject,
    I: IntoIterator<Item = T>,
{
    let mut survivors = Vec::new();
    let mut dropped = BTreeMap::new();
    for item in items {
        match dedup.admit(&item) {
            Ok(()) => survivors.push(item),
            Err(kind) => *dropped.entry(kind).or_insert(0) += 1,
        }
    }
    DedupOutcome { survivors, dropped }
}

/// Rejected merge input.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeError {
    /// The same snapshot id appears twice.
    DuplicateSnapshot(String),
    /// Filter sizing failed.
    Bloom(BloomError),
}

impl fmt::Display for MergeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeError::DuplicateSnapshot(id) => write!(f, "snapshot {id} listed more than once"),
            MergeError::Bloom(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MergeError {}

impl From<BloomError> for MergeError {
    fn from(e: BloomError) -> Self {
        MergeError::Bloom(e)
    }
}

/// Per-snapshot bookkeeping of a cross-snapshot merge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotCount {
    /// Snapshot id.
    pub snapshot_id: String,
    /// Items fed in.
    pub input: u64,
    /// Items that survived.
    pub survivors: u64,
}

/// Result of [`merge_snapshots`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    /// One entry per snapshot, in consumption order.
    pub snapshots: Vec<SnapshotCount>,
    /// Sum of survivors.
    pub total: u64,
}

/// Deduplicates snapshot outputs against each other over URL, caption and
/// pHash, consuming them in the given order (newest first). Returns the
/// survivors of every snapshot, concatenated in that order.
pub fn merge_snapshots<T: DedupSubject>(
    snapshots: Vec<(String, Vec<T>)>,
    params: &BloomParams,
) -> Result<(Vec<T>, MergeReport), MergeError> {
    let mut ids = BTreeSet::new();
    for (id, _) in &snapshots {
        if !ids.insert(id.clone()) {
            return Err(MergeError::DuplicateSnapshot(id.clone()));
        }
    }
    let mut dedup = Deduplicator::new(&KeyKind::ALL, params)?;
    let mut all = Vec::new();
    let mut counts = Vec::with_capacity(snapshots.len());
    for (snapshot_id, items) in snapshots {
        let input = items.len() as u64;
        let out = dedup_stage(items, &mut dedup);
        counts.push(SnapshotCount { snapshot_id, input, survivors: out.survivors.len() as u64 });
        all.extend(out.survivors);
    }
    let total = counts.iter().map(|c| c.survivors).sum();
    Ok((all, MergeReport { snapshots: counts, total }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[derive(Debug, Clone, PartialEq)]
    struct Item {
        url: &'static str,
        caption: &'static str,
        phash: Option<u64>,
    }

    impl DedupSubject for Item {
        fn dedup_key(&self, kind: KeyKind) -> Option<DedupKey> {
            match kind {
                KeyKind::ImageUrl => Some(DedupKey::image_url(self.url)),
                KeyKind::Caption => Some(DedupKey::caption(self.caption)),
                KeyKind::Phash => self.phash.map(|h| DedupKey::phash(PHash(h))),
            }
        }
    }

    fn it(url: &'static str, caption: &'static str) -> Item {
        Item { url, caption, phash: None }
    }

    fn small() -> BloomParams {
        BloomParams { capacity: 1000, target_fpr: 0.001, seed: 1 }
    }

    #[test]
    fn url_duplicates_keep_first() {
        let mut d = Deduplicator::new(&[KeyKind::ImageUrl], &small()).unwrap();
        let out = dedup_stage(vec![it("u1", "c1"), it("u1", "c2")], &mut d);
        assert_eq!(out.survivors, vec![it("u1", "c1")]);
        assert_eq!(out.dropped[&KeyKind::ImageUrl], 1);
    }

    #[test]
    fn caption_duplicates_keep_first() {
        let mut d = Deduplicator::new(&[KeyKind::Caption], &small()).unwrap();
        let out = dedup_stage(vec![it("u1", "c1"), it("u2", "c1")], &mut d);
        assert_eq!(out.survivors, vec![it("u1", "c1")]);
    }

    #[test]
    fn distinct_keys_all_survive() {
        let mut d = Deduplicator::new(&[KeyKind::ImageUrl, KeyKind::Caption], &small()).unwrap();
        let out = dedup_stage(vec![it("u1", "c1"), it("u2", "c2")], &mut d);
        assert_eq!(out.survivors.len(), 2);
    }

    #[test]
    fn dropped_items_still_insert_all_keys() {
        let mut d = Deduplicator::new(&[KeyKind::ImageUrl, KeyKind::Caption], &small()).unwrap();
        // second item dropped for its URL; its caption c2 must still be recorded
        let out = dedup_stage(vec![it("u1", "c1"), it("u1", "c2"), it("u3", "c2")], &mut d);
        assert_eq!(out.survivors, vec![it("u1", "c1")]);
        assert_eq!(out.dropped[&KeyKind::ImageUrl], 1);
        assert_eq!(out.dropped[&KeyKind::Caption], 1);
    }

    #[test]
    fn caption_key_is_nfc_and_trimmed_but_case_sensitive() {
        // "が" precomposed vs "か" + combining voiced mark
        assert_eq!(DedupKey::caption("\u{304C}"), DedupKey::caption(" \u{304B}\u{3099} "));
        assert_ne!(DedupKey::caption("Cat 猫"), DedupKey::caption("cat 猫"));
        assert_ne!(DedupKey::caption("a  b"), DedupKey::caption("a b"));
    }

    #[test]
    fn missing_phash_is_never_a_duplicate() {
        let mut d = Deduplicator::new(&[KeyKind::Phash], &small()).unwrap();
        let out = dedup_stage(vec![it("u1", "c1"), it("u1", "c1")], &mut d);
        assert_eq!(out.survivors.len(), 2);
    }

    #[test]
    fn merge_disjoint_and_contained() {
        let a = vec![it("a1", "ca1"), it("a2", "ca2")];
        let b = vec![it("a1", "ca1")];
        let c = vec![it("c1", "cc1")];
        let (all, report) = merge_snapshots(
            vec![("2025-18".to_string(), a), ("2025-08".to_string(), b), ("2024-51".to_string(), c)],
            &small(),
        )
        .unwrap();
        assert_eq!(all.len(), 3);
        let surv: Vec<u64> = report.snapshots.iter().map(|s| s.survivors).collect();
        assert_eq!(surv, [2, 0, 1]);
        assert_eq!(report.total, 3);
    }

    #[test]
    fn merge_dedups_by_phash_across_snapshots() {
        let a = vec![Item { url: "a", caption: "x", phash: Some(7) }];
        let b = vec![Item { url: "b", caption: "y", phash: Some(7) }];
        let (_, report) = merge_snapshots(vec![("new".to_string(), a), ("old".to_string(), b)], &small()).unwrap();
        assert_eq!(report.snapshots[1].survivors, 0);
    }

    #[test]
    fn merge_rejects_duplicate_snapshot_ids() {
        let err = merge_snapshots::<Item>(vec![("x".to_string(), vec![]), ("x".to_string(), vec![])], &small());
        assert_eq!(err.unwrap_err(), MergeError::DuplicateSnapshot("x".to_string()));
    }
}
