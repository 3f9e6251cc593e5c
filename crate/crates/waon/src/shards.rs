//! Numbered output shards: image files named by digest plus a
//! `metadata.jsonl`, and an `index.json` listing them.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use waon_core::CaptionSource;

use crate::records::{write_json, PairRecord};

/// One line of a shard's `metadata.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// File name inside the shard directory.
    pub image_file: String,
    /// Image URL.
    pub image_url: String,
    /// Caption.
    pub caption: String,
    /// Caption origin.
    pub caption_source: CaptionSource,
    /// Page URL.
    pub page_url: String,
    /// Snapshot id.
    pub snapshot_id: String,
    /// Perceptual hash, 16 hex digits.
    pub phash_hex: String,
    /// NSFW score.
    pub nsfw: f64,
    /// Alignment score.
    pub align: f64,
    /// Width in pixels.
    pub width: u32,
    /// Height in pixels.
    pub height: u32,
}

impl ShardEntry {
    /// Entry for a fully processed record; `None` if a field is missing.
    pub fn from_record(r: &PairRecord) -> Option<Self> {
        let digest = r.image_digest.as_ref()?;
        let ext = r.image_ext.as_deref().unwrap_or("bin");
        Some(Self {
            image_file: format!("{digest}.{ext}"),
            image_url: r.image_url.clone(),
            caption: r.caption.clone(),
            caption_source: r.caption_source,
            page_url: r.page_url.clone(),
            snapshot_id: r.snapshot_id.clone(),
            phash_hex: r.phash_hex.clone()?,
            nsfw: r.nsfw?,
            align: r.align?,
            width: r.width?,
            height: r.height?,
        })
    }
}

impl From<&ShardEntry> for PairRecord {
    fn from(e: &ShardEntry) -> Self {
        let (digest, ext) = match e.image_file.rsplit_once('.') {
            Some((d, x)) => (d.to_string(), Some(x.to_string())),
            None => (e.image_file.clone(), None),
        };
        PairRecord {
            image_digest: Some(digest),
            image_url: e.image_url.clone(),
            caption: e.caption.clone(),
            caption_source: e.caption_source,
            page_url: e.page_url.clone(),
            snapshot_id: e.snapshot_id.clone(),
            phash_hex: Some(e.phash_hex.clone()),
            nsfw: Some(e.nsfw),
            align: Some(e.align),
            width: Some(e.width),
            height: Some(e.height),
            image_ext: ext,
        }
    }
}

/// A shard as listed in the index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    /// Directory name.
    pub name: String,
    /// Records in the shard.
    pub count: u64,
}

/// `index.json`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShardIndex {
    /// Shards in order.
    pub shards: Vec<ShardInfo>,
    /// Records across all shards.
    pub total: u64,
}

/// Name of shard `n`.
pub fn shard_name(n: usize) -> String {
    format!("shard-{n:05}")
}

struct Open {
    dir: PathBuf,
    meta: BufWriter<File>,
    count: u64,
}

/// Appends records to shards of `shard_size`, opening the next shard when
/// the current one is full.
pub struct ShardWriter {
    out: PathBuf,
    shard_size: u64,
    current: Option<Open>,
    index: ShardIndex,
}

impl ShardWriter {
    /// Writes below `out`. Panics if `shard_size` is zero.
    pub fn new(out: impl Into<PathBuf>, shard_size: u64) -> io::Result<Self> {
        assert!(shard_size >= 1, "shard_size must be at least 1");
        let out = out.into();
        fs::create_dir_all(&out)?;
        Ok(Self { out, shard_size, current: None, index: ShardIndex::default() })
    }

    fn close_current(&mut self) -> io::Result<()> {
        if let Some(open) = self.current.take() {
            open.meta.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            let name = open.dir.file_name().expect("shard dir has a name").to_string_lossy().into_owned();
            self.index.shards.push(ShardInfo { name, count: open.count });
        }
        Ok(())
    }

    /// Adds one entry and its image bytes.
    pub fn push(&mut self, entry: &ShardEntry, image: &[u8]) -> io::Result<()> {
        if self.current.as_ref().is_some_and(|c| c.count >= self.shard_size) {
            self.close_current()?;
        }
        if self.current.is_none() {
            let dir = self.out.join(shard_name(self.index.shards.len()));
            fs::create_dir_all(&dir)?;
            let meta = BufWriter::new(File::create(dir.join("metadata.jsonl"))?);
            self.current = Some(Open { dir, meta, count: 0 });
        }
        let open = self.current.as_mut().expect("shard is open");
        fs::write(open.dir.join(&entry.image_file), image)?;
        serde_json::to_writer(&mut open.meta, entry)?;
        open.meta.write_all(b"\n")?;
        open.count += 1;
        self.index.total += 1;
        Ok(())
    }

    /// Closes the last shard and writes `index.json`.
    pub fn finish(mut self) -> io::Result<ShardIndex> {
        self.close_current()?;
        write_json(&self.out.join("index.json"), &self.index)?;
        Ok(self.index)
    }
}

/// Reads every shard's metadata under `out`, in index order.
pub fn read_shards(out: &Path) -> io::Result<Vec<ShardEntry>> {
    let index: ShardIndex = crate::records::read_json(&out.join("index.json"))?;
    let mut all = Vec::new();
    for s in &index.shards {
        all.extend(crate::records::read_jsonl::<ShardEntry>(&out.join(&s.name).join("metadata.jsonl"))?);
    }
    Ok(all)
}
