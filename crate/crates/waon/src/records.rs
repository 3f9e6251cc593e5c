//! The line-delimited JSON record passed between stages, and the
//! content-addressed blob directory holding image bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use waon_core::{CaptionSource, DedupKey, DedupSubject, KeyKind, PHash, PairCandidate, ScoreRecord};

/// One pair and everything later stages learned about it. Fields are
/// filled as the record moves down the pipeline; unset ones are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    /// SHA-256 hex of the image bytes, naming the blob.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_digest: Option<String>,
    /// Normalized image URL.
    pub image_url: String,
    /// Caption text.
    pub caption: String,
    /// Caption origin.
    pub caption_source: CaptionSource,
    /// Page the pair was found on.
    pub page_url: String,
    /// Snapshot id.
    pub snapshot_id: String,
    /// Perceptual hash, 16 hex digits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phash_hex: Option<String>,
    /// NSFW score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nsfw: Option<f64>,
    /// Image-text alignment score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    /// Decoded width in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    /// Decoded height in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    /// Image format extension (`jpg`, `png`, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ext: Option<String>,
}

impl PairRecord {
    /// Both scores, if present.
    pub fn scores(&self) -> Option<ScoreRecord> {
        Some(ScoreRecord { nsfw: self.nsfw?, alignment: self.align? })
    }

    /// Parsed perceptual hash.
    pub fn phash(&self) -> Option<PHash> {
        self.phash_hex.as_deref().and_then(PHash::from_hex)
    }
}

impl From<PairCandidate> for PairRecord {
    fn from(c: PairCandidate) -> Self {
        Self {
            image_digest: None,
            image_url: c.image_url,
            caption: c.caption,
            caption_source: c.caption_source,
            page_url: c.page_url,
            snapshot_id: c.snapshot_id,
            phash_hex: None,
            nsfw: None,
            align: None,
            width: None,
            height: None,
            image_ext: None,
        }
    }
}

impl From<&PairRecord> for PairCandidate {
    fn from(r: &PairRecord) -> Self {
        let mut stage_scores = BTreeMap::new();
        if let Some(v) = r.nsfw {
            stage_scores.insert("nsfw".to_string(), v);
        }
        if let Some(v) = r.align {
            stage_scores.insert("align".to_string(), v);
        }
        PairCandidate {
            image_url: r.image_url.clone(),
            caption: r.caption.clone(),
            caption_source: r.caption_source,
            page_url: r.page_url.clone(),
            snapshot_id: r.snapshot_id.clone(),
            stage_scores,
        }
    }
}

impl DedupSubject for PairRecord {
    fn dedup_key(&self, kind: KeyKind) -> Option<DedupKey> {
        match kind {
            KeyKind::ImageUrl => Some(DedupKey::image_url(&self.image_url)),
            KeyKind::Caption => Some(DedupKey::caption(&self.caption)),
            KeyKind::Phash => self.phash().map(DedupKey::phash),
        }
    }
}

/// Lowercase hex of `bytes`.
pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// SHA-256 of `bytes`.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Reads one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Writes one JSON value per line, replacing `path` atomically.
pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> io::Result<()> {
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Writes pretty JSON with a trailing newline, replacing `path` atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

/// Reads a JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> io::Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp)?);
    body(&mut w)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(&tmp, path)
}

/// Directory of image bytes keyed by their SHA-256 hex digest.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    /// Opens (creating) `root`.
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    /// The store's directory.
    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, digest: &str) -> io::Result<PathBuf> {
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad blob digest {digest:?}")));
        }
        Ok(self.root.join(&digest[..2]).join(digest))
    }

    /// Stores `bytes`, returning their digest. Existing blobs are kept.
    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let digest = hex(&sha256(bytes));
        let path = self.path(&digest)?;
        if !path.exists() {
            fs::create_dir_all(path.parent().expect("blob path has a parent"))?;
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, bytes)?;
            fs::rename(&tmp, &path)?;
        }
        Ok(digest)
    }

    /// Bytes stored under `digest`.
    pub fn get(&self, digest: &str) -> io::Result<Vec<u8>> {
        fs::read(self.path(digest)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> PairRecord {
        PairRecord::from(PairCandidate {
            image_url: "http://a.jp/i.png".into(),
            caption: "猫".into(),
            caption_source: CaptionSource::Figcaption,
            page_url: "http://a.jp/".into(),
            snapshot_id: "2025-18".into(),
            stage_scores: BTreeMap::new(),
        })
    }

    #[test]
    fn unset_fields_are_omitted_and_order_is_fixed() {
        let mut r = record();
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"image_url":"http://a.jp/i.png","caption":"猫","caption_source":"figcaption","page_url":"http://a.jp/","snapshot_id":"2025-18"}"#
        );
        r.nsfw = Some(0.25);
        r.phash_hex = Some("00ff00ff00ff00ff".into());
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.ends_with(r#""snapshot_id":"2025-18","phash_hex":"00ff00ff00ff00ff","nsfw":0.25}"#), "{s}");
        assert_eq!(serde_json::from_str::<PairRecord>(&s).unwrap(), r);
    }

    #[test]
    fn dedup_keys() {
        let mut r = record();
        assert!(r.dedup_key(KeyKind::Phash).is_none());
        r.phash_hex = Some("8000000000000001".into());
        assert_eq!(r.dedup_key(KeyKind::Phash), Some(DedupKey::phash(PHash(0x8000_0000_0000_0001))));
        assert_eq!(r.dedup_key(KeyKind::Caption), Some(DedupKey::caption("猫")));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/pairs.jsonl");
        let rs = vec![record(), record()];
        write_jsonl(&p, &rs).unwrap();
        assert_eq!(read_jsonl::<PairRecord>(&p).unwrap(), rs);
        fs::write(&p, "{}\n").unwrap();
        let err = read_jsonl::<PairRecord>(&p).unwrap_err();
        assert!(err.to_string().contains("pairs.jsonl:1"));
    }

    #[test]
    fn blobs_are_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let d = store.put(b"abc").unwrap();
        assert_eq!(d, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(store.put(b"abc").unwrap(), d);
        assert_eq!(store.get(&d).unwrap(), b"abc");
        assert!(store.get("../etc/passwd").is_err());
    }
}
