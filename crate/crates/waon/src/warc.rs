//! Streaming WARC 1.0/1.1 reader with per-record gzip detection, plus a
//! small writer used for fixtures.
//!
//! Unparseable records are skipped and counted; the only fatal error is a
//! gzip member that cannot be decoded at the very start of the stream (or an
//! IO failure of the underlying source in plain mode).

use std::io::{self, BufRead, BufReader, Read, Write};

use flate2::bufread::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

/// Default cap on a single record's body.
pub const DEFAULT_MAX_RECORD_BYTES: u64 = 8 * 1024 * 1024;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// `WARC-Type` values we distinguish.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    /// `response`
    Response,
    /// `request`
    Request,
    /// `metadata`
    Metadata,
    /// Anything else (`warcinfo`, `resource`, `revisit`, ...).
    Other,
}

impl RecordType {
    fn parse(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "response" => RecordType::Response,
            "request" => RecordType::Request,
            "metadata" => RecordType::Metadata,
            _ => RecordType::Other,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            RecordType::Response => "response",
            RecordType::Request => "request",
            RecordType::Metadata => "metadata",
            RecordType::Other => "resource",
        }
    }
}

/// One WARC record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarcRecord {
    /// `WARC-Type`.
    pub record_type: RecordType,
    /// `WARC-Target-URI`, empty if absent.
    pub target_uri: String,
    /// Record `Content-Type`.
    pub content_type: String,
    /// Exactly `Content-Length` bytes.
    pub body: Vec<u8>,
    /// `WARC-Record-ID`.
    pub record_id: String,
    /// Byte offset of the record (of its gzip member when compressed).
    pub offset: u64,
}

/// Reader counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarcCounters {
    /// Records handed out.
    pub yielded: u64,
    /// Records skipped as unparseable.
    pub malformed_records: u64,
    /// Records skipped because their body exceeds the cap.
    pub oversized_records: u64,
}

impl WarcCounters {
    /// Every record seen, good or bad.
    pub fn total(&self) -> u64 {
        self.yielded + self.malformed_records + self.oversized_records
    }
}

/// Unrecoverable stream failure.
#[derive(Debug, thiserror::Error)]
pub enum WarcError {
    /// The stream starts with a gzip member that cannot be decoded.
    #[error("corrupt gzip member at byte offset {offset}: {source}")]
    CorruptGzip {
        /// Offset of the member.
        offset: u64,
        /// Decoder error.
        source: io::Error,
    },
    /// The underlying source failed.
    #[error("read error at byte offset {offset}: {source}")]
    Io {
        /// Offset reached.
        offset: u64,
        /// IO error.
        source: io::Error,
    },
}

/// A `BufRead` with unbounded push-back and a consumed-byte counter.
struct Source<R> {
    inner: R,
    pending: Vec<u8>,
    pos: usize,
    offset: u64,
}

impl<R: BufRead> Source<R> {
    fn new(inner: R) -> Self {
        Self { inner, pending: Vec::new(), pos: 0, offset: 0 }
    }

    fn unread(&mut self, bytes: &[u8]) {
        let mut buf = Vec::with_capacity(bytes.len() + self.pending.len() - self.pos);
        buf.extend_from_slice(bytes);
        buf.extend_from_slice(&self.pending[self.pos..]);
        self.pending = buf;
        self.pos = 0;
        self.offset -= bytes.len() as u64;
    }

    fn into_inner(self) -> R {
        debug_assert!(self.pos >= self.pending.len());
        self.inner
    }
}

impl<R: BufRead> Read for Source<R> {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        let avail = self.fill_buf()?;
        let n = avail.len().min(out.len());
        out[..n].copy_from_slice(&avail[..n]);
        self.consume(n);
        Ok(n)
    }
}

impl<R: BufRead> BufRead for Source<R> {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        if self.pos < self.pending.len() {
            Ok(&self.pending[self.pos..])
        } else {
            self.inner.fill_buf()
        }
    }

    fn consume(&mut self, n: usize) {
        self.offset += n as u64;
        if self.pos < self.pending.len() {
            self.pos += n;
            if self.pos >= self.pending.len() {
                self.pending.clear();
                self.pos = 0;
            }
        } else {
            self.inner.consume(n);
        }
    }
}

/// What one parse step produced.
enum Step {
    Record(WarcRecord),
    Malformed,
    Oversized,
    End,
}

/// Skips blank lines between records. Returns false at EOF.
fn skip_blank<R: BufRead>(src: &mut R) -> io::Result<bool> {
    loop {
        let buf = src.fill_buf()?;
        if buf.is_empty() {
            return Ok(false);
        }
        let n = buf.iter().take_while(|b| matches!(b, b'\r' | b'\n')).count();
        if n == 0 {
            return Ok(true);
        }
        src.consume(n);
    }
}

fn is_version_line(line: &[u8]) -> bool {
    line.starts_with(b"WARC/1.0") || line.starts_with(b"WARC/1.1")
}

/// Discards input up to the next `WARC/1.0` or `WARC/1.1` marker (left
/// unread). The marker need not start a line: a truncated body is followed
/// directly by the next record.
fn resync<R: BufRead>(src: &mut Source<R>) -> io::Result<()> {
    let mut line = Vec::new();
    loop {
        line.clear();
        if src.read_until(b'\n', &mut line)? == 0 {
            return Ok(());
        }
        if let Some(i) = line.windows(8).position(is_version_line) {
            src.unread(&line[i..]);
            return Ok(());
        }
    }
}

#[derive(Default)]
struct Header {
    record_type: Option<String>,
    target_uri: String,
    content_type: String,
    record_id: String,
    content_length: Option<u64>,
}

/// Reads header lines up to the blank separator. `None` on EOF mid-header.
fn read_header<R: BufRead>(src: &mut R) -> io::Result<Option<Header>> {
    let mut h = Header::default();
    let mut line = Vec::new();
    let mut last: Option<String> = None;
    loop {
        line.clear();
        if src.read_until(b'\n', &mut line)? == 0 {
            return Ok(None);
        }
        let text = String::from_utf8_lossy(&line);
        let text = text.trim_end_matches(['\r', '\n']);
        if text.is_empty() {
            return Ok(Some(h));
        }
        if text.starts_with([' ', '\t']) {
            // folded continuation of the previous field
            if let Some("warc-target-uri") = last.as_deref() {
                h.target_uri.push_str(text.trim());
            }
            continue;
        }
        let Some((name, value)) = text.split_once(':') else { continue };
        let name = name.trim().to_ascii_lowercase();
        let value = value.trim();
        match name.as_str() {
            "warc-type" => h.record_type = Some(value.to_string()),
            "warc-target-uri" => h.target_uri = value.trim_matches(['<', '>']).to_string(),
            "content-type" => h.content_type = value.to_string(),
            "warc-record-id" => h.record_id = value.to_string(),
            "content-length" => h.content_length = value.parse().ok(),
            _ => {}
        }
        last = Some(name);
    }
}

/// Parses one record from a plain (already decompressed) stream.
fn parse_plain<R: BufRead>(src: &mut Source<R>, max_bytes: u64) -> io::Result<Step> {
    if !skip_blank(src)? {
        return Ok(Step::End);
    }
    let offset = src.offset;
    let mut first = Vec::new();
    src.read_until(b'\n', &mut first)?;
    if !is_version_line(&first) {
        resync(src)?;
        return Ok(Step::Malformed);
    }
    let Some(header) = read_header(src)? else { return Ok(Step::Malformed) };
    let (Some(kind), Some(len)) = (header.record_type.as_deref(), header.content_length) else {
        resync(src)?;
        return Ok(Step::Malformed);
    };
    if len > max_bytes {
        let skipped = io::copy(&mut src.by_ref().take(len), &mut io::sink())?;
        if skipped < len {
            return Ok(Step::Malformed);
        }
        return Ok(Step::Oversized);
    }
    let mut body = Vec::with_capacity(len as usize);
    src.by_ref().take(len).read_to_end(&mut body)?;
    if (body.len() as u64) < len {
        return Ok(Step::Malformed);
    }
    // A record ends with CRLF CRLF; anything else means the declared length
    // ran past the real body.
    let mut tail = Vec::with_capacity(4);
    src.by_ref().take(4).read_to_end(&mut tail)?;
    let terminated = tail == b"\r\n\r\n" || (tail.is_empty() && body.len() as u64 == len);
    if !terminated {
        let mut rewind = body;
        rewind.extend_from_slice(&tail);
        src.unread(&rewind);
        resync(src)?;
        return Ok(Step::Malformed);
    }
    let record_type = RecordType::parse(kind);
    if record_type == RecordType::Response && header.target_uri.is_empty() {
        return Ok(Step::Malformed);
    }
    Ok(Step::Record(WarcRecord {
        record_type,
        target_uri: header.target_uri,
        content_type: header.content_type,
        body,
        record_id: header.record_id,
        offset,
    }))
}

type Member<R> = Source<BufReader<GzDecoder<Source<R>>>>;

enum Mode<R> {
    Plain(Source<R>),
    Member { reader: Box<Member<R>>, offset: u64 },
    Done,
}

/// Iterator over the records of one WARC stream.
pub struct WarcReader<R> {
    mode: Mode<R>,
    max_record_bytes: u64,
    counters: WarcCounters,
    seen_any: bool,
}

impl<R: BufRead> WarcReader<R> {
    /// Reader with the default 8 MiB record cap.
    pub fn new(inner: R) -> Self {
        Self::with_max_record_bytes(inner, DEFAULT_MAX_RECORD_BYTES)
    }

    /// Reader skipping records larger than `max_record_bytes`.
    pub fn with_max_record_bytes(inner: R, max_record_bytes: u64) -> Self {
        Self { mode: Mode::Plain(Source::new(inner)), max_record_bytes, counters: WarcCounters::default(), seen_any: false }
    }

    /// Counters so far.
    pub fn counters(&self) -> WarcCounters {
        self.counters
    }

    fn step(&mut self) -> Result<Step, WarcError> {
        loop {
            match std::mem::replace(&mut self.mode, Mode::Done) {
                Mode::Done => return Ok(Step::End),
                Mode::Plain(mut src) => {
                    let at_gzip = skip_blank(&mut src)
                        .and_then(|more| Ok(more && src.fill_buf()?.starts_with(&GZIP_MAGIC)))
                        .map_err(|source| WarcError::Io { offset: src.offset, source })?;
                    if at_gzip {
                        let offset = src.offset;
                        let reader = Box::new(Source::new(BufReader::new(GzDecoder::new(src))));
                        self.mode = Mode::Member { reader, offset };
                        continue;
                    }
                    let step = parse_plain(&mut src, self.max_record_bytes)
                        .map_err(|source| WarcError::Io { offset: src.offset, source })?;
                    if !matches!(step, Step::End) {
                        self.mode = Mode::Plain(src);
                    }
                    return Ok(step);
                }
                Mode::Member { mut reader, offset } => match parse_plain(&mut reader, self.max_record_bytes) {
                    Ok(Step::End) => {
                        self.mode = Mode::Plain(reader.into_inner().into_inner().into_inner());
                    }
                    Ok(step) => {
                        self.mode = Mode::Member { reader, offset };
                        return Ok(step);
                    }
                    Err(source) => {
                        if !self.seen_any && offset == 0 {
                            return Err(WarcError::CorruptGzip { offset, source });
                        }
                        let mut outer = reader.into_inner().into_inner().into_inner();
                        skip_to_gzip_magic(&mut outer).map_err(|source| WarcError::Io { offset: outer.offset, source })?;
                        self.mode = Mode::Plain(outer);
                        return Ok(Step::Malformed);
                    }
                },
            }
        }
    }
}

/// Advances to the next `1f 8b 08` (left unread) or EOF.
fn skip_to_gzip_magic<R: BufRead>(src: &mut Source<R>) -> io::Result<()> {
    loop {
        let buf = src.fill_buf()?;
        if buf.is_empty() {
            return Ok(());
        }
        if let Some(i) = buf.windows(3).position(|w| w == [0x1f, 0x8b, 0x08]) {
            src.consume(i);
            return Ok(());
        }
        // keep the last two bytes in case the magic straddles buffers
        let n = buf.len();
        if n < 3 {
            let tail = buf.to_vec();
            src.consume(n);
            let more = src.fill_buf()?;
            if more.is_empty() {
                return Ok(());
            }
            src.unread(&tail);
            let joined = src.fill_buf()?;
            if let Some(i) = joined.windows(3).position(|w| w == [0x1f, 0x8b, 0x08]) {
                src.consume(i);
                return Ok(());
            }
            src.consume(1);
        } else {
            src.consume(n - 2);
        }
    }
}

impl<R: BufRead> Iterator for WarcReader<R> {
    type Item = Result<WarcRecord, WarcError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.step() {
                Err(e) => {
                    self.mode = Mode::Done;
                    return Some(Err(e));
                }
                Ok(Step::End) => return None,
                Ok(Step::Malformed) => self.counters.malformed_records += 1,
                Ok(Step::Oversized) => self.counters.oversized_records += 1,
                Ok(Step::Record(r)) => {
                    self.seen_any = true;
                    self.counters.yielded += 1;
                    return Some(Ok(r));
                }
            }
            self.seen_any = true;
        }
    }
}

/// Minimal WARC/1.1 writer, optionally gzip-compressing each record as its
/// own member.
pub struct WarcWriter<W: Write> {
    out: W,
    gzip: bool,
    date: String,
    counter: u64,
}

impl<W: Write> WarcWriter<W> {
    /// Writer stamping every record with a fixed `WARC-Date`.
    pub fn new(out: W, gzip: bool) -> Self {
        Self { out, gzip, date: "2025-05-01T00:00:00Z".to_string(), counter: 0 }
    }

    /// Serialized bytes of one record.
    pub fn encode(&mut self, record_type: RecordType, target_uri: &str, content_type: &str, body: &[u8]) -> Vec<u8> {
        self.counter += 1;
        let mut rec = Vec::with_capacity(body.len() + 256);
        rec.extend_from_slice(b"WARC/1.1\r\n");
        rec.extend_from_slice(format!("WARC-Type: {}\r\n", record_type.as_str()).as_bytes());
        rec.extend_from_slice(format!("WARC-Record-ID: <urn:uuid:00000000-0000-0000-0000-{:012x}>\r\n", self.counter).as_bytes());
        rec.extend_from_slice(format!("WARC-Date: {}\r\n", self.date).as_bytes());
        if !target_uri.is_empty() {
            rec.extend_from_slice(format!("WARC-Target-URI: {target_uri}\r\n").as_bytes());
        }
        rec.extend_from_slice(format!("Content-Type: {content_type}\r\n").as_bytes());
        rec.extend_from_slice(format!("Content-Length: {}\r\n\r\n", body.len()).as_bytes());
        rec.extend_from_slice(body);
        rec.extend_from_slice(b"\r\n\r\n");
        rec
    }

    /// Appends one record.
    pub fn write_record(&mut self, record_type: RecordType, target_uri: &str, content_type: &str, body: &[u8]) -> io::Result<()> {
        let rec = self.encode(record_type, target_uri, content_type, body);
        if self.gzip {
            let mut gz = GzEncoder::new(Vec::new(), Compression::default());
            gz.write_all(&rec)?;
            self.out.write_all(&gz.finish()?)
        } else {
            self.out.write_all(&rec)
        }
    }

    /// Appends raw bytes (for building corrupt fixtures).
    pub fn write_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.out.write_all(bytes)
    }

    /// Wraps an HTTP response around an HTML body and writes it as a
    /// `response` record, the way crawlers store pages.
    pub fn write_http_html(&mut self, url: &str, html: &str) -> io::Result<()> {
        let payload = format!(
            "HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=utf-8\r\nContent-Length: {}\r\n\r\n{html}",
            html.len()
        );
        self.write_record(RecordType::Response, url, "application/http; msgtype=response", payload.as_bytes())
    }

    /// Flushes and returns the sink.
    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_all(bytes: &[u8]) -> (Vec<WarcRecord>, WarcCounters) {
        let mut r = WarcReader::new(bytes);
        let recs = r.by_ref().map(|x| x.unwrap()).collect();
        (recs, r.counters())
    }

    fn fixture(gzip: bool) -> Vec<u8> {
        let mut w = WarcWriter::new(Vec::new(), gzip);
        for i in 0..3 {
            w.write_record(RecordType::Request, &format!("http://a.jp/{i}"), "application/http; msgtype=request", b"GET / HTTP/1.1\r\n\r\n").unwrap();
            if i < 2 {
                w.write_record(RecordType::Response, &format!("http://a.jp/{i}"), "text/html", format!("<p>{i}</p>").as_bytes()).unwrap();
            } else {
                w.write_record(RecordType::Response, "http://a.jp/2", "text/html", b"<p>2</p>").unwrap();
            }
        }
        w.finish().unwrap()
    }

    #[test]
    fn empty_stream() {
        let (recs, c) = read_all(b"");
        assert!(recs.is_empty());
        assert_eq!(c, WarcCounters::default());
    }

    #[test]
    fn plain_and_gzip_yield_same_records_in_order() {
        for gzip in [false, true] {
            let (recs, c) = read_all(&fixture(gzip));
            let kinds: Vec<_> = recs.iter().map(|r| r.record_type).collect();
            use RecordType::*;
            assert_eq!(kinds, [Request, Response, Request, Response, Request, Response], "gzip={gzip}");
            assert_eq!(recs[1].body, b"<p>0</p>");
            assert_eq!(c.yielded, 6);
            assert_eq!(c.malformed_records, 0);
        }
    }

    #[test]
    fn truncated_body_is_skipped_and_stream_continues() {
        let mut w = WarcWriter::new(Vec::new(), false);
        let good = w.encode(RecordType::Response, "http://a.jp/", "text/html", b"<p>ok</p>");
        let mut bad = w.encode(RecordType::Response, "http://a.jp/bad", "text/html", b"0123456789");
        // keep the header claiming 10 bytes but drop half the body
        bad.truncate(bad.len() - 4 - 5);
        let mut bytes = good.clone();
        bytes.extend_from_slice(&bad);
        bytes.extend_from_slice(&good);
        let (recs, c) = read_all(&bytes);
        assert_eq!(recs.len(), 2);
        assert_eq!(c.malformed_records, 1);
        assert!(recs.iter().all(|r| r.body == b"<p>ok</p>"));
    }

    #[test]
    fn truncated_final_record_is_counted() {
        let mut bytes = fixture(false);
        bytes.truncate(bytes.len() - 6);
        let (recs, c) = read_all(&bytes);
        assert_eq!(recs.len(), 5);
        assert_eq!(c.malformed_records, 1);
    }

    #[test]
    fn oversized_records_are_skipped() {
        let mut w = WarcWriter::new(Vec::new(), false);
        w.write_record(RecordType::Response, "http://a.jp/big", "text/html", &[b'x'; 100]).unwrap();
        w.write_record(RecordType::Response, "http://a.jp/small", "text/html", b"y").unwrap();
        let bytes = w.finish().unwrap();
        let mut r = WarcReader::with_max_record_bytes(&bytes[..], 50);
        let recs: Vec<_> = r.by_ref().map(Result::unwrap).collect();
        assert_eq!(recs.len(), 1);
        assert_eq!(r.counters().oversized_records, 1);
    }

    #[test]
    fn corrupt_gzip_at_head_is_fatal_with_offset() {
        let mut bytes = fixture(true);
        bytes.truncate(20);
        let mut r = WarcReader::new(&bytes[..]);
        match r.next() {
            Some(Err(WarcError::CorruptGzip { offset: 0, .. })) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(r.next().is_none());
    }

    #[test]
    fn corrupt_gzip_later_is_skipped() {
        let mut w = WarcWriter::new(Vec::new(), true);
        w.write_record(RecordType::Response, "http://a.jp/1", "text/html", b"one").unwrap();
        let mut bytes = w.finish().unwrap();
        let mut w2 = WarcWriter::new(Vec::new(), true);
        w2.write_record(RecordType::Response, "http://a.jp/2", "text/html", b"two").unwrap();
        let second = w2.finish().unwrap();
        // a member whose deflate payload is garbage
        bytes.extend_from_slice(&[0x1f, 0x8b, 0x08, 0, 0, 0, 0, 0, 0, 0xff, 0xde, 0xad, 0xbe, 0xef, 0xff, 0xff]);
        bytes.extend_from_slice(&second);
        let (recs, c) = read_all(&bytes);
        assert_eq!(recs.iter().map(|r| r.body.as_slice()).collect::<Vec<_>>(), [&b"one"[..], b"two"]);
        assert_eq!(c.malformed_records, 1);
    }

    #[test]
    fn response_without_target_uri_is_malformed() {
        let mut w = WarcWriter::new(Vec::new(), false);
        w.write_record(RecordType::Response, "", "text/html", b"x").unwrap();
        let (recs, c) = read_all(&w.finish().unwrap());
        assert!(recs.is_empty());
        assert_eq!(c.malformed_records, 1);
    }

    #[test]
    fn leading_garbage_resyncs() {
        let mut bytes = b"garbage line\r\nmore\r\n".to_vec();
        bytes.extend_from_slice(&fixture(false));
        let (recs, c) = read_all(&bytes);
        assert_eq!(recs.len(), 6);
        assert_eq!(c.malformed_records, 1);
    }
}
