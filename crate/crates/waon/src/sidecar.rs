//! Client for the v1 scoring sidecar protocol.
//!
//! Requests and responses are single JSON objects, one per line over a byte
//! stream or one per `POST /score` body:
//!
//! ```text
//! > {"op":"hello"}
//! < {"proto":1,"max_batch":32,"model":"..."}
//! > {"batch_id":"b00000000","items":[{"image_b64":"...","caption":"..."}]}
//! < {"batch_id":"b00000000","scores":[{"nsfw":0.01,"align":0.27}]}
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use waon_core::ScoreRecord;

/// Protocol version spoken by this client.
pub const PROTO: u32 = 1;

/// Handshake reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hello {
    /// Protocol version.
    pub proto: u32,
    /// Largest batch the sidecar accepts.
    pub max_batch: usize,
    /// Model identifier, recorded in the manifest.
    pub model: String,
}

#[derive(Serialize)]
struct HelloRequest {
    op: &'static str,
}

#[derive(Serialize)]
struct Item<'a> {
    image_b64: String,
    caption: &'a str,
}

#[derive(Serialize)]
struct Request<'a> {
    batch_id: &'a str,
    items: Vec<Item<'a>>,
}

#[derive(Deserialize)]
struct Score {
    nsfw: f64,
    align: f64,
}

#[derive(Deserialize)]
struct Response {
    batch_id: String,
    scores: Vec<Score>,
}

/// Sidecar failure.
#[derive(Debug, thiserror::Error)]
pub enum SidecarError {
    /// The hello exchange failed or advertised something unusable.
    #[error("sidecar handshake failed: {0}")]
    Handshake(String),
    /// IO failed twice for the same batch.
    #[error("sidecar transport failed on batch {batch_id}: {source}")]
    Transport {
        /// Batch being sent.
        batch_id: String,
        /// Last IO error.
        source: io::Error,
    },
    /// The reply broke the protocol.
    #[error("sidecar protocol violation on batch {batch_id}: {reason}")]
    Protocol {
        /// Batch being answered.
        batch_id: String,
        /// What was wrong.
        reason: String,
    },
}

/// A request/response channel to one sidecar connection.
pub trait Transport: Send {
    /// Sends one JSON document and returns the reply document.
    fn roundtrip(&mut self, request: &str) -> io::Result<String>;

    /// Re-establishes the connection after a failure.
    fn reconnect(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Line-delimited JSON over a pair of byte streams.
pub struct LineTransport<R, W> {
    reader: R,
    writer: W,
}

impl<R: BufRead + Send, W: Write + Send> LineTransport<R, W> {
    /// Wraps already-connected streams.
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }
}

impl<R: BufRead + Send, W: Write + Send> Transport for LineTransport<R, W> {
    fn roundtrip(&mut self, request: &str) -> io::Result<String> {
        line_roundtrip(&mut self.reader, &mut self.writer, request)
    }
}

fn line_roundtrip(reader: &mut impl BufRead, writer: &mut impl Write, request: &str) -> io::Result<String> {
    debug_assert!(!request.contains('\n'));
    writer.write_all(request.as_bytes())?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "sidecar closed the connection"));
    }
    Ok(line.trim_end().to_string())
}

/// Line-delimited JSON over TCP; reconnects to the same address.
pub struct TcpTransport {
    addr: String,
    timeout: Duration,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
}

impl TcpTransport {
    /// Connects to `addr` (`host:port`).
    pub fn connect(addr: &str, timeout: Duration) -> io::Result<Self> {
        let mut t = Self { addr: addr.to_string(), timeout, conn: None };
        t.reconnect()?;
        Ok(t)
    }
}

impl Transport for TcpTransport {
    fn roundtrip(&mut self, request: &str) -> io::Result<String> {
        let (reader, writer) = self.conn.as_mut().ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "not connected"))?;
        line_roundtrip(reader, writer, request)
    }

    fn reconnect(&mut self) -> io::Result<()> {
        self.conn = None;
        let addr = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot resolve {}", self.addr)))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        self.conn = Some((BufReader::new(stream.try_clone()?), stream));
        Ok(())
    }
}

/// Line-delimited JSON over a child process's stdin/stdout. The child is
/// killed on drop.
pub struct StdioTransport {
    program: String,
    args: Vec<String>,
    child: Child,
    io: LineTransport<BufReader<ChildStdout>, ChildStdin>,
}

impl StdioTransport {
    /// Spawns `program args..`.
    pub fn spawn(program: &str, args: &[String]) -> io::Result<Self> {
        let (child, io) = Self::start(program, args)?;
        Ok(Self { program: program.to_string(), args: args.to_vec(), child, io })
    }

    fn start(program: &str, args: &[String]) -> io::Result<(Child, LineTransport<BufReader<ChildStdout>, ChildStdin>)> {
        let mut child = Command::new(program).args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok((child, LineTransport::new(BufReader::new(stdout), stdin)))
    }
}

impl Transport for StdioTransport {
    fn roundtrip(&mut self, request: &str) -> io::Result<String> {
        self.io.roundtrip(request)
    }

    fn reconnect(&mut self) -> io::Result<()> {
        let _ = self.child.kill();
        let _ = self.child.wait();
        let (child, io) = Self::start(&self.program, &self.args)?;
        self.child = child;
        self.io = io;
        Ok(())
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// `POST <base>/score` with a JSON body.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
}

impl HttpTransport {
    /// Targets `base_url` (e.g. `http://127.0.0.1:8000`).
    pub fn new(base_url: &str, timeout: Duration) -> io::Result<Self> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(io::Error::other)?;
        Ok(Self { client, endpoint: format!("{}/score", base_url.trim_end_matches('/')) })
    }
}

impl Transport for HttpTransport {
    fn roundtrip(&mut self, request: &str) -> io::Result<String> {
        let resp = self
            .client
            .post(&self.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(request.to_string())
            .send()
            .map_err(io::Error::other)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(io::Error::other(format!("HTTP {status}")));
        }
        resp.text().map_err(io::Error::other)
    }
}

fn roundtrip_with_retry(t: &mut dyn Transport, batch_id: &str, request: &str) -> Result<String, SidecarError> {
    match t.roundtrip(request) {
        Ok(reply) => Ok(reply),
        Err(first) => {
            log::warn!("sidecar batch {batch_id}: {first}; retrying once");
            t.reconnect()
                .and_then(|()| t.roundtrip(request))
                .map_err(|source| SidecarError::Transport { batch_id: batch_id.to_string(), source })
        }
    }
}

fn looks_non_finite(reply: &str) -> bool {
    ["NaN", "Infinity"].iter().any(|tok| reply.contains(tok))
}

fn decode_reply(batch_id: &str, expected: usize, reply: &str) -> Result<Vec<ScoreRecord>, SidecarError> {
    let protocol = |reason: String| SidecarError::Protocol { batch_id: batch_id.to_string(), reason };
    let resp: Response = serde_json::from_str(reply).map_err(|e| {
        if looks_non_finite(reply) {
            protocol("non-finite score".to_string())
        } else {
            protocol(format!("malformed reply: {e}"))
        }
    })?;
    if resp.batch_id != batch_id {
        return Err(protocol(format!("reply is for batch {}", resp.batch_id)));
    }
    if resp.scores.len() != expected {
        return Err(protocol(format!("{} scores for {expected} items", resp.scores.len())));
    }
    resp.scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let rec = ScoreRecord { nsfw: s.nsfw, alignment: s.align };
            if !s.nsfw.is_finite() || !s.align.is_finite() {
                Err(protocol(format!("non-finite score at item {i}")))
            } else if !rec.is_valid() {
                Err(protocol(format!("score out of range at item {i}: nsfw={} align={}", s.nsfw, s.align)))
            } else {
                Ok(rec)
            }
        })
        .collect()
}

/// Scores (image bytes, caption) pairs through one or more sidecar
/// connections.
pub struct SidecarClient {
    transports: Vec<Box<dyn Transport>>,
    hello: Hello,
    next_batch: u64,
}

impl SidecarClient {
    /// Performs the handshake on every connection. All must agree on the
    /// protocol version; the smallest `max_batch` wins.
    pub fn connect(mut transports: Vec<Box<dyn Transport>>) -> Result<Self, SidecarError> {
        if transports.is_empty() {
            return Err(SidecarError::Handshake("no sidecar connections".to_string()));
        }
        let request = serde_json::to_string(&HelloRequest { op: "hello" }).expect("serializable");
        let mut hello: Option<Hello> = None;
        for t in &mut transports {
            let reply = roundtrip_with_retry(t.as_mut(), "hello", &request).map_err(|e| SidecarError::Handshake(e.to_string()))?;
            let h: Hello = serde_json::from_str(&reply).map_err(|e| SidecarError::Handshake(format!("bad hello reply: {e}")))?;
            if h.proto != PROTO {
                return Err(SidecarError::Handshake(format!("sidecar speaks proto {}, expected {PROTO}", h.proto)));
            }
            if h.max_batch == 0 {
                return Err(SidecarError::Handshake("max_batch must be at least 1".to_string()));
            }
            hello = Some(match hello {
                Some(prev) if prev.max_batch <= h.max_batch => prev,
                _ => h,
            });
        }
        Ok(Self { transports, hello: hello.expect("at least one transport"), next_batch: 0 })
    }

    /// The negotiated handshake.
    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    /// One record per pair, index-aligned. Batches are spread across
    /// connections and run concurrently.
    pub fn score<B: AsRef<[u8]> + Sync, C: AsRef<str> + Sync>(&mut self, pairs: &[(B, C)]) -> Result<Vec<ScoreRecord>, SidecarError> {
        let max_batch = self.hello.max_batch;
        let mut batches = Vec::new();
        for (i, chunk) in pairs.chunks(max_batch).enumerate() {
            batches.push((format!("b{:08}", self.next_batch), i * max_batch, chunk));
            self.next_batch += 1;
        }
        let lanes = self.transports.len();
        let mut out = vec![ScoreRecord { nsfw: 0.0, alignment: 0.0 }; pairs.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .transports
                .iter_mut()
                .enumerate()
                .map(|(lane, t)| {
                    let mine: Vec<_> = batches.iter().skip(lane).step_by(lanes).collect();
                    scope.spawn(move || {
                        let mut done = Vec::new();
                        for (id, start, chunk) in mine {
                            let request = Request {
                                batch_id: id,
                                items: chunk
                                    .iter()
                                    .map(|(img, cap)| Item {
                                        image_b64: base64::engine::general_purpose::STANDARD.encode(img.as_ref()),
                                        caption: cap.as_ref(),
                                    })
                                    .collect(),
                            };
                            let line = serde_json::to_string(&request).expect("serializable");
                            let reply = roundtrip_with_retry(t.as_mut(), id, &line)?;
                            done.push((*start, decode_reply(id, chunk.len(), &reply)?));
                        }
                        Ok::<_, SidecarError>(done)
                    })
                })
                .collect();
            for h in handles {
                for (start, recs) in h.join().expect("sidecar worker panicked")? {
                    out[start..start + recs.len()].copy_from_slice(&recs);
                }
            }
            Ok(())
        })?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    /// In-process sidecar answering with a fixed score, optionally
    /// misbehaving on every request.
    struct Fake {
        max_batch: usize,
        reply: fn(&serde_json::Value) -> String,
        fail_first: usize,
        log: Arc<Mutex<Vec<usize>>>,
    }

    impl Transport for Fake {
        fn roundtrip(&mut self, request: &str) -> io::Result<String> {
            if self.fail_first > 0 {
                self.fail_first -= 1;
                return Err(io::Error::new(io::ErrorKind::BrokenPipe, "boom"));
            }
            let v: serde_json::Value = serde_json::from_str(request).unwrap();
            if v.get("op").is_some() {
                return Ok(format!(r#"{{"proto":1,"max_batch":{},"model":"fake"}}"#, self.max_batch));
            }
            self.log.lock().unwrap().push(v["items"].as_array().unwrap().len());
            Ok((self.reply)(&v))
        }
    }

    fn fixed(v: &serde_json::Value) -> String {
        let n = v["items"].as_array().unwrap().len();
        let scores = vec![r#"{"nsfw":0.0,"align":0.9}"#; n].join(",");
        format!(r#"{{"batch_id":{},"scores":[{scores}]}}"#, v["batch_id"])
    }

    fn fake(max_batch: usize, reply: fn(&serde_json::Value) -> String) -> (Box<dyn Transport>, Arc<Mutex<Vec<usize>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        (Box::new(Fake { max_batch, reply, fail_first: 0, log: log.clone() }), log)
    }

    fn pairs(n: usize) -> Vec<(Vec<u8>, String)> {
        (0..n).map(|i| (vec![i as u8; 4], format!("キャプション{i}"))).collect()
    }

    #[test]
    fn fixed_scores_and_batch_split() {
        let (t, log) = fake(4, fixed);
        let mut c = SidecarClient::connect(vec![t]).unwrap();
        assert_eq!(c.hello().model, "fake");
        let recs = c.score(&pairs(10)).unwrap();
        assert_eq!(recs.len(), 10);
        assert!(recs.iter().all(|r| *r == ScoreRecord { nsfw: 0.0, alignment: 0.9 }));
        assert_eq!(*log.lock().unwrap(), [4, 4, 2]);
    }

    #[test]
    fn short_reply_is_a_protocol_error() {
        fn short(v: &serde_json::Value) -> String {
            let n = v["items"].as_array().unwrap().len() - 1;
            let scores = vec![r#"{"nsfw":0.0,"align":0.9}"#; n].join(",");
            format!(r#"{{"batch_id":{},"scores":[{scores}]}}"#, v["batch_id"])
        }
        let (t, _) = fake(8, short);
        let err = SidecarClient::connect(vec![t]).unwrap().score(&pairs(3)).unwrap_err();
        assert!(matches!(&err, SidecarError::Protocol { batch_id, .. } if batch_id == "b00000000"), "{err}");
    }

    #[test]
    fn nan_is_a_protocol_error() {
        fn nan(v: &serde_json::Value) -> String {
            format!(r#"{{"batch_id":{},"scores":[{{"nsfw":NaN,"align":0.1}}]}}"#, v["batch_id"])
        }
        let (t, _) = fake(8, nan);
        let err = SidecarClient::connect(vec![t]).unwrap().score(&pairs(1)).unwrap_err();
        assert!(err.to_string().contains("non-finite") && err.to_string().contains("b00000000"), "{err}");
    }

    #[test]
    fn wrong_batch_id_and_range_are_protocol_errors() {
        fn other(_: &serde_json::Value) -> String {
            r#"{"batch_id":"zzz","scores":[{"nsfw":0.0,"align":0.0}]}"#.to_string()
        }
        fn range(v: &serde_json::Value) -> String {
            format!(r#"{{"batch_id":{},"scores":[{{"nsfw":1.5,"align":0.1}}]}}"#, v["batch_id"])
        }
        for f in [other as fn(&serde_json::Value) -> String, range] {
            let (t, _) = fake(8, f);
            assert!(matches!(SidecarClient::connect(vec![t]).unwrap().score(&pairs(1)), Err(SidecarError::Protocol { .. })));
        }
    }

    #[test]
    fn transport_failure_is_retried_once() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let t = Box::new(Fake { max_batch: 8, reply: fixed, fail_first: 1, log: log.clone() });
        let mut c = SidecarClient::connect(vec![t]).unwrap();
        assert_eq!(c.score(&pairs(2)).unwrap().len(), 2);

        let mut twice = Fake { max_batch: 8, reply: fixed, fail_first: 2, log };
        let err = roundtrip_with_retry(&mut twice, "b7", "{}").unwrap_err();
        assert!(matches!(err, SidecarError::Transport { ref batch_id, .. } if batch_id == "b7"));
    }

    #[test]
    fn several_connections_keep_index_alignment() {
        fn echo(v: &serde_json::Value) -> String {
            // align encodes the first caption byte so order is observable.
            let scores: Vec<String> = v["items"]
                .as_array()
                .unwrap()
                .iter()
                .map(|it| {
                    let n: f64 = it["caption"].as_str().unwrap().trim_start_matches("キャプション").parse().unwrap();
                    format!(r#"{{"nsfw":0.0,"align":{}}}"#, n / 100.0)
                })
                .collect();
            format!(r#"{{"batch_id":{},"scores":[{}]}}"#, v["batch_id"], scores.join(","))
        }
        let (a, la) = fake(3, echo);
        let (b, lb) = fake(5, echo);
        let mut c = SidecarClient::connect(vec![a, b]).unwrap();
        assert_eq!(c.hello().max_batch, 3);
        let recs = c.score(&pairs(20)).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert!((r.alignment - i as f64 / 100.0).abs() < 1e-12);
        }
        assert_eq!(la.lock().unwrap().iter().sum::<usize>() + lb.lock().unwrap().iter().sum::<usize>(), 20);
        assert!(!la.lock().unwrap().is_empty() && !lb.lock().unwrap().is_empty());
    }

    #[test]
    fn handshake_rejects_other_versions() {
        struct V2;
        impl Transport for V2 {
            fn roundtrip(&mut self, _: &str) -> io::Result<String> {
                Ok(r#"{"proto":2,"max_batch":4,"model":"x"}"#.to_string())
            }
        }
        assert!(matches!(SidecarClient::connect(vec![Box::new(V2)]), Err(SidecarError::Handshake(_))));
    }
}
