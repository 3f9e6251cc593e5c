use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use waon::config::{Config, ScorerBackend, SidecarTransport};
use waon::pipeline::{run_pipeline, RunOptions};
use waon::records::sha256;
use waon::sidecar::{HttpTransport, SidecarClient, TcpTransport, Transport};
use waon_core::{filter_by_nsfw, mock_scorer, FilterConfig, ScoreRecord, Stage};

const TIMEOUT: Duration = Duration::from_secs(10);

/// Reference answer: the mock scorer over the decoded image digest, or the
/// error sentinel for images that are not valid base64.
fn answer(request: &Value) -> Value {
    if request["op"] == "hello" {
        return json!({"proto": 1, "max_batch": 7, "model": "mock-wire"});
    }
    let scores: Vec<Value> = request["items"]
        .as_array()
        .unwrap()
        .iter()
        .map(|it| match base64::engine::general_purpose::STANDARD.decode(it["image_b64"].as_str().unwrap()) {
            Ok(bytes) if !bytes.starts_with(b"BROKEN") => {
                let s = mock_scorer(&sha256(&bytes), it["caption"].as_str().unwrap());
                json!({"nsfw": s.nsfw, "align": s.alignment})
            }
            _ => json!({"nsfw": 1.0, "align": -1.0, "error": "decode failed"}),
        })
        .collect();
    json!({"batch_id": request["batch_id"], "scores": scores})
}

/// Line-delimited sidecar on a background thread; returns its address and
/// a counter of scoring requests served.
fn tcp_sidecar() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let served = Arc::new(AtomicUsize::new(0));
    let counter = served.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { return };
            let counter = counter.clone();
            std::thread::spawn(move || {
                let mut writer = stream.try_clone().unwrap();
                for line in BufReader::new(stream).lines() {
                    let Ok(line) = line else { return };
                    let req: Value = serde_json::from_str(&line).unwrap();
                    if req.get("items").is_some() {
                        counter.fetch_add(1, Ordering::SeqCst);
                    }
                    let reply = answer(&req).to_string();
                    if writer.write_all(reply.as_bytes()).and_then(|()| writer.write_all(b"\n")).is_err() {
                        return;
                    }
                }
            });
        }
    });
    (addr, served)
}

fn http_sidecar() -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = axum::Router::new().route("/score", axum::routing::post(|body: String| async move { answer(&serde_json::from_str(&body).unwrap()).to_string() }));
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn pairs(n: usize) -> Vec<(Vec<u8>, String)> {
    (0..n).map(|i| (format!("image bytes {i}").into_bytes(), format!("写真{i}"))).collect()
}

fn expected(pairs: &[(Vec<u8>, String)]) -> Vec<ScoreRecord> {
    pairs.iter().map(|(b, c)| mock_scorer(&sha256(b), c)).collect()
}

#[test]
fn tcp_scores_are_index_aligned_across_connections() {
    let (addr, served) = tcp_sidecar();
    let transports: Vec<Box<dyn Transport>> = (0..3).map(|_| Box::new(TcpTransport::connect(&addr, TIMEOUT).unwrap()) as Box<dyn Transport>).collect();
    let mut client = SidecarClient::connect(transports).unwrap();
    assert_eq!(client.hello().model, "mock-wire");
    assert_eq!(client.hello().max_batch, 7);
    let input = pairs(50);
    let got = client.score(&input).unwrap();
    assert_eq!(got, expected(&input));
    assert_eq!(served.load(Ordering::SeqCst), 8);
    assert_eq!(client.score(&input).unwrap(), got, "repeated requests must agree");
    assert!(client.score(&Vec::<(Vec<u8>, String)>::new()).unwrap().is_empty());
}

#[test]
fn http_transport_posts_to_score() {
    let base = http_sidecar();
    let mut client = SidecarClient::connect(vec![Box::new(HttpTransport::new(&base, TIMEOUT).unwrap())]).unwrap();
    assert_eq!(client.hello().model, "mock-wire");
    let input = pairs(15);
    assert_eq!(client.score(&input).unwrap(), expected(&input));
}

#[test]
fn error_sentinel_keeps_alignment_and_is_filtered() {
    let (addr, _) = tcp_sidecar();
    let mut client = SidecarClient::connect(vec![Box::new(TcpTransport::connect(&addr, TIMEOUT).unwrap())]).unwrap();
    let mut input = pairs(5);
    input[2].0 = b"BROKEN".to_vec();
    let got = client.score(&input).unwrap();
    assert_eq!(got.len(), 5);
    assert_eq!(got[2], ScoreRecord { nsfw: 1.0, alignment: -1.0 });
    let kept = filter_by_nsfw(got.into_iter().enumerate().collect(), &FilterConfig::default());
    assert!(kept.iter().all(|(i, _)| *i != 2));
}

#[test]
fn refused_connection_is_reported() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    assert!(TcpTransport::connect(&format!("127.0.0.1:{port}"), TIMEOUT).is_err());
}

#[test]
fn pipeline_over_tcp_sidecar_matches_mock_backend() {
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/snapshot/waon.toml");
    let (addr, _) = tcp_sidecar();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::load(&fixture).unwrap();
    cfg.run.out_dir = dir.path().join("wire");
    cfg.scoring.backend = ScorerBackend::Sidecar;
    cfg.scoring.transport = SidecarTransport::Tcp;
    cfg.scoring.endpoint = addr;
    cfg.scoring.connections = 2;
    let wire = run_pipeline(&cfg, RunOptions { mock_scorer: false, offline: true }, &mut |_| {}).unwrap();
    cfg.run.out_dir = dir.path().join("mock");
    let mock = run_pipeline(&cfg, RunOptions { mock_scorer: true, offline: true }, &mut |_| {}).unwrap();
    assert_eq!(wire.manifest.stages, mock.manifest.stages);
    assert_eq!(wire.manifest.final_count, mock.manifest.final_count);
    assert_eq!(wire.manifest.stages.get(Stage::ShardWrite).unwrap().output_count, mock.manifest.final_count);
    assert_eq!(wire.manifest.scorer, "sidecar:mock-wire");
}
