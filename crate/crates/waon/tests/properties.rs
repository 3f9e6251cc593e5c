use std::io::{BufReader, Write};

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;
use waon::pairs::{extract_pairs, MAX_CAPTION_CHARS};
use waon::warc::{RecordType, WarcReader};
use waon_core::{CaptionSource, HtmlDoc};

/// Independent WARC/1.0 serializer with minimal headers.
fn reference_record(kind: &str, uri: &str, body: &[u8]) -> Vec<u8> {
    let mut out = format!(
        "WARC/1.0\r\nWARC-Type: {kind}\r\nWARC-Target-URI: {uri}\r\nWARC-Date: 2024-01-01T00:00:00Z\r\nWARC-Record-ID: <urn:uuid:{:032x}>\r\nContent-Type: application/octet-stream\r\nContent-Length: {}\r\n\r\n",
        uri.len(),
        body.len()
    )
    .into_bytes();
    out.extend_from_slice(body);
    out.extend_from_slice(b"\r\n\r\n");
    out
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warc_round_trip(
        bodies in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..3000), 0..20),
        compressed in any::<bool>(),
    ) {
        let mut stream = Vec::new();
        for (i, body) in bodies.iter().enumerate() {
            let kind = if i % 3 == 0 { "request" } else { "response" };
            let rec = reference_record(kind, &format!("http://example.jp/{i}"), body);
            stream.extend(if compressed { gz(&rec) } else { rec });
        }
        let mut reader = WarcReader::new(BufReader::new(&stream[..]));
        let got: Vec<_> = reader.by_ref().collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(got.len(), bodies.len());
        for (i, (r, body)) in got.iter().zip(&bodies).enumerate() {
            prop_assert_eq!(&r.body, body);
            prop_assert_eq!(&r.target_uri, &format!("http://example.jp/{i}"));
            prop_assert_eq!(r.record_type, if i % 3 == 0 { RecordType::Request } else { RecordType::Response });
        }
        let c = reader.counters();
        prop_assert_eq!(c.yielded, bodies.len() as u64);
        prop_assert_eq!(c.total(), bodies.len() as u64);
    }

    #[test]
    fn truncation_never_yields_short_bodies(
        bodies in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 1..500), 1..10),
        cut in any::<proptest::sample::Index>(),
    ) {
        let mut stream = Vec::new();
        for (i, body) in bodies.iter().enumerate() {
            stream.extend(reference_record("response", &format!("http://example.jp/{i}"), body));
        }
        let cut = cut.index(stream.len());
        let mut reader = WarcReader::new(BufReader::new(&stream[..cut]));
        let got: Vec<_> = reader.by_ref().filter_map(Result::ok).collect();
        for r in &got {
            let i: usize = r.target_uri.rsplit('/').next().unwrap().parse().unwrap();
            prop_assert_eq!(&r.body, &bodies[i]);
        }
        prop_assert!(reader.counters().total() <= bodies.len() as u64);
    }
}

#[derive(Debug, Clone)]
enum Block {
    Img { alt: &'static str, src: usize },
    Figure { caption: &'static str, src: usize, caption_first: bool },
}

const ALTS: [&str; 8] = ["", "   ", "cat", "猫の写真", " ねこ ", "Canon EOS カメラ", "123", "東京タワー"];
const SRCS: [&str; 6] = ["photo.png", "/img/a.jpg", "http://cdn.example.jp/x.webp", "javascript:void(0)", "", "data:image/png;base64,AAAA"];

fn block() -> impl Strategy<Value = Block> {
    prop_oneof![
        (0..ALTS.len(), 0..SRCS.len()).prop_map(|(a, s)| Block::Img { alt: ALTS[a], src: s }),
        (0..ALTS.len(), 0..SRCS.len(), any::<bool>()).prop_map(|(a, s, f)| Block::Figure { caption: ALTS[a], src: s, caption_first: f }),
    ]
}

fn render(blocks: &[Block]) -> String {
    let mut html = String::from("<html lang=\"ja\"><head><title>t</title></head><body>");
    for b in blocks {
        match b {
            Block::Img { alt, src } => html.push_str(&format!("<p><img src=\"{}\" alt=\"{alt}\"></p>", SRCS[*src])),
            Block::Figure { caption, src, caption_first } => {
                let img = format!("<img src=\"{}\">", SRCS[*src]);
                let cap = format!("<figcaption>{caption}</figcaption>");
                let (a, b) = if *caption_first { (cap, img) } else { (img, cap) };
                html.push_str(&format!("<figure>{a}{b}</figure>"));
            }
        }
    }
    html + "</body></html>"
}

fn valid_src(i: usize) -> bool {
    i < 3
}

proptest! {
    #[test]
    fn candidates_are_valid_and_in_document_order(blocks in proptest::collection::vec(block(), 0..25)) {
        let doc = HtmlDoc { url: "http://example.jp/dir/page.html".into(), raw_html: render(&blocks), declared_lang: Some("ja".into()), title: Some("t".into()) };
        let ex = extract_pairs(&doc, "s1");
        let mut expected = Vec::new();
        let mut occurrences = 0;
        for b in &blocks {
            let (text, src, source) = match b {
                Block::Img { alt, src } => (alt.trim(), *src, CaptionSource::AltAttr),
                Block::Figure { caption, src, .. } => (caption.trim(), *src, CaptionSource::Figcaption),
            };
            if text.is_empty() {
                continue;
            }
            occurrences += 1;
            if valid_src(src) && waon_core::contains_japanese(text) {
                expected.push((text.to_string(), source));
            }
        }
        let got: Vec<(String, CaptionSource)> = ex.candidates.iter().map(|c| (c.caption.clone(), c.caption_source)).collect();
        prop_assert_eq!(got, expected);
        prop_assert_eq!(ex.examined(), occurrences);
        for c in &ex.candidates {
            prop_assert!(c.caption_is_valid());
            prop_assert!(c.caption.chars().count() <= MAX_CAPTION_CHARS);
            let url = url::Url::parse(&c.image_url).unwrap();
            prop_assert!(matches!(url.scheme(), "http" | "https"));
            prop_assert!(url.host_str().is_some_and(|h| !h.is_empty()));
            prop_assert!(url.fragment().is_none());
            prop_assert_eq!(&c.page_url, &doc.url);
            prop_assert_eq!(&c.snapshot_id, "s1");
        }
    }
}

#[test]
fn long_captions_are_capped() {
    let alt = "あ".repeat(MAX_CAPTION_CHARS + 300);
    let doc = HtmlDoc { url: "http://example.jp/".into(), raw_html: format!("<img src=\"a.png\" alt=\"{alt}\">"), declared_lang: None, title: None };
    let ex = extract_pairs(&doc, "s");
    assert_eq!(ex.candidates[0].caption.chars().count(), MAX_CAPTION_CHARS);
    assert_eq!(ex.notes.get("caption_truncated"), Some(&1));
}
