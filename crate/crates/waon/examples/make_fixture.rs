//! Regenerates the bundled synthetic snapshot under
//! `tests/fixtures/snapshot`: a gzipped WARC of ~50 pages, the images those
//! pages reference laid out for the offline fetcher, a config, and
//! `planted.json` with the counts the generator planted for each
//! pre-scoring stage.
//!
//! ```text
//! cargo run -p waon --example make_fixture
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use waon::warc::{RecordType, WarcWriter};

const HOSTS: [&str; 4] = ["shop.example.jp", "blog.example.jp", "news.example.jp", "photo.example.jp"];
const ADJ: [&str; 12] = ["赤い", "青い", "大きな", "小さな", "古い", "新しい", "静かな", "明るい", "暗い", "美しい", "白い", "黒い"];
const NOUN: [&str; 12] = ["猫", "犬", "花", "山", "川", "車", "家", "本", "海", "空", "木", "橋"];
const BODY: &str = "これは日本語のページです。今日は天気が良いので、公園を散歩しました。写真をたくさん撮りました。";
const EN_BODY: &str = "This is an English page. The weather was nice today, so we took a walk in the park and took many photos.";

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Good,
    TooSmall,
    BadAspect,
    LowColor,
    Corrupt,
    Missing,
    CopyOfPrevious,
}

#[derive(Default, Serialize)]
struct Planted {
    warc_records: u64,
    html_docs: u64,
    doc_gate: BTreeMap<&'static str, u64>,
    pair_occurrences: u64,
    pair_rejects: BTreeMap<&'static str, u64>,
    candidates: u64,
    dedup_rejects: BTreeMap<&'static str, u64>,
    deduped: u64,
    fetch_outcomes: BTreeMap<&'static str, u64>,
    quality_rejects: BTreeMap<&'static str, u64>,
    quality_passed: u64,
    image_files: u64,
}

struct Gen {
    rng: ChaCha8Rng,
    root: PathBuf,
    planted: Planted,
    seen_urls: BTreeSet<String>,
    seen_captions: BTreeSet<String>,
    /// Kinds of candidates that survive dedup, in order.
    survivors: Vec<(String, Kind)>,
    last_good: Option<Vec<u8>>,
    image_index: u64,
}

fn bump(m: &mut BTreeMap<&'static str, u64>, k: &'static str) {
    *m.entry(k).or_insert(0) += 1;
}

impl Gen {
    fn pattern(&mut self, w: u32, h: u32) -> RgbImage {
        let c0: [u8; 3] = self.rng.gen();
        let c1: [u8; 3] = self.rng.gen();
        let mut img = RgbImage::from_fn(w, h, |x, y| {
            let t = (x + y) as f32 / (w + h) as f32;
            Rgb(std::array::from_fn(|i| (c0[i] as f32 * (1.0 - t) + c1[i] as f32 * t) as u8))
        });
        for _ in 0..4 {
            let (rx, ry) = (self.rng.gen_range(0..w), self.rng.gen_range(0..h));
            let (rw, rh) = (self.rng.gen_range(w / 8..w / 2), self.rng.gen_range(h / 8..h / 2));
            let c: [u8; 3] = self.rng.gen();
            for y in ry..(ry + rh).min(h) {
                for x in rx..(rx + rw).min(w) {
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        }
        img
    }

    fn encode(img: &RgbImage, format: ImageFormat) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, format).expect("encode");
        out.into_inner()
    }

    fn image_bytes(&mut self, kind: Kind, jpeg: bool) -> Option<Vec<u8>> {
        let fmt = if jpeg { ImageFormat::Jpeg } else { ImageFormat::Png };
        match kind {
            Kind::Missing => None,
            Kind::Corrupt => Some(b"this is not an image at all".to_vec()),
            Kind::CopyOfPrevious => self.last_good.clone(),
            Kind::LowColor => {
                let img = RgbImage::from_fn(200, 200, |x, _| if x < 100 { Rgb([200, 30, 30]) } else { Rgb([30, 30, 200]) });
                Some(Self::encode(&img, ImageFormat::Png))
            }
            Kind::TooSmall => {
                let img = self.pattern(120, 120);
                Some(Self::encode(&img, fmt))
            }
            Kind::BadAspect => {
                let img = self.pattern(400, 150);
                Some(Self::encode(&img, fmt))
            }
            Kind::Good => {
                let w = self.rng.gen_range(160..=320);
                let h = (w as f32 * self.rng.gen_range(0.6..1.6)) as u32;
                let img = self.pattern(w, h.max(160));
                let bytes = Self::encode(&img, fmt);
                self.last_good = Some(bytes.clone());
                Some(bytes)
            }
        }
    }

    fn kind_for(i: u64) -> Kind {
        if i % 23 == 3 {
            Kind::TooSmall
        } else if i % 29 == 5 {
            Kind::BadAspect
        } else if i % 31 == 7 {
            Kind::LowColor
        } else if i % 37 == 11 {
            Kind::Corrupt
        } else if i % 19 == 13 {
            Kind::Missing
        } else if i % 17 == 9 {
            Kind::CopyOfPrevious
        } else {
            Kind::Good
        }
    }

    fn write_file(&mut self, host: &str, path: &str, bytes: &[u8]) {
        let p = self.root.join("images").join(host).join(path.trim_start_matches('/'));
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        if !p.exists() {
            self.planted.image_files += 1;
        }
        fs::write(p, bytes).unwrap();
    }

    /// Plans an accepted candidate and tracks it through dedup.
    fn candidate(&mut self, url: &str, caption: &str, kind: Kind) {
        self.planted.pair_occurrences += 1;
        self.planted.candidates += 1;
        let url_seen = self.seen_urls.contains(url);
        let cap_seen = self.seen_captions.contains(caption);
        self.seen_urls.insert(url.to_string());
        self.seen_captions.insert(caption.to_string());
        if url_seen {
            bump(&mut self.planted.dedup_rejects, "duplicate_image_url");
        } else if cap_seen {
            bump(&mut self.planted.dedup_rejects, "duplicate_caption");
        } else {
            self.planted.deduped += 1;
            self.survivors.push((url.to_string(), kind));
        }
    }

    /// A fresh content image on `host`; returns its `<img>` markup.
    fn content_image(&mut self, host: &str, dir: &str, caption: &str, absolute: bool) -> String {
        let i = self.image_index;
        self.image_index += 1;
        let kind = Self::kind_for(i);
        let jpeg = i.is_multiple_of(3);
        let ext = if jpeg && !matches!(kind, Kind::LowColor | Kind::CopyOfPrevious) { "jpg" } else { "png" };
        let path = format!("{dir}/img{i:03}.{ext}");
        if let Some(bytes) = self.image_bytes(kind, jpeg) {
            self.write_file(host, &path, &bytes);
        }
        let url = format!("http://{host}{path}");
        self.candidate(&url, caption, kind);
        let src = if absolute { url } else { format!("..{path}") };
        format!(r#"<img src="{src}" alt="{caption}">"#)
    }
}

fn page(lang: Option<&str>, title: Option<&str>, base: Option<&str>, body: &str) -> String {
    let lang = lang.map(|l| format!(r#" lang="{l}""#)).unwrap_or_default();
    let title = title.map(|t| format!("<title>{t}</title>")).unwrap_or_default();
    let base = base.map(|b| format!(r#"<base href="{b}">"#)).unwrap_or_default();
    format!("<!DOCTYPE html>\n<html{lang}><head><meta charset=\"utf-8\">{title}{base}</head>\n<body>\n{body}\n</body></html>\n")
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/snapshot");
    if root.exists() {
        fs::remove_dir_all(&root).unwrap();
    }
    fs::create_dir_all(root.join("images")).unwrap();
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(2025),
        root: root.clone(),
        planted: Planted::default(),
        seen_urls: BTreeSet::new(),
        seen_captions: BTreeSet::new(),
        survivors: Vec::new(),
        last_good: None,
        image_index: 0,
    };

    let mut warc = WarcWriter::new(Vec::new(), true);
    warc.write_record(RecordType::Other, "", "application/warc-fields", b"software: make_fixture\r\n").unwrap();
    g.planted.warc_records += 1;

    for host in ["shop.example.jp", "blog.example.jp"] {
        let logo = g.pattern(240, 180);
        g.write_file(host, "/static/logo.png", &Gen::encode(&logo, ImageFormat::Png));
    }
    fs::create_dir_all(root.join("images/photo.example.jp")).unwrap();
    fs::write(root.join("images/photo.example.jp/robots.txt"), "User-agent: *\nDisallow: /private/\n").unwrap();

    for p in 0..50u64 {
        let host = HOSTS[(p % 4) as usize];
        let url = format!("http://{host}/articles/{p:03}.html");
        let mut body = format!("<header><nav>メニュー</nav></header>\n<main><p>{BODY}</p>\n");

        // 4 English pages, 3 untitled pages, 3 undeclared Japanese pages.
        let (lang, title, accepted) = match p {
            10 | 20 | 30 | 40 => (Some("en"), Some("English page"), false),
            15 | 25 | 35 => (Some("ja"), None, false),
            7 | 17 | 27 => (None, Some("日本語のページ"), true),
            _ if p % 11 == 1 => (Some("ja-JP"), Some("記事"), true),
            _ => (Some("ja"), Some("記事"), true),
        };
        if !accepted {
            let text = if lang == Some("en") { EN_BODY } else { BODY };
            body = format!("<main><p>{text}</p><img src=\"/x/{p}.png\" alt=\"cat photo\"><img src=\"/y/{p}.png\" alt=\"猫の写真{p}\"></main>");
            match title {
                None => bump(&mut g.planted.doc_gate, "rejected_no_title"),
                Some(_) => bump(&mut g.planted.doc_gate, "rejected_language"),
            }
        } else {
            bump(&mut g.planted.doc_gate, if lang.is_none() { "detector_on_text" } else { "declared_attr" });
            if host == "shop.example.jp" || host == "blog.example.jp" {
                let caption = format!("{host}のロゴ");
                body.push_str(&format!(r#"<img src="/static/logo.png" alt="{caption}">"#));
                g.candidate(&format!("http://{host}/static/logo.png"), &caption, Kind::Good);
            }
            let n = if p % 2 == 0 { 3 } else { 2 };
            for k in 0..n {
                let caption = format!("{}{}の写真 {p}-{k}", ADJ[(p as usize + k) % 12], NOUN[(p as usize * 5 + k) % 12]);
                let dir = if host == "photo.example.jp" && k == 1 { "/private" } else { "/media" };
                let markup = g.content_image(host, dir, &caption, k != 0);
                if dir == "/private" {
                    let (u, _) = g.survivors.last().cloned().unwrap();
                    g.survivors.last_mut().unwrap().1 = Kind::Missing;
                    g.survivors.last_mut().unwrap().0 = format!("robots:{u}");
                }
                body.push_str(&markup);
                body.push('\n');
            }
            if p % 5 == 0 {
                let caption = format!("図{p}: {}の様子", NOUN[p as usize % 12]);
                let i = g.image_index;
                g.image_index += 1;
                let path = format!("/figures/fig{i:03}.png");
                let bytes = g.image_bytes(Kind::Good, false).unwrap();
                g.write_file(host, &path, &bytes);
                g.candidate(&format!("http://{host}{path}"), &caption, Kind::Good);
                body.push_str(&format!("<figure><img src=\"{path}\"><figcaption>{caption}</figcaption></figure>\n"));
            }
            if p % 6 == 0 {
                let i = g.image_index;
                g.image_index += 1;
                let path = format!("/media/item{i:03}.png");
                let bytes = g.image_bytes(Kind::Good, false).unwrap();
                g.write_file(host, &path, &bytes);
                g.candidate(&format!("http://{host}{path}"), "商品画像", Kind::Good);
                body.push_str(&format!("<img src=\"{path}\" alt=\"商品画像\">\n"));
            }
            if p % 7 == 0 {
                g.planted.pair_occurrences += 1;
                bump(&mut g.planted.pair_rejects, "no_japanese");
                body.push_str("<img src=\"/media/en.png\" alt=\"a photo of a bridge\">\n");
            }
            if p % 9 == 0 {
                g.planted.pair_occurrences += 1;
                bump(&mut g.planted.pair_rejects, "invalid_url");
                body.push_str("<img src=\"javascript:void(0)\" alt=\"画像\">\n");
            }
            if p == 44 || p == 46 {
                let path = format!("/media/broken{p}.jpg");
                let caption = format!("壊れた画像{p}");
                let bytes = g.image_bytes(Kind::Corrupt, true).unwrap();
                g.write_file(host, &path, &bytes);
                g.candidate(&format!("http://{host}{path}"), &caption, Kind::Corrupt);
                body.push_str(&format!("<img src=\"{path}\" alt=\"{caption}\">\n"));
            }
            if p == 42 {
                for k in 0..2 {
                    let u = format!("http://gone.example.jp/pic{k}.jpg");
                    let caption = format!("消えたサイトの画像{k}");
                    g.candidate(&u, &caption, Kind::Good);
                    g.survivors.last_mut().unwrap().0 = format!("gone:{u}");
                    body.push_str(&format!("<img src=\"{u}\" alt=\"{caption}\">\n"));
                }
            }
            body.push_str("</main><footer>フッター</footer>");
        }

        let base = (p % 8 == 3).then(|| format!("http://{host}/"));
        let html = page(lang, title, base.as_deref(), &body);
        if p < 5 {
            warc.write_record(RecordType::Request, &url, "application/http; msgtype=request", format!("GET /articles/{p:03}.html HTTP/1.1\r\nHost: {host}\r\n\r\n").as_bytes()).unwrap();
            g.planted.warc_records += 1;
        }
        if p == 13 {
            let sjis = html.replace("utf-8", "Shift_JIS");
            let (bytes, _, _) = encoding_rs::SHIFT_JIS.encode(&sjis);
            let payload = [format!("HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=Shift_JIS\r\nContent-Length: {}\r\n\r\n", bytes.len()).as_bytes(), &bytes].concat();
            warc.write_record(RecordType::Response, &url, "application/http; msgtype=response", &payload).unwrap();
        } else {
            warc.write_http_html(&url, &html).unwrap();
        }
        g.planted.warc_records += 1;
        g.planted.html_docs += 1;
        if p == 21 {
            let png = Gen::encode(&g.pattern(32, 32), ImageFormat::Png);
            let payload = [format!("HTTP/1.1 200 OK\r\nContent-Type: image/png\r\nContent-Length: {}\r\n\r\n", png.len()).as_bytes(), &png].concat();
            warc.write_record(RecordType::Response, "http://shop.example.jp/static/icon.png", "application/http; msgtype=response", &payload).unwrap();
            g.planted.warc_records += 1;
        }
    }
    fs::write(root.join("snapshot.warc.gz"), warc.finish().unwrap()).unwrap();

    for (url, kind) in std::mem::take(&mut g.survivors) {
        let outcome = if url.starts_with("robots:") {
            "robots_denied"
        } else if url.starts_with("gone:") {
            "connect_error"
        } else if kind == Kind::Missing {
            "http_error"
        } else {
            "ok"
        };
        bump(&mut g.planted.fetch_outcomes, outcome);
        if outcome != "ok" {
            continue;
        }
        match kind {
            Kind::TooSmall => bump(&mut g.planted.quality_rejects, "too_small"),
            Kind::BadAspect => bump(&mut g.planted.quality_rejects, "bad_aspect"),
            Kind::LowColor => bump(&mut g.planted.quality_rejects, "low_color"),
            Kind::Corrupt => bump(&mut g.planted.quality_rejects, "decode_failed"),
            _ => g.planted.quality_passed += 1,
        }
    }

    fs::write(
        root.join("waon.toml"),
        "# Bundled synthetic snapshot.\n\n[run]\nsnapshot_id = \"synthetic-01\"\ninputs = [\"snapshot.warc.gz\"]\nout_dir = \"out\"\noffline_root = \"images\"\nbatch_size = 32\n\n[dedup]\ncapacity = 10000\ntarget_fpr = 0.001\n\n[scoring]\nbackend = \"mock\"\n\n[output]\nshard_size = 25\n",
    )
    .unwrap();
    let mut planted = serde_json::to_string_pretty(&g.planted).unwrap();
    planted.push('\n');
    fs::write(root.join("planted.json"), planted).unwrap();
    println!("{}", root.display());
}
