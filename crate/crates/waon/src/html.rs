//! HTML documents out of WARC responses, and the default main-text
//! extractor.

use std::io::Read;

use encoding_rs::{Encoding, UTF_8};
use flate2::read::{GzDecoder, ZlibDecoder};
use scraper::{ElementRef, Html, Node, Selector};
use waon_core::HtmlDoc;

use crate::warc::{RecordType, WarcRecord};

/// Elements whose content is never visible text.
const SKIPPED: &[&str] = &["script", "style", "nav", "noscript", "head", "template", "svg", "iframe", "object", "canvas"];

/// Elements that break a text run.
const BLOCKS: &[&str] = &[
    "address", "article", "aside", "blockquote", "br", "dd", "details", "div", "dl", "dt", "fieldset", "figcaption",
    "figure", "footer", "form", "h1", "h2", "h3", "h4", "h5", "h6", "header", "hr", "li", "main", "ol", "p", "pre",
    "section", "summary", "table", "td", "th", "tr", "ul", "option", "body",
];

/// Collapses whitespace runs to one space and trims.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Visible text of `doc`: script, style, nav and noscript content removed,
/// block elements separated by spaces, whitespace collapsed.
pub fn extract_main_text(doc: &HtmlDoc) -> String {
    let html = Html::parse_document(&doc.raw_html);
    visible_text(html.root_element())
}

/// Visible text below `el`, by the same rules as [`extract_main_text`].
pub fn visible_text(el: ElementRef<'_>) -> String {
    let mut out = String::new();
    walk(*el, &mut out);
    normalize_ws(&out)
}

fn walk(node: ego_tree::NodeRef<'_, Node>, out: &mut String) {
    match node.value() {
        Node::Text(t) => out.push_str(t),
        Node::Element(e) => {
            let name = e.name();
            if SKIPPED.contains(&name) {
                return;
            }
            let block = BLOCKS.contains(&name);
            if block {
                out.push(' ');
            }
            for child in node.children() {
                walk(child, out);
            }
            if block {
                out.push(' ');
            }
        }
        _ => {
            for child in node.children() {
                walk(child, out);
            }
        }
    }
}

/// Root `lang` attribute and first `<title>` text of a parsed document.
pub fn lang_and_title(html: &Html) -> (Option<String>, Option<String>) {
    let lang = html.root_element().value().attr("lang").map(|l| l.trim().to_string()).filter(|l| !l.is_empty());
    let sel = Selector::parse("title").expect("static selector");
    let title = html.select(&sel).next().map(|t| normalize_ws(&t.text().collect::<String>()));
    (lang, title)
}

/// MIME type without parameters, lowercased.
fn mime_of(content_type: &str) -> String {
    content_type.split(';').next().unwrap_or("").trim().to_ascii_lowercase()
}

fn charset_param(content_type: &str) -> Option<&str> {
    content_type.split(';').skip(1).find_map(|p| {
        let (k, v) = p.split_once('=')?;
        k.trim().eq_ignore_ascii_case("charset").then(|| v.trim().trim_matches(['"', '\'']))
    })
}

/// Charset named by a `<meta>` tag in the first 4 KiB.
fn meta_charset(body: &[u8]) -> Option<&'static Encoding> {
    let head = &body[..body.len().min(4096)];
    let lower: Vec<u8> = head.to_ascii_lowercase();
    let mut from = 0;
    while let Some(i) = find(&lower[from..], b"<meta") {
        let start = from + i;
        let end = find(&lower[start..], b">").map_or(lower.len(), |e| start + e);
        let tag = &lower[start..end];
        if let Some(c) = find(tag, b"charset=") {
            let rest = &tag[c + 8..];
            let rest: Vec<u8> = rest.iter().copied().skip_while(|b| *b == b'"' || *b == b'\'').collect();
            let label: Vec<u8> = rest.into_iter().take_while(|b| b.is_ascii_alphanumeric() || b"-_:.".contains(b)).collect();
            if let Some(enc) = Encoding::for_label(&label) {
                return Some(enc);
            }
        }
        from = end;
    }
    None
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Decodes `body` as text: header charset, then `<meta>` charset, then UTF-8.
/// Returns the text and whether any bytes had to be replaced.
pub fn decode_text(body: &[u8], content_type: &str) -> (String, bool) {
    let enc = charset_param(content_type)
        .and_then(|l| Encoding::for_label(l.as_bytes()))
        .or_else(|| meta_charset(body))
        .unwrap_or(UTF_8);
    let (text, _, lossy) = enc.decode(body);
    (text.into_owned(), lossy)
}

/// An HTTP response split out of a `response` record payload.
struct HttpMessage {
    content_type: String,
    body: Vec<u8>,
}

fn dechunk(mut data: &[u8]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    loop {
        let eol = find(data, b"\r\n")?;
        let size_str = std::str::from_utf8(&data[..eol]).ok()?;
        let size = usize::from_str_radix(size_str.split(';').next()?.trim(), 16).ok()?;
        data = &data[eol + 2..];
        if size == 0 {
            return Some(out);
        }
        out.extend_from_slice(data.get(..size)?);
        data = data.get(size + 2..).unwrap_or(&[]);
    }
}

fn parse_http(payload: &[u8]) -> Option<HttpMessage> {
    let (head_end, sep) = match find(payload, b"\r\n\r\n") {
        Some(i) => (i, 4),
        None => (find(payload, b"\n\n")?, 2),
    };
    let head = String::from_utf8_lossy(&payload[..head_end]);
    let mut lines = head.lines();
    let status = lines.next()?;
    if !status.starts_with("HTTP/") {
        return None;
    }
    let code: u16 = status.split_whitespace().nth(1)?.parse().ok()?;
    if !(200..300).contains(&code) {
        return None;
    }
    let mut content_type = String::new();
    let mut chunked = false;
    let mut encoding = String::new();
    for line in lines {
        let Some((k, v)) = line.split_once(':') else { continue };
        match k.trim().to_ascii_lowercase().as_str() {
            "content-type" => content_type = v.trim().to_string(),
            "transfer-encoding" => chunked = v.to_ascii_lowercase().contains("chunked"),
            "content-encoding" => encoding = v.trim().to_ascii_lowercase(),
            _ => {}
        }
    }
    let mut body = payload[head_end + sep..].to_vec();
    if chunked {
        // Crawlers often store the payload already de-chunked.
        if let Some(b) = dechunk(&body) {
            body = b;
        }
    }
    let body = match encoding.as_str() {
        "" | "identity" => body,
        "gzip" | "x-gzip" => {
            let mut out = Vec::new();
            GzDecoder::new(&body[..]).read_to_end(&mut out).ok()?;
            out
        }
        "deflate" => {
            let mut out = Vec::new();
            ZlibDecoder::new(&body[..]).read_to_end(&mut out).ok()?;
            out
        }
        _ => return None,
    };
    Some(HttpMessage { content_type, body })
}

/// Result of turning a record into a document.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedDoc {
    /// The document.
    pub doc: HtmlDoc,
    /// Whether charset decoding replaced invalid bytes.
    pub lossy: bool,
}

/// HTML document from a `response` record whose payload is HTML, either
/// directly (`Content-Type: text/html`) or wrapped in an HTTP message
/// (`application/http`).
pub fn decode_record(record: &WarcRecord) -> Option<DecodedDoc> {
    if record.record_type != RecordType::Response {
        return None;
    }
    let mime = mime_of(&record.content_type);
    let msg = if mime == "application/http" {
        parse_http(&record.body)?
    } else {
        HttpMessage { content_type: record.content_type.clone(), body: record.body.clone() }
    };
    if !matches!(mime_of(&msg.content_type).as_str(), "text/html" | "application/xhtml+xml") {
        return None;
    }
    let (raw_html, lossy) = decode_text(&msg.body, &msg.content_type);
    let parsed = Html::parse_document(&raw_html);
    let (declared_lang, title) = lang_and_title(&parsed);
    Some(DecodedDoc { doc: HtmlDoc { url: record.target_uri.clone(), raw_html, declared_lang, title }, lossy })
}

/// [`decode_record`] without the lossy flag.
pub fn to_html_doc(record: &WarcRecord) -> Option<HtmlDoc> {
    decode_record(record).map(|d| d.doc)
}
