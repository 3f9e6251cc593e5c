//! (image URL, caption) candidates from `<img alt>` and `<figure>` /
//! `<figcaption>`.

use std::collections::BTreeMap;

use scraper::{ElementRef, Html, Selector};
use url::Url;
use waon_core::{contains_japanese, CaptionSource, HtmlDoc, PairCandidate};

use crate::html::visible_text;

/// Captions longer than this many code points are cut.
pub const MAX_CAPTION_CHARS: usize = 1024;

/// Resolves `raw` against `base`; lowercases scheme and host, drops the
/// fragment and percent-encodes what needs it. `None` for anything but an
/// absolute http(s) URL with a host.
pub fn normalize_url(raw: &str, base: &str) -> Option<String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    let base = Url::parse(base).ok();
    let mut url = match base {
        Some(b) => b.join(raw).ok()?,
        None => Url::parse(raw).ok()?,
    };
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none_or(str::is_empty) {
        return None;
    }
    url.set_fragment(None);
    Some(url.into())
}

/// Candidates of one document plus the bookkeeping behind them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    /// Valid candidates in document order.
    pub candidates: Vec<PairCandidate>,
    /// Raw occurrences that were dropped, by reason.
    pub rejects: BTreeMap<&'static str, u64>,
    /// Non-rejecting events (`caption_truncated`, `figure_extra_images`).
    pub notes: BTreeMap<&'static str, u64>,
}

impl Extraction {
    /// Raw occurrences examined.
    pub fn examined(&self) -> u64 {
        self.candidates.len() as u64 + self.rejects.values().sum::<u64>()
    }
}

fn truncate_caption(caption: &str, ex: &mut Extraction) -> String {
    match caption.char_indices().nth(MAX_CAPTION_CHARS) {
        Some((cut, _)) => {
            *ex.notes.entry("caption_truncated").or_insert(0) += 1;
            caption[..cut].to_string()
        }
        None => caption.to_string(),
    }
}

fn nearest_figure(el: ElementRef<'_>) -> Option<ElementRef<'_>> {
    el.ancestors().filter_map(ElementRef::wrap).find(|a| a.value().name() == "figure")
}

/// Extracts candidates from `doc`, resolving image URLs against its
/// `<base href>` or page URL.
///
/// Every `<img>` with a non-empty `alt` yields an `alt_attr` candidate at the
/// image. Every `<figure>` yields one `figcaption` candidate at its first
/// `<figcaption>`, paired with the figure's first `<img>`.
pub fn extract_pairs(doc: &HtmlDoc, snapshot_id: &str) -> Extraction {
    let html = Html::parse_document(&doc.raw_html);
    let base_sel = Selector::parse("base[href]").expect("static selector");
    let base = html
        .select(&base_sel)
        .next()
        .and_then(|b| normalize_url(b.value().attr("href").unwrap_or(""), &doc.url))
        .unwrap_or_else(|| doc.url.clone());
    let img_sel = Selector::parse("img").expect("static selector");

    let mut ex = Extraction::default();
    let mut seen_figures = Vec::new();
    for node in html.root_element().descendants() {
        let Some(el) = ElementRef::wrap(node) else { continue };
        let (src, caption, source) = match el.value().name() {
            "img" => {
                let alt = el.value().attr("alt").map(str::trim).unwrap_or("");
                if alt.is_empty() {
                    continue;
                }
                (el.value().attr("src").unwrap_or(""), alt.to_string(), CaptionSource::AltAttr)
            }
            "figcaption" => {
                let Some(figure) = nearest_figure(el) else { continue };
                if seen_figures.contains(&figure.id()) {
                    continue;
                }
                seen_figures.push(figure.id());
                let text = visible_text(el);
                let imgs: Vec<_> = figure.select(&img_sel).collect();
                if text.is_empty() || imgs.is_empty() {
                    continue;
                }
                if imgs.len() > 1 {
                    *ex.notes.entry("figure_extra_images").or_insert(0) += imgs.len() as u64 - 1;
                }
                (imgs[0].value().attr("src").unwrap_or(""), text, CaptionSource::Figcaption)
            }
            _ => continue,
        };
        let Some(image_url) = normalize_url(src, &base) else {
            *ex.rejects.entry("invalid_url").or_insert(0) += 1;
            continue;
        };
        if !contains_japanese(&caption) {
            *ex.rejects.entry("no_japanese").or_insert(0) += 1;
            continue;
        }
        let caption = truncate_caption(&caption, &mut ex);
        ex.candidates.push(PairCandidate {
            image_url,
            caption,
            caption_source: source,
            page_url: doc.url.clone(),
            snapshot_id: snapshot_id.to_string(),
            stage_scores: BTreeMap::new(),
        });
    }
    ex
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(url: &str, body: &str) -> HtmlDoc {
        HtmlDoc { url: url.into(), raw_html: body.into(), declared_lang: Some("ja".into()), title: Some("t".into()) }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_url("../i.png", "http://a.jp/x/y").as_deref(), Some("http://a.jp/i.png"));
        assert_eq!(normalize_url("javascript:void(0)", "http://a.jp/").as_deref(), None);
        assert_eq!(normalize_url("HTTP://A.JP/I.PNG#f", "http://a.jp/").as_deref(), Some("http://a.jp/I.PNG"));
        assert_eq!(normalize_url("data:image/png;base64,AAAA", "http://a.jp/"), None);
        assert_eq!(normalize_url("", "http://a.jp/"), None);
        assert_eq!(normalize_url("//cdn.jp/a b.jpg", "https://a.jp/").as_deref(), Some("https://cdn.jp/a%20b.jpg"));
        assert_eq!(normalize_url("http://[::1", "http://a.jp/"), None);
        assert_eq!(normalize_url("x.jpg", "not a url"), None);
    }

    #[test]
    fn alt_candidate() {
        let ex = extract_pairs(&doc("http://x.jp/p", r#"<img src="/a.jpg" alt="猫の写真">"#), "2025-18");
        assert_eq!(ex.candidates.len(), 1);
        let c = &ex.candidates[0];
        assert_eq!(c.image_url, "http://x.jp/a.jpg");
        assert_eq!(c.caption, "猫の写真");
        assert_eq!(c.caption_source, CaptionSource::AltAttr);
        assert_eq!(c.snapshot_id, "2025-18");
    }

    #[test]
    fn figcaption_candidate() {
        let ex = extract_pairs(&doc("http://x.jp/p/", "<figure><img src=\"b.png\"><figcaption>東京タワー</figcaption></figure>"), "s");
        assert_eq!(ex.candidates.len(), 1);
        assert_eq!(ex.candidates[0].caption_source, CaptionSource::Figcaption);
        assert_eq!(ex.candidates[0].image_url, "http://x.jp/p/b.png");
    }

    #[test]
    fn non_japanese_alt_is_dropped() {
        let ex = extract_pairs(&doc("http://x.jp/", r#"<img src="c.jpg" alt="hello world">"#), "s");
        assert!(ex.candidates.is_empty());
        assert_eq!(ex.rejects["no_japanese"], 1);
    }

    #[test]
    fn alt_and_figcaption_both_emitted_in_order() {
        let html = r#"<p><img src="0.jpg" alt="最初"></p>
            <figure><img src="1.jpg" alt="代替"><img src="2.jpg"><figcaption><b>図</b>の説明</figcaption></figure>
            <img src="javascript:x" alt="無効"><img src="3.jpg" alt="">"#;
        let ex = extract_pairs(&doc("http://x.jp/", html), "s");
        let got: Vec<_> = ex.candidates.iter().map(|c| (c.image_url.as_str(), c.caption.as_str(), c.caption_source)).collect();
        assert_eq!(
            got,
            [
                ("http://x.jp/0.jpg", "最初", CaptionSource::AltAttr),
                ("http://x.jp/1.jpg", "代替", CaptionSource::AltAttr),
                ("http://x.jp/1.jpg", "図の説明", CaptionSource::Figcaption),
            ]
        );
        assert_eq!(ex.rejects["invalid_url"], 1);
        assert_eq!(ex.notes["figure_extra_images"], 1);
        assert_eq!(ex.examined(), 4);
    }

    #[test]
    fn base_href_is_honored() {
        let ex = extract_pairs(&doc("http://x.jp/a/b", r#"<base href="http://cdn.jp/img/"><img src="k.jpg" alt="画像">"#), "s");
        assert_eq!(ex.candidates[0].image_url, "http://cdn.jp/img/k.jpg");
    }

    #[test]
    fn long_captions_are_truncated_on_char_boundary() {
        let long = "あ".repeat(MAX_CAPTION_CHARS + 10);
        let ex = extract_pairs(&doc("http://x.jp/", &format!(r#"<img src="a.jpg" alt="{long}">"#)), "s");
        assert_eq!(ex.candidates[0].caption.chars().count(), MAX_CAPTION_CHARS);
        assert_eq!(ex.notes["caption_truncated"], 1);
    }

    #[test]
    fn figure_without_caption_text_or_image_is_ignored() {
        let ex = extract_pairs(&doc("http://x.jp/", "<figure><img src=a.jpg><figcaption> </figcaption></figure><figure><figcaption>説明</figcaption></figure>"), "s");
        assert!(ex.candidates.is_empty());
        assert_eq!(ex.examined(), 0);
    }
}
