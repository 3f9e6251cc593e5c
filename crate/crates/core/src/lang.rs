//! Document-level gate: non-empty title, then language from the declared
//! `lang` attribute, falling back to a detector run on the extracted text.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::japanese::{is_japanese_char, is_kana};

/// An HTML response body ready for gating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtmlDoc {
    /// Page URL.
    pub url: String,
    /// Charset-decoded markup.
    pub raw_html: String,
    /// `lang` attribute of the root element, if any.
    pub declared_lang: Option<String>,
    /// Text of the first `<title>`, if any.
    pub title: Option<String>,
}

/// How a gate decision was reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangMethod {
    /// Accepted from the root `lang` attribute.
    DeclaredAttr,
    /// Accepted by running the detector on the main text.
    DetectorOnText,
    /// Title missing or blank.
    RejectedNoTitle,
    /// Detected language differs or confidence too low.
    RejectedLanguage,
    /// No main text to run the detector on.
    RejectedNoText,
}

impl LangMethod {
    /// Stats name.
    pub fn as_str(self) -> &'static str {
        match self {
            LangMethod::DeclaredAttr => "declared_attr",
            LangMethod::DetectorOnText => "detector_on_text",
            LangMethod::RejectedNoTitle => "rejected_no_title",
            LangMethod::RejectedLanguage => "rejected_language",
            LangMethod::RejectedNoText => "rejected_no_text",
        }
    }
}

/// Outcome of [`gate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangDecision {
    /// Whether the document continues down the pipeline.
    pub accepted: bool,
    /// Path taken.
    pub method: LangMethod,
    /// Detector output when it ran.
    pub detected_lang: Option<String>,
    /// Detector confidence when it ran.
    pub confidence: Option<f64>,
}

impl LangDecision {
    fn by(method: LangMethod) -> Self {
        let accepted = matches!(method, LangMethod::DeclaredAttr | LangMethod::DetectorOnText);
        Self { accepted, method, detected_lang: None, confidence: None }
    }
}

/// A language guess.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Lowercase ISO 639-1 code, or `und`.
    pub lang: String,
    /// Confidence in [0, 1].
    pub confidence: f64,
}

/// Maps text to a language guess.
pub trait LanguageDetector {
    /// `None` when the text carries no usable signal.
    fn detect(&self, text: &str) -> Option<Detection>;
}

impl<F> LanguageDetector for F
where
    F: Fn(&str) -> Option<Detection>,
{
    fn detect(&self, text: &str) -> Option<Detection> {
        self(text)
    }
}

/// Gate settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LangConfig {
    /// Primary language subtag to keep.
    pub target_lang: String,
    /// Minimum detector confidence.
    pub lang_min_confidence: f64,
}

impl Default for LangConfig {
    fn default() -> Self {
        Self { target_lang: "ja".to_string(), lang_min_confidence: 0.7 }
    }
}

/// Primary subtag of a BCP-47 tag, e.g. `ja` for `ja-JP` or `JA_jp`.
pub fn primary_subtag(tag: &str) -> &str {
    tag.trim().split(['-', '_']).next().unwrap_or("")
}

/// Gates `doc`. `main_text` is only called (at most once) when the declared
/// language does not already match, so the detector is skipped for the
/// common case.
pub fn gate<D, F>(doc: &HtmlDoc, cfg: &LangConfig, detector: &D, main_text: F) -> LangDecision
where
    D: LanguageDetector + ?Sized,
    F: FnOnce(&HtmlDoc) -> String,
{
    if doc.title.as_deref().is_none_or(|t| t.trim().is_empty()) {
        return LangDecision::by(LangMethod::RejectedNoTitle);
    }
    if let Some(declared) = &doc.declared_lang {
        if primary_subtag(declared).eq_ignore_ascii_case(&cfg.target_lang) {
            return LangDecision::by(LangMethod::DeclaredAttr);
        }
    }
    let text = main_text(doc);
    if text.trim().is_empty() {
        return LangDecision::by(LangMethod::RejectedNoText);
    }
    match detector.detect(&text) {
        Some(d) => {
            let ok = primary_subtag(&d.lang).eq_ignore_ascii_case(&cfg.target_lang)
                && d.confidence >= cfg.lang_min_confidence;
            let method = if ok { LangMethod::DetectorOnText } else { LangMethod::RejectedLanguage };
            LangDecision { accepted: ok, method, detected_lang: Some(d.lang), confidence: Some(d.confidence) }
        }
        None => LangDecision::by(LangMethod::RejectedLanguage),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Script {
    Kana,
    Han,
    Hangul,
    Latin,
    Cyrillic,
    Greek,
    Arabic,
    Hebrew,
    Thai,
    Devanagari,
}

fn script_of(c: char) -> Option<Script> {
    let cp = c as u32;
    Some(match cp {
        _ if is_kana(c) => Script::Kana,
        _ if is_japanese_char(c) => Script::Han,
        0xF900..=0xFAFF | 0x20000..=0x2FFFF => Script::Han,
        0xAC00..=0xD7AF | 0x1100..=0x11FF | 0x3130..=0x318F => Script::Hangul,
        0x0370..=0x03FF => Script::Greek,
        0x0400..=0x052F => Script::Cyrillic,
        0x0590..=0x05FF => Script::Hebrew,
        0x0600..=0x06FF | 0x0750..=0x077F => Script::Arabic,
        0x0900..=0x097F => Script::Devanagari,
        0x0E00..=0x0E7F => Script::Thai,
        _ if c.is_ascii_alphabetic() => Script::Latin,
        0x00C0..=0x024F if c.is_alphabetic() => Script::Latin,
        _ => return None,
    })
}

const STOPWORDS: [(&str, &[&str]); 7] = [
    ("en", &["the", "and", "of", "to", "is", "in", "that", "for", "with", "this", "are", "was", "on", "you"]),
    ("de", &["der", "die", "und", "das", "ist", "nicht", "ein", "eine", "mit", "den", "sich", "auch", "auf"]),
    ("fr", &["le", "la", "les", "et", "des", "est", "une", "un", "du", "pour", "dans", "que", "pas", "sur"]),
    ("es", &["el", "los", "las", "y", "es", "una", "por", "con", "para", "del", "que", "como", "pero"]),
    ("it", &["il", "di", "che", "è", "gli", "una", "per", "non", "sono", "della", "con", "anche"]),
    ("pt", &["o", "os", "as", "e", "não", "uma", "para", "com", "do", "da", "que", "em", "por"]),
    ("nl", &["de", "het", "een", "en", "van", "is", "niet", "dat", "op", "voor", "met", "zijn"]),
];

/// Offline baseline detector: script frequencies, plus stopword counts to
/// separate Latin-script languages.
///
/// Japanese is reported when kana is present and kana + kanji dominate;
/// kanji without any kana reads as Chinese.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptDetector;

impl ScriptDetector {
    fn latin_language(text: &str) -> (&'static str, f64) {
        let mut hits = [0usize; STOPWORDS.len()];
        let mut words = 0usize;
        for word in text.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()) {
            words += 1;
            let lower = word.to_lowercase();
            for (i, (_, list)) in STOPWORDS.iter().enumerate() {
                if list.contains(&lower.as_str()) {
                    hits[i] += 1;
                }
            }
        }
        let total: usize = hits.iter().sum();
        if total == 0 || words == 0 {
            return ("und", 0.0);
        }
        let (best, &n) = hits.iter().enumerate().max_by_key(|&(i, &n)| (n, core::cmp::Reverse(i))).unwrap();
        (STOPWORDS[best].0, n as f64 / total as f64)
    }
}

impl LanguageDetector for ScriptDetector {
    fn detect(&self, text: &str) -> Option<Detection> {
        let mut counts: Vec<(Script, usize)> = Vec::new();
        let mut letters = 0usize;
        for s in text.chars().filter_map(script_of) {
            letters += 1;
            match counts.iter_mut().find(|(k, _)| *k == s) {
                Some((_, n)) => *n += 1,
                None => counts.push((s, 1)),
            }
        }
        if letters == 0 {
            return None;
        }
        let count = |s: Script| counts.iter().find(|(k, _)| *k == s).map_or(0, |c| c.1);
        let kana = count(Script::Kana);
        let han = count(Script::Han);
        let cjk = kana + han;
        let frac = |n: usize| n as f64 / letters as f64;
        let (lang, confidence) = if kana > 0 && cjk * 2 >= letters {
            ("ja", frac(cjk))
        } else {
            let (top, n) = counts.iter().copied().max_by_key(|&(s, n)| (n, core::cmp::Reverse(s as u8))).unwrap();
            match top {
                Script::Kana => ("ja", frac(cjk)),
                Script::Han => ("zh", frac(n)),
                Script::Hangul => ("ko", frac(n)),
                Script::Cyrillic => ("ru", frac(n)),
                Script::Greek => ("el", frac(n)),
                Script::Arabic => ("ar", frac(n)),
                Script::Hebrew => ("he", frac(n)),
                Script::Thai => ("th", frac(n)),
                Script::Devanagari => ("hi", frac(n)),
                Script::Latin => {
                    let (l, c) = Self::latin_language(text);
                    (l, c * frac(n))
                }
            }
        };
        Some(Detection { lang: lang.to_string(), confidence })
    }
}
