//! Per-snapshot run manifest and the histogram plot.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use waon_core::{AlignmentHistogram, BloomParams, FilterConfig, LangConfig, StageLedger};

use crate::records::{hex, sha256};

/// Current manifest schema.
pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to audit one snapshot's run. Contains no timestamps so
/// identical inputs give byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Schema version.
    pub manifest_version: u32,
    /// Snapshot id.
    pub snapshot_id: String,
    /// SHA-256 over the filter thresholds and Bloom parameters.
    pub config_fingerprint: String,
    /// Thresholds in effect.
    pub filters: FilterConfig,
    /// Bloom parameters in effect.
    pub bloom: BloomParams,
    /// Language gate settings.
    pub lang: LangConfig,
    /// Scorer identity (`mock` or the sidecar's model).
    pub scorer: String,
    /// Per-stage counters in pipeline order.
    pub stages: StageLedger,
    /// Alignment scores seen by the alignment filter, before thresholding.
    pub alignment_histogram: AlignmentHistogram,
    /// Output of the last stage.
    pub final_count: u64,
}

/// Digest identifying a threshold and Bloom configuration.
pub fn config_fingerprint(filters: &FilterConfig, bloom: &BloomParams) -> String {
    #[derive(Serialize)]
    struct Fp<'a> {
        filters: &'a FilterConfig,
        bloom: &'a BloomParams,
    }
    let json = serde_json::to_vec(&Fp { filters, bloom }).expect("serializable");
    hex(&sha256(&json))
}

impl Manifest {
    /// Canonical serialized form.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    /// SHA-256 of [`Manifest::to_json`].
    pub fn digest(&self) -> String {
        hex(&sha256(self.to_json().as_bytes()))
    }
}

/// Renders the histogram as an SVG bar chart with the threshold marked.
pub fn histogram_svg(hist: &AlignmentHistogram, threshold: f64, title: &str) -> String {
    const W: f64 = 800.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 50.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bins = hist.counts.len().max(1) as f64;
    let bar_w = plot_w / bins;
    let (lo, hi) = (f64::from(hist.lo), f64::from(hist.hi));
    let x_of = |v: f64| LEFT + (v - lo) / (hi - lo) * plot_w;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    for (i, &c) in hist.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let h = c as f64 / max * plot_h;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4c72b0"/>"##,
            LEFT + i as f64 * bar_w,
            TOP + plot_h - h,
            bar_w,
            h
        );
    }
    let base = TOP + plot_h;
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, W - RIGHT);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{v:.1}</text>"#, x_of(v), base + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{}" text-anchor="end">{}</text>"#, TOP + 4.0, max as u64);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{base}" text-anchor="end">0</text>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">alignment score</text>"#, LEFT + plot_w / 2.0, H - 10.0);
    if (lo..=hi).contains(&threshold) {
        let tx = x_of(threshold);
        let _ = writeln!(s, r#"<line x1="{tx:.2}" y1="{TOP}" x2="{tx:.2}" y2="{base}" stroke="red" stroke-dasharray="4 3"/>"#);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" fill="red">{threshold}</text>"#, tx + 4.0, TOP + 12.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
