//! Numeric thresholds for the image-level filters, kept in one place so a
//! run's manifest can fingerprint them.

use core::fmt;

use serde::{Deserialize, Serialize};

/// Thresholds applied after images are downloaded.
///
/// Boundary semantics:
/// * `min_dim`: a side shorter than this is rejected (150 px passes).
/// * `aspect_min..=aspect_max`: width / height inside the closed range passes.
/// * `min_unique_colors`: at least this many distinct RGB triples are
///   required. It is 33 because the rule is "more than 32".
/// * `nsfw_max`: scores strictly above are dropped; equal is kept.
/// * `alignment_min`: scores strictly below are dropped; equal is kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Minimum width and height in pixels.
    pub min_dim: u32,
    /// Lowest accepted width / height ratio.
    pub aspect_min: f64,
    /// Highest accepted width / height ratio.
    pub aspect_max: f64,
    /// Minimum number of distinct RGB colors.
    pub min_unique_colors: u32,
    /// Highest accepted NSFW score.
    pub nsfw_max: f64,
    /// Lowest accepted image-text alignment score.
    pub alignment_min: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_dim: 150,
            aspect_min: 0.5,
            aspect_max: 2.0,
            min_unique_colors: 33,
            nsfw_max: 0.1,
            alignment_min: 0.1,
        }
    }
}

/// A field of [`FilterConfig`] that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Dotted field name.
    pub field: &'static str,
    /// What is wrong with it.
    pub message: &'static str,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

fn in_range(x: f64, lo: f64, hi: f64) -> bool {
    x.is_finite() && x >= lo && x <= hi
}

impl FilterConfig {
    /// Returns every violated invariant, empty when the config is usable.
    pub fn validate(&self) -> alloc::vec::Vec<ConfigError> {
        let mut errs = alloc::vec::Vec::new();
        let mut push = |field, message| errs.push(ConfigError { field, message });
        if self.min_dim == 0 {
            push("filters.min_dim", "must be at least 1");
        }
        if !(self.aspect_min.is_finite() && self.aspect_min > 0.0) {
            push("filters.aspect_min", "must be a positive finite ratio");
        }
        if !(self.aspect_max.is_finite() && self.aspect_max > 0.0) {
            push("filters.aspect_max", "must be a positive finite ratio");
        }
        if self.aspect_min > self.aspect_max {
            push("filters.aspect_min", "must not exceed filters.aspect_max");
        }
        if self.min_unique_colors == 0 {
            push("filters.min_unique_colors", "must be at least 1");
        }
        if !in_range(self.nsfw_max, 0.0, 1.0) {
            push("filters.nsfw_max", "must lie in [0, 1]");
        }
        if !in_range(self.alignment_min, -1.0, 1.0) {
            push("filters.alignment_min", "must lie in [-1, 1]");
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = FilterConfig::default();
        assert!(cfg.validate().is_empty());
        assert_eq!(cfg.min_dim, 150);
        assert_eq!(cfg.min_unique_colors, 33);
    }

    #[test]
    fn inverted_aspect_range_is_rejected() {
        let cfg = FilterConfig { aspect_min: 2.5, ..Default::default() };
        let errs = cfg.validate();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "filters.aspect_min");
    }

    #[test]
    fn out_of_range_scores_are_rejected() {
        let cfg = FilterConfig { nsfw_max: 1.5, alignment_min: -2.0, ..Default::default() };
        let fields: alloc::vec::Vec<_> = cfg.validate().into_iter().map(|e| e.field).collect();
        assert_eq!(fields, ["filters.nsfw_max", "filters.alignment_min"]);
    }
}
