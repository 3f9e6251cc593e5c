//! Decoded RGB images and the heuristic quality gate.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::config::FilterConfig;

/// Container format an image was decoded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    /// JPEG.
    Jpeg,
    /// PNG.
    Png,
    /// WebP.
    Webp,
    /// First frame of a GIF.
    GifFirstFrame,
    /// Anything else the decoder accepted.
    Other,
}

/// Invalid image geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageError {
    /// Width or height of zero.
    Empty,
    /// Buffer length is not width * height * 3.
    BufferSize {
        /// Expected byte count.
        expected: usize,
        /// Actual byte count.
        actual: usize,
    },
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::Empty => f.write_str("image has a zero dimension"),
            ImageError::BufferSize { expected, actual } => {
                write!(f, "pixel buffer holds {actual} bytes, expected {expected}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ImageError {}

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    source_format: SourceFormat,
}

impl DecodedImage {
    /// Wraps a pixel buffer after checking its geometry.
    pub fn new(width: u32, height: u32, pixels: Vec<u8>, source_format: SourceFormat) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImageError::BufferSize { expected, actual: pixels.len() });
        }
        Ok(Self { width, height, pixels, source_format })
    }

    /// Image filled with a single color.
    pub fn solid(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.repeat(n), SourceFormat::Other)
    }

    /// Width in pixels.
    pub fn width(&self) -> u32 {
        self.width
    }

    /// Height in pixels.
    pub fn height(&self) -> u32 {
        self.height
    }

    /// The RGB8 buffer.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Decoder the image came from.
    pub fn source_format(&self) -> SourceFormat {
        self.source_format
    }

    /// Pixel at `(x, y)`.
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Why the quality gate rejected an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityReject {
    /// A side is shorter than `min_dim`.
    TooSmall,
    /// Width / height outside the aspect range.
    BadAspect,
    /// Fewer distinct colors than `min_unique_colors`.
    LowColor,
}

impl QualityReject {
    /// Stats reason name.
    pub fn as_str(self) -> &'static str {
        match self {
            QualityReject::TooSmall => "too_small",
            QualityReject::BadAspect => "bad_aspect",
            QualityReject::LowColor => "low_color",
        }
    }
}

/// Size, aspect and color-diversity checks, in that order; the first failure
/// is reported.
pub fn quality_gate(img: &DecodedImage, cfg: &FilterConfig) -> Result<(), QualityReject> {
    if img.width < cfg.min_dim || img.height < cfg.min_dim {
        return Err(QualityReject::TooSmall);
    }
    let ratio = f64::from(img.width) / f64::from(img.height);
    if ratio < cfg.aspect_min || ratio > cfg.aspect_max {
        return Err(QualityReject::BadAspect);
    }
    if count_unique_colors(img, cfg.min_unique_colors as usize) < cfg.min_unique_colors as usize {
        return Err(QualityReject::LowColor);
    }
    Ok(())
}

/// Distinct RGB triples over every pixel, saturating at `cap`.
pub fn count_unique_colors(img: &DecodedImage, cap: usize) -> usize {
    let mut seen = BTreeSet::new();
    for px in img.pixels.chunks_exact(3) {
        let rgb = u32::from(px[0]) << 16 | u32::from(px[1]) << 8 | u32::from(px[2]);
        if seen.insert(rgb) && seen.len() >= cap {
            return cap;
        }
    }
    seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// `w`x`h` image cycling through `colors` distinct grays-ish triples.
    pub(crate) fn palette_image(w: u32, h: u32, colors: u32) -> DecodedImage {
        let mut px = Vec::with_capacity((w * h * 3) as usize);
        for i in 0..w * h {
            let c = i % colors;
            px.extend_from_slice(&[c as u8, (c >> 8) as u8, 7]);
        }
        DecodedImage::new(w, h, px, SourceFormat::Png).unwrap()
    }

    #[test]
    fn geometry_is_checked() {
        assert_eq!(DecodedImage::new(0, 3, vec![], SourceFormat::Png), Err(ImageError::Empty));
        assert_eq!(
            DecodedImage::new(2, 2, vec![0; 11], SourceFormat::Png),
            Err(ImageError::BufferSize { expected: 12, actual: 11 })
        );
    }

    #[test]
    fn gate_examples() {
        let cfg = FilterConfig::default();
        assert_eq!(quality_gate(&palette_image(100, 300, 64), &cfg), Err(QualityReject::TooSmall));
        assert_eq!(quality_gate(&palette_image(600, 200, 64), &cfg), Err(QualityReject::BadAspect));
        let solid = DecodedImage::solid(200, 200, [10, 20, 30]).unwrap();
        assert_eq!(quality_gate(&solid, &cfg), Err(QualityReject::LowColor));
        assert_eq!(quality_gate(&palette_image(200, 400, 64), &cfg), Ok(()));
        assert_eq!(quality_gate(&palette_image(400, 200, 64), &cfg), Ok(()));
    }

    #[test]
    fn checks_apply_in_order() {
        // too small and badly shaped and single-colored: size wins
        let img = DecodedImage::solid(20, 140, [0, 0, 0]).unwrap();
        assert_eq!(quality_gate(&img, &FilterConfig::default()), Err(QualityReject::TooSmall));
        let img = DecodedImage::solid(600, 150, [0, 0, 0]).unwrap();
        assert_eq!(quality_gate(&img, &FilterConfig::default()), Err(QualityReject::BadAspect));
    }

    #[test]
    fn unique_color_examples() {
        let red = [255, 0, 0];
        let px = [red, red, [0, 255, 0], [0, 0, 255]].concat();
        let img = DecodedImage::new(2, 2, px, SourceFormat::Png).unwrap();
        assert_eq!(count_unique_colors(&img, 64), 3);
        assert_eq!(count_unique_colors(&palette_image(32, 32, 1024), 64), 64);
        assert_eq!(count_unique_colors(&DecodedImage::solid(1, 1, [1, 2, 3]).unwrap(), 64), 1);
    }
}
