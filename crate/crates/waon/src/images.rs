//! Byte-level image decoding into [`DecodedImage`].

use std::io::Cursor;

use image::{DynamicImage, ImageDecoder, ImageFormat, ImageReader};
use waon_core::{DecodedImage, SourceFormat};

/// Why bytes could not become an image. Recorded as `decode_failed`.
#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    /// Format could not be identified or is not one we handle.
    #[error("unsupported image format")]
    Unsupported,
    /// The decoder failed.
    #[error("decode failed: {0}")]
    Image(#[from] image::ImageError),
    /// Decoded geometry is unusable.
    #[error("decoded image invalid: {0}")]
    Geometry(#[from] waon_core::ImageError),
}

fn source_format(fmt: ImageFormat) -> Option<SourceFormat> {
    Some(match fmt {
        ImageFormat::Jpeg => SourceFormat::Jpeg,
        ImageFormat::Png => SourceFormat::Png,
        ImageFormat::WebP => SourceFormat::Webp,
        ImageFormat::Gif => SourceFormat::GifFirstFrame,
        _ => return None,
    })
}

/// Decodes JPEG, PNG, WebP or the first GIF frame to RGB8, with EXIF
/// orientation applied so width and height reflect display geometry.
pub fn decode(bytes: &[u8]) -> Result<DecodedImage, DecodeError> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format().map_err(image::ImageError::IoError)?;
    let format = reader.format().and_then(source_format).ok_or(DecodeError::Unsupported)?;
    let mut decoder = reader.into_decoder()?;
    let orientation = decoder.orientation()?;
    let mut img = DynamicImage::from_decoder(decoder)?;
    img.apply_orientation(orientation);
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(DecodedImage::new(w, h, rgb.into_raw(), format)?)
}

/// Encodes RGB pixels as PNG.
pub fn encode_png(img: &DecodedImage) -> Vec<u8> {
    let buf = image::RgbImage::from_raw(img.width(), img.height(), img.pixels().to_vec())
        .expect("DecodedImage geometry is validated");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let img = DecodedImage::new(2, 1, vec![1, 2, 3, 250, 251, 252], SourceFormat::Other).unwrap();
        let back = decode(&encode_png(&img)).unwrap();
        assert_eq!(back.pixels(), img.pixels());
        assert_eq!(back.source_format(), SourceFormat::Png);
    }

    #[test]
    fn garbage_is_unsupported() {
        assert!(matches!(decode(b"<html>not an image</html>"), Err(DecodeError::Unsupported)));
        assert!(decode(b"\x89PNG\r\n\x1a\n truncated").is_err());
    }
}
