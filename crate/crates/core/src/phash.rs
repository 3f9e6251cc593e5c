//! 64-bit DCT perceptual hash, bit-compatible with the widely used
//! `imagehash.phash` (hash size 8, high-frequency factor 4).
//!
//! The pipeline reproduces each step of that implementation exactly:
//!
//! 1. 8-bit luma with fixed-point Rec.601 weights
//!    (`(19595 R + 38470 G + 7471 B + 0x8000) >> 16`);
//! 2. Lanczos-3 resampling to 32x32 with 22-bit fixed-point coefficients,
//!    horizontal pass then vertical pass, each clamped to 8 bits;
//! 3. unnormalized 2-D DCT-II, keeping the top-left 8x8 block (DC included);
//! 4. each coefficient compared against the block median (strictly greater
//!    sets the bit), packed row-major, most significant bit first.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::image::DecodedImage;

const HASH_SIDE: usize = 8;
const RESIZED: usize = 32;
const PRECISION_BITS: u32 = 32 - 8 - 2;
const LANCZOS_SUPPORT: f64 = 3.0;

/// A 64-bit perceptual hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct PHash(pub u64);

impl PHash {
    /// Number of differing bits.
    pub fn hamming(self, other: PHash) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    /// Parses the 16-digit lowercase hex form.
    pub fn from_hex(s: &str) -> Option<PHash> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(PHash)
    }
}

impl fmt::Display for PHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

fn luma(img: &DecodedImage) -> Vec<u8> {
    img.pixels()
        .chunks_exact(3)
        .map(|p| ((u32::from(p[0]) * 19595 + u32::from(p[1]) * 38470 + u32::from(p[2]) * 7471 + 0x8000) >> 16) as u8)
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let x = x * PI;
    libm::sin(x) / x
}

fn lanczos(x: f64) -> f64 {
    if (-LANCZOS_SUPPORT..LANCZOS_SUPPORT).contains(&x) {
        sinc(x) * sinc(x / 3.0)
    } else {
        0.0
    }
}

/// Fixed-point resampling weights for one axis.
struct Kernel {
    /// `(first input index, tap count)` per output index.
    bounds: Vec<(usize, usize)>,
    ksize: usize,
    weights: Vec<i32>,
}

fn kernel(in_size: usize, out_size: usize) -> Kernel {
    let scale = in_size as f64 / out_size as f64;
    let filterscale = scale.max(1.0);
    let support = LANCZOS_SUPPORT * filterscale;
    let ksize = libm::ceil(support) as usize * 2 + 1;
    let mut bounds = Vec::with_capacity(out_size);
    let mut weights = vec![0i32; out_size * ksize];
    let mut taps = vec![0f64; ksize];
    for xx in 0..out_size {
        let center = (xx as f64 + 0.5) * scale;
        let ss = 1.0 / filterscale;
        // C casts truncate toward zero; anything negative clamps to 0 anyway.
        let xmin = ((center - support + 0.5) as i64).max(0) as usize;
        let xmax = ((center + support + 0.5) as i64).min(in_size as i64) as usize - xmin;
        let mut total = 0.0;
        for (x, tap) in taps.iter_mut().enumerate().take(xmax) {
            let w = lanczos((x as f64 + xmin as f64 - center + 0.5) * ss);
            *tap = w;
            total += w;
        }
        let row = &mut weights[xx * ksize..(xx + 1) * ksize];
        for (x, slot) in row.iter_mut().enumerate().take(xmax) {
            let w = if total != 0.0 { taps[x] / total } else { taps[x] };
            let scaled = w * f64::from(1u32 << PRECISION_BITS);
            *slot = if w < 0.0 { (-0.5 + scaled) as i32 } else { (0.5 + scaled) as i32 };
        }
        bounds.push((xmin, xmax));
    }
    Kernel { bounds, ksize, weights }
}

fn clip8(acc: i64) -> u8 {
    if acc >= 1i64 << (PRECISION_BITS + 8) {
        255
    } else if acc <= 0 {
        0
    } else {
        (acc >> PRECISION_BITS) as u8
    }
}

/// Lanczos resize of an 8-bit single-channel image.
fn resize_gray(src: &[u8], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<u8> {
    let mut cur = src.to_vec();
    let mut cur_w = width;
    if out_w != width {
        let k = kernel(width, out_w);
        let mut next = vec![0u8; out_w * height];
        for y in 0..height {
            let row = &cur[y * cur_w..(y + 1) * cur_w];
            for (xx, &(xmin, n)) in k.bounds.iter().enumerate() {
                let w = &k.weights[xx * k.ksize..];
                let mut acc: i64 = 1 << (PRECISION_BITS - 1);
                for x in 0..n {
                    acc += i64::from(row[xmin + x]) * i64::from(w[x]);
                }
                next[y * out_w + xx] = clip8(acc);
            }
        }
        cur = next;
        cur_w = out_w;
    }
    if out_h != height {
        let k = kernel(height, out_h);
        let mut next = vec![0u8; cur_w * out_h];
        for (yy, &(ymin, n)) in k.bounds.iter().enumerate() {
            let w = &k.weights[yy * k.ksize..];
            for xx in 0..cur_w {
                let mut acc: i64 = 1 << (PRECISION_BITS - 1);
                for y in 0..n {
                    acc += i64::from(cur[(ymin + y) * cur_w + xx]) * i64::from(w[y]);
                }
                next[yy * cur_w + xx] = clip8(acc);
            }
        }
        cur = next;
    }
    cur
}

/// Low-frequency 8x8 block of the (unnormalized) 2-D DCT-II of a 32x32
/// block. Scale factors are dropped since only the ordering matters.
fn dct_low_block(px: &[u8]) -> [f64; HASH_SIDE * HASH_SIDE] {
    let n = RESIZED;
    let mut cos = [[0f64; RESIZED]; HASH_SIDE];
    for (k, row) in cos.iter_mut().enumerate() {
        for (i, c) in row.iter_mut().enumerate() {
            *c = libm::cos(PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64);
        }
    }
    // columns first (axis 0), then rows
    let mut partial = [[0f64; RESIZED]; HASH_SIDE];
    for k in 0..HASH_SIDE {
        for col in 0..n {
            partial[k][col] = (0..n).map(|r| f64::from(px[r * n + col]) * cos[k][r]).sum();
        }
    }
    let mut out = [0f64; HASH_SIDE * HASH_SIDE];
    for k in 0..HASH_SIDE {
        for l in 0..HASH_SIDE {
            out[k * HASH_SIDE + l] = (0..n).map(|c| partial[k][c] * cos[l][c]).sum();
        }
    }
    out
}

/// Perceptual hash of `img`.
pub fn phash(img: &DecodedImage) -> PHash {
    let gray = luma(img);
    let small = resize_gray(&gray, img.width() as usize, img.height() as usize, RESIZED, RESIZED);
    let block = dct_low_block(&small);
    let mut sorted = block;
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    let median = (sorted[mid - 1] + sorted[mid]) / 2.0;
    let bits = block.iter().fold(0u64, |acc, &c| (acc << 1) | u64::from(c > median));
    PHash(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::SourceFormat;
    use alloc::string::ToString;

    fn checkerboard(side: u32, cell: u32) -> DecodedImage {
        let mut px = Vec::new();
        for y in 0..side {
            for x in 0..side {
                let v = if ((x / cell) + (y / cell)).is_multiple_of(2) { 255 } else { 0 };
                px.extend_from_slice(&[v, v, v]);
            }
        }
        DecodedImage::new(side, side, px, SourceFormat::Png).unwrap()
    }

    #[test]
    fn hex_round_trip() {
        let h = PHash(0x00ab_cdef_0123_4567);
        assert_eq!(h.to_string(), "00abcdef01234567");
        assert_eq!(PHash::from_hex("00abcdef01234567"), Some(h));
        assert_eq!(PHash::from_hex("abc"), None);
    }

    #[test]
    fn identical_buffers_hash_identically() {
        let a = checkerboard(256, 32);
        let b = DecodedImage::new(256, 256, a.pixels().to_vec(), SourceFormat::Jpeg).unwrap();
        assert_eq!(phash(&a), phash(&b));
    }

    #[test]
    fn luma_matches_fixed_point_weights() {
        let img = DecodedImage::new(3, 1, [255, 0, 0, 0, 255, 0, 0, 0, 255].to_vec(), SourceFormat::Png).unwrap();
        // 255*19595+0x8000 >> 16 = 76, 255*38470 -> 150, 255*7471 -> 29
        assert_eq!(luma(&img), [76, 150, 29]);
    }

    #[test]
    fn resize_identity_when_sizes_match() {
        let src: Vec<u8> = (0..32 * 32).map(|i| (i * 7 % 256) as u8).collect();
        assert_eq!(resize_gray(&src, 32, 32, 32, 32), src);
    }

    #[test]
    fn constant_image_resizes_to_constant() {
        let src = vec![200u8; 97 * 41];
        assert!(resize_gray(&src, 97, 41, 32, 32).iter().all(|&v| v == 200));
    }

    #[test]
    fn kernel_weights_sum_to_one_in_fixed_point() {
        for (inp, out) in [(97, 32), (256, 32), (17, 32), (32, 32)] {
            let k = kernel(inp, out);
            for xx in 0..out {
                let s: i64 = k.weights[xx * k.ksize..(xx + 1) * k.ksize].iter().map(|&w| i64::from(w)).sum();
                assert!((s - (1 << PRECISION_BITS)).abs() <= k.ksize as i64, "{inp}->{out} @ {xx}: {s}");
            }
        }
    }
}
