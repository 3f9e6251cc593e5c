//! Memory-bounded Bloom filter keyed by 128-bit digests.
//!
//! Bit positions come from double hashing the two 64-bit halves of the
//! digest, so each probe costs no extra hashing. A filter has a single
//! writer: [`BloomFilter::check_and_insert`] takes `&mut self`, and callers
//! that fan work out across threads funnel keys back to the owner.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// File magic of the persisted form.
pub const MAGIC: [u8; 4] = *b"BLMF";
/// Version written into the persisted header.
pub const FORMAT_VERSION: u16 = 1;
/// Length of the fixed header: magic, version, k, seed.
pub const HEADER_LEN: usize = 16;

/// Sizing parameters for one filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BloomParams {
    /// Expected number of distinct insertions.
    pub capacity: u64,
    /// False-positive rate at `capacity` insertions.
    pub target_fpr: f64,
    /// Hash seed.
    pub seed: u64,
}

impl Default for BloomParams {
    fn default() -> Self {
        Self { capacity: 200_000_000, target_fpr: 0.001, seed: 0x5741_4f4e }
    }
}

/// Failure to size or restore a filter.
#[derive(Debug, Clone, PartialEq)]
pub enum BloomError {
    /// Capacity of zero.
    ZeroCapacity,
    /// Target rate outside (0, 1).
    InvalidRate(f64),
    /// The bit array for these parameters cannot be addressed.
    TooLarge {
        /// Requested bit count.
        bits: f64,
    },
    /// The hash count does not fit the persisted header.
    TooManyHashes(u64),
    /// Persisted bytes are not a valid filter.
    Corrupt(&'static str),
}

impl fmt::Display for BloomError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BloomError::ZeroCapacity => f.write_str("bloom capacity must be at least 1"),
            BloomError::InvalidRate(p) => write!(f, "bloom target rate {p} is outside (0, 1)"),
            BloomError::TooLarge { bits } => write!(f, "bloom filter of {bits:.0} bits exceeds addressable memory"),
            BloomError::TooManyHashes(k) => write!(f, "bloom hash count {k} does not fit in 16 bits"),
            BloomError::Corrupt(why) => write!(f, "corrupt bloom filter: {why}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for BloomError {}

/// Optimal `(m, k)` for `capacity` items at rate `target_fpr`.
///
/// `m = ceil(-n ln p / ln(2)^2)` and `k = ceil((m / n) ln 2)`, where the
/// `m` inside the hash count is the real-valued optimum before rounding,
/// so `k = ceil(log2(1 / p))`.
pub fn optimal_dimensions(capacity: u64, target_fpr: f64) -> Result<(u64, u32), BloomError> {
    if capacity == 0 {
        return Err(BloomError::ZeroCapacity);
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(BloomError::InvalidRate(target_fpr));
    }
    let ln2 = core::f64::consts::LN_2;
    let n = capacity as f64;
    let bits = libm::ceil(-n * libm::log(target_fpr) / (ln2 * ln2));
    // Words are u64 and the byte size must fit isize.
    let max_bits = (isize::MAX as u64 / 8).saturating_mul(64) as f64;
    if bits.is_nan() || bits > max_bits || bits > usize::MAX as f64 {
        return Err(BloomError::TooLarge { bits });
    }
    let m = (bits as u64).max(1);
    let k = libm::ceil(-libm::log2(target_fpr)).max(1.0) as u64;
    if k > u64::from(u16::MAX) {
        return Err(BloomError::TooManyHashes(k));
    }
    Ok((m, k as u32))
}

/// Probabilistic set with no false negatives.
#[derive(Clone, PartialEq, Eq)]
pub struct BloomFilter {
    words: Vec<u64>,
    m: u64,
    k: u32,
    seed: u64,
    n_inserted: u64,
}

impl fmt::Debug for BloomFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BloomFilter")
            .field("m", &self.m)
            .field("k", &self.k)
            .field("seed", &self.seed)
            .field("n_inserted", &self.n_inserted)
            .finish()
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn probes(digest: u128, seed: u64, m: u64, k: u32) -> impl Iterator<Item = u64> {
    let h1 = mix64(digest as u64 ^ seed);
    let h2 = mix64((digest >> 64) as u64 ^ seed.rotate_left(32)) | 1;
    (0..u64::from(k)).map(move |i| h1.wrapping_add(i.wrapping_mul(h2)) % m)
}

impl BloomFilter {
    /// Sizes a filter for `capacity` items at `target_fpr`.
    pub fn new(capacity: u64, target_fpr: f64, seed: u64) -> Result<Self, BloomError> {
        let (m, k) = optimal_dimensions(capacity, target_fpr)?;
        Ok(Self::with_dimensions(m, k, seed))
    }

    /// Builds a filter from [`BloomParams`].
    pub fn from_params(params: &BloomParams) -> Result<Self, BloomError> {
        Self::new(params.capacity, params.target_fpr, params.seed)
    }

    /// Filter with an explicit bit count and hash count.
    ///
    /// # Panics
    /// If `m` or `k` is zero.
    pub fn with_dimensions(m: u64, k: u32, seed: u64) -> Self {
        assert!(m > 0 && k > 0, "bloom dimensions must be positive");
        let words = vec![0u64; m.div_ceil(64) as usize];
        Self { words, m, k, seed, n_inserted: 0 }
    }

    /// Number of bits.
    pub fn bit_len(&self) -> u64 {
        self.m
    }

    /// Number of probes per key.
    pub fn hash_count(&self) -> u32 {
        self.k
    }

    /// Seed the probe sequence is derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of insertions that set at least one new bit.
    pub fn inserted(&self) -> u64 {
        self.n_inserted
    }

    /// Membership query.
    pub fn contains(&self, digest: u128) -> bool {
        probes(digest, self.seed, self.m, self.k).all(|bit| self.words[(bit / 64) as usize] & (1 << (bit % 64)) != 0)
    }

    /// Inserts `digest`, returning whether it was (possibly) already present.
    pub fn check_and_insert(&mut self, digest: u128) -> bool {
        let mut seen = true;
        for bit in probes(digest, self.seed, self.m, self.k) {
            let word = &mut self.words[(bit / 64) as usize];
            let mask = 1u64 << (bit % 64);
            if *word & mask == 0 {
                seen = false;
                *word |= mask;
            }
        }
        if !seen {
            self.n_inserted += 1;
        }
        seen
    }

    /// Serializes to the persisted layout: the 16-byte header
    /// (`"BLMF"`, version u16, k u16, seed u64), then m u64, n_inserted u64
    /// and the bit array as u64 words, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 16 + self.words.len() * 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u16).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.m.to_le_bytes());
        out.extend_from_slice(&self.n_inserted.to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    /// Inverse of [`BloomFilter::to_bytes`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BloomError> {
        let u64_at = |at: usize| -> u64 { u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) };
        if bytes.len() < HEADER_LEN + 16 {
            return Err(BloomError::Corrupt("truncated header"));
        }
        if bytes[..4] != MAGIC {
            return Err(BloomError::Corrupt("bad magic"));
        }
        if u16::from_le_bytes([bytes[4], bytes[5]]) != FORMAT_VERSION {
            return Err(BloomError::Corrupt("unsupported version"));
        }
        let k = u32::from(u16::from_le_bytes([bytes[6], bytes[7]]));
        let seed = u64_at(8);
        let m = u64_at(16);
        let n_inserted = u64_at(24);
        if k == 0 || m == 0 {
            return Err(BloomError::Corrupt("zero dimension"));
        }
        let payload = &bytes[HEADER_LEN + 16..];
        let n_words = m.div_ceil(64);
        if payload.len() as u64 != n_words * 8 {
            return Err(BloomError::Corrupt("bit array length disagrees with m"));
        }
        let words = payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { words, m, k, seed, n_inserted })
    }
}
