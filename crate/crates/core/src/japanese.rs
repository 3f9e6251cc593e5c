//! Japanese script detection by code point.

/// Code point ranges counted as Japanese script.
const JAPANESE_RANGES: [(u32, u32); 6] = [
    (0x3040, 0x309F), // Hiragana
    (0x30A0, 0x30FF), // Katakana
    (0x31F0, 0x31FF), // Katakana phonetic extensions
    (0x3400, 0x4DBF), // CJK extension A
    (0x4E00, 0x9FFF), // CJK unified ideographs
    (0xFF66, 0xFF9D), // Halfwidth katakana
];

/// Whether `c` falls in one of the Japanese blocks.
pub fn is_japanese_char(c: char) -> bool {
    let cp = c as u32;
    JAPANESE_RANGES.iter().any(|&(lo, hi)| (lo..=hi).contains(&cp))
}

/// True iff `text` has at least one Japanese code point.
pub fn contains_japanese(text: &str) -> bool {
    text.chars().any(is_japanese_char)
}

/// Whether `c` is hiragana or katakana (full or half width).
pub(crate) fn is_kana(c: char) -> bool {
    matches!(c as u32, 0x3040..=0x30FF | 0x31F0..=0x31FF | 0xFF66..=0xFF9D)
}
