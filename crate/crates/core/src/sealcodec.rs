//! Keyed tag emulation and the bit layout of sealed pointer words.
//!
//! A sealed word packs a 39-bit virtual address in bits 0..=38 and a 24-bit
//! seal in bits 39..=62. Bit 63 is always clear.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ADDR_BITS: u32 = 39;
pub const SEAL_BITS: u32 = 24;
pub const ADDR_MASK: u64 = (1 << ADDR_BITS) - 1;
pub const SEAL_MASK: u64 = (1 << SEAL_BITS) - 1;

/// Key used when `PACSIM_KEY` is not set.
pub const DEFAULT_KEY: u64 = 0x5AC5_0000_0000_0001;

/// Environment variable holding the run key as 16 hex digits.
pub const KEY_ENV: &str = "PACSIM_KEY";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("address {0:#x} does not fit in {ADDR_BITS} bits")]
    AddressRange(u64),
    #[error("seal {0:#x} does not fit in {SEAL_BITS} bits")]
    SealRange(u64),
    #[error("invalid {KEY_ENV} value {0:?}: expected 16 hex digits")]
    BadKey(String),
}

/// The per-run signing key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacKey(pub u64);

impl Default for PacKey {
    fn default() -> Self {
        PacKey(DEFAULT_KEY)
    }
}

impl PacKey {
    /// Parses a key written as exactly 16 hex digits, with an optional `0x`
    /// prefix and `_` separators.
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let trimmed = text.trim();
        let digits: String = trimmed
            .strip_prefix("0x")
            .or_else(|| trimmed.strip_prefix("0X"))
            .unwrap_or(trimmed)
            .chars()
            .filter(|c| *c != '_')
            .collect();
        if digits.len() != 16 {
            return Err(CodecError::BadKey(text.to_string()));
        }
        u64::from_str_radix(&digits, 16)
            .map(PacKey)
            .map_err(|_| CodecError::BadKey(text.to_string()))
    }

    /// Reads `PACSIM_KEY`, falling back to [`DEFAULT_KEY`] when unset.
    pub fn from_env() -> Result<Self, CodecError> {
        match std::env::var(KEY_ENV) {
            Ok(v) if !v.trim().is_empty() => Self::parse(&v),
            _ => Ok(Self::default()),
        }
    }
}

impl fmt::Display for PacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// SplitMix64-style finalizer over (key, value, modifier).
#[inline]
pub fn mix64(key: PacKey, value: u64, modifier: u64) -> u64 {
    let mut x = key.0 ^ value.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ modifier.rotate_left(21);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// 24-bit authentication tag of `value` under `modifier`.
#[inline]
pub fn pac24(key: PacKey, value: u64, modifier: u64) -> u32 {
    (mix64(key, value, modifier) & SEAL_MASK) as u32
}

/// 32-bit birthmark derived from a dynamic counter and a per-site constant.
#[inline]
pub fn bm32(key: PacKey, dynamic_counter: u64, site_constant: u64) -> u32 {
    mix64(key, dynamic_counter, site_constant) as u32
}

/// Signing modifier: birthmark in the high half, object size in the low half.
#[inline]
pub fn modifier(birthmark: u32, size: u32) -> u64 {
    ((birthmark as u64) << 32) | size as u64
}

/// A simulated 64-bit pointer value carrying an address and a seal.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SealedWord(u64);

impl SealedWord {
    pub const NULL: SealedWord = SealedWord(0);

    pub fn encode(addr: u64, seal: u32) -> Result<Self, CodecError> {
        if addr > ADDR_MASK {
            return Err(CodecError::AddressRange(addr));
        }
        if seal as u64 > SEAL_MASK {
            return Err(CodecError::SealRange(seal as u64));
        }
        Ok(SealedWord(addr | ((seal as u64) << ADDR_BITS)))
    }

    /// Rebuilds a word from its raw bits. Bit 63 is cleared.
    pub fn from_raw(raw: u64) -> Self {
        SealedWord(raw & !(1 << 63))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Address bits with the seal discarded.
    #[inline]
    pub fn strip(self) -> u64 {
        self.0 & ADDR_MASK
    }

    #[inline]
    pub fn seal(self) -> u32 {
        ((self.0 >> ADDR_BITS) & SEAL_MASK) as u32
    }

    pub fn decode(self) -> (u64, u32) {
        (self.strip(), self.seal())
    }

    /// Moves the address by `delta` bytes (wrapping inside the 39-bit space),
    /// keeping the seal.
    pub fn offset(self, delta: i64) -> Self {
        let addr = (self.strip() as i64).wrapping_add(delta) as u64 & ADDR_MASK;
        SealedWord(addr | (self.0 & !ADDR_MASK))
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Debug for SealedWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealedWord({:#08x}:{:#011x})", self.seal(), self.strip())
    }
}

pub fn encode(addr: u64, seal: u32) -> Result<SealedWord, CodecError> {
    SealedWord::encode(addr, seal)
}

pub fn strip(w: SealedWord) -> u64 {
    w.strip()
}

pub fn extract_seal(w: SealedWord) -> u32 {
    w.seal()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    // Frozen from an independent big-integer evaluation of the mixing formula.
    #[test]
    fn regression_vectors() {
        assert_eq!(pac24(PacKey(0), 0, 0), 0);
        assert_eq!(bm32(PacKey(0), 0, 0), 0);
        let k = PacKey(DEFAULT_KEY);
        assert_eq!(pac24(k, 0x1000, modifier(7, 100)), 0x2fed69);
        assert_eq!(pac24(k, 0xdead_beef, 0x1234_5678_9abc_def0), 0xa2a6fa);
        assert_eq!(bm32(k, 42, 0x9e37), 0x9829_835c);
        assert_eq!(mix64(k, 1, 2), 0x8324_a128_a9af_1def);
    }

    #[test]
    fn pac24_is_deterministic() {
        let k = PacKey(0x1234);
        assert_eq!(pac24(k, 99, 7), pac24(k, 99, 7));
        assert_eq!(bm32(k, 99, 7), bm32(k, 99, 7));
    }

    #[test]
    fn diffusion_over_modifiers() {
        let tags: HashSet<u32> = (0..1000).map(|m| pac24(PacKey(1), 5, m)).collect();
        assert!(tags.len() >= 990, "{}", tags.len());
        let marks: HashSet<u32> = (0..10_000).map(|c| bm32(PacKey(DEFAULT_KEY), c, 7)).collect();
        assert!(marks.len() >= 9990, "{}", marks.len());
    }

    #[test]
    fn layout() {
        let w = encode(0x1000, 0xABCDEF).unwrap();
        assert_eq!(w.raw() & ADDR_MASK, 0x1000);
        assert_eq!((w.raw() >> 39) & SEAL_MASK, 0xABCDEF);
        assert_eq!(w.raw() >> 63, 0);
        assert_eq!(encode(0, 0).unwrap().raw(), 0);
        assert_eq!(strip(SealedWord::NULL), 0);
        assert_eq!(extract_seal(SealedWord::NULL), 0);
        assert_eq!(strip(encode(0x7F_FFFF_FFFF, 1).unwrap()), 0x7F_FFFF_FFFF);
        assert_eq!(extract_seal(encode(0, 0xFFFFFF).unwrap()), 0xFFFFFF);
    }

    #[test]
    fn range_errors() {
        assert_eq!(encode(1 << 39, 0), Err(CodecError::AddressRange(1 << 39)));
        assert_eq!(encode(0, 1 << 24), Err(CodecError::SealRange(1 << 24)));
    }

    #[test]
    fn offset_keeps_seal() {
        let w = encode(0x4000_0010, 0x55).unwrap();
        assert_eq!(w.offset(150).strip(), 0x4000_0010 + 150);
        assert_eq!(w.offset(-0x20).strip(), 0x4000_0010 - 0x20);
        assert_eq!(w.offset(-1).seal(), 0x55);
        assert_eq!(SealedWord::NULL.offset(-1).strip(), ADDR_MASK);
    }

    #[test]
    fn key_parsing() {
        assert_eq!(PacKey::parse("5AC5000000000001").unwrap(), PacKey(DEFAULT_KEY));
        assert_eq!(PacKey::parse("0x5ac5_0000_0000_0001").unwrap(), PacKey(DEFAULT_KEY));
        assert!(PacKey::parse("123").is_err());
        assert!(PacKey::parse("zzzzzzzzzzzzzzzz").is_err());
        assert_eq!(PacKey(DEFAULT_KEY).to_string(), "0x5ac5000000000001");
    }
}
