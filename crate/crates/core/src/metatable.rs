//! Seal-indexed metadata table.
//!
//! Logically a dense array of 2^24 sixteen-byte entries. Only live entries are
//! stored; every absent slot reads back as the all-zero entry, so lookups are
//! indistinguishable from the dense layout.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::sealcodec::{bm32, modifier, pac24, PacKey, SealedWord, SEAL_BITS};

pub const TABLE_SLOTS: usize = 1 << SEAL_BITS;

/// Slot 0 is reserved, so at most this many entries can be live.
pub const MAX_LIVE: usize = TABLE_SLOTS - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("metadata table is full")]
    Full,
    #[error("object size must be at least one byte")]
    ZeroSize,
    #[error("clear of empty slot {0:#x}")]
    ClearEmpty(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MetadataEntry {
    /// Base address with the entry's own seal in the high bits.
    pub sealed_base: SealedWord,
    pub birthmark: u32,
    pub size: u32,
}

impl MetadataEntry {
    pub const EMPTY: MetadataEntry = MetadataEntry {
        sealed_base: SealedWord::NULL,
        birthmark: 0,
        size: 0,
    };

    pub fn is_empty(&self) -> bool {
        *self == Self::EMPTY
    }

    pub fn base(&self) -> u64 {
        self.sealed_base.strip()
    }

    /// The tag this entry's contents sign to.
    pub fn signature(&self, key: PacKey) -> u32 {
        pac24(key, self.base(), modifier(self.birthmark, self.size))
    }
}

#[derive(Debug, Default, Clone)]
pub struct MetadataTable {
    slots: HashMap<u32, MetadataEntry>,
}

impl MetadataTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live_count(&self) -> usize {
        self.slots.len()
    }

    /// Creates an entry for a new object and returns `(seal, birthmark)`.
    ///
    /// The birthmark starts at `bm32(key, alloc_counter, site_constant)` and is
    /// decremented until the signed seal lands on an empty, nonzero slot.
    pub fn create_metadata(
        &mut self,
        key: PacKey,
        base: u64,
        size: u32,
        alloc_counter: u64,
        site_constant: u64,
    ) -> Result<(u32, u32), TableError> {
        if size == 0 {
            return Err(TableError::ZeroSize);
        }
        if self.live_count() >= MAX_LIVE {
            return Err(TableError::Full);
        }
        let first = bm32(key, alloc_counter, site_constant);
        let mut birthmark = first;
        loop {
            let seal = pac24(key, base, modifier(birthmark, size));
            if seal != 0 && !self.slots.contains_key(&seal) {
                let sealed_base = SealedWord::encode(base, seal).expect("base checked by caller");
                self.slots.insert(
                    seal,
                    MetadataEntry {
                        sealed_base,
                        birthmark,
                        size,
                    },
                );
                return Ok((seal, birthmark));
            }
            birthmark = birthmark.wrapping_sub(1);
            if birthmark == first {
                return Err(TableError::Full);
            }
        }
    }

    pub fn lookup(&self, seal: u32) -> MetadataEntry {
        self.slots.get(&seal).copied().unwrap_or(MetadataEntry::EMPTY)
    }

    pub fn clear(&mut self, seal: u32) -> Result<(), TableError> {
        self.slots
            .remove(&seal)
            .map(|_| ())
            .ok_or(TableError::ClearEmpty(seal))
    }

    /// Live `(seal, entry)` pairs in seal order.
    pub fn live_entries(&self) -> Vec<(u32, MetadataEntry)> {
        let mut v: Vec<_> = self.slots.iter().map(|(s, e)| (*s, *e)).collect();
        v.sort_unstable_by_key(|(s, _)| *s);
        v
    }

    /// Checks both per-entry invariants over every live slot. Returns the
    /// first offending seal.
    pub fn verify(&self, key: PacKey) -> Result<(), u32> {
        for (&seal, entry) in &self.slots {
            if seal == 0 || entry.is_empty() {
                return Err(seal);
            }
            if entry.sealed_base.seal() != seal || entry.signature(key) != seal {
                return Err(seal);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sealcodec::DEFAULT_KEY;

    const KEY: PacKey = PacKey(DEFAULT_KEY);

    #[test]
    fn created_entry_is_authentic() {
        let mut t = MetadataTable::new();
        let (seal, bm) = t.create_metadata(KEY, 0x4000_0010, 100, 0, 0xabc).unwrap();
        let e = t.lookup(seal);
        assert_eq!(e.sealed_base.seal(), seal);
        assert_eq!(e.signature(KEY), seal);
        assert_eq!(e.birthmark, bm);
        assert_eq!(e.size, 100);
        assert_eq!(t.live_count(), 1);
        assert!(t.verify(KEY).is_ok());
    }

    #[test]
    fn slot_zero_is_reserved() {
        let t = MetadataTable::new();
        assert!(t.lookup(0).is_empty());
        let mut t = t;
        assert_eq!(t.clear(0), Err(TableError::ClearEmpty(0)));
    }

    #[test]
    fn zero_seal_is_treated_as_collision() {
        // Search for an allocation counter whose first candidate signs to 0.
        let (base, size, site) = (0x4000_0000u64, 48u32, 3u64);
        let counter = (0u64..)
            .find(|&c| pac24(KEY, base, modifier(bm32(KEY, c, site), size)) == 0)
            .unwrap();
        let mut t = MetadataTable::new();
        let (seal, bm) = t.create_metadata(KEY, base, size, counter, site).unwrap();
        assert_ne!(seal, 0);
        assert_eq!(bm, bm32(KEY, counter, site).wrapping_sub(1));
    }

    #[test]
    fn clear_and_isolation() {
        let mut t = MetadataTable::new();
        let (a, _) = t.create_metadata(KEY, 0x1000, 16, 1, 2).unwrap();
        let (b, _) = t.create_metadata(KEY, 0x2000, 16, 2, 2).unwrap();
        let before = t.lookup(b);
        t.clear(a).unwrap();
        assert!(t.lookup(a).is_empty());
        assert_eq!(t.lookup(b), before);
        assert_eq!(t.live_count(), 1);
        assert_eq!(t.clear(a), Err(TableError::ClearEmpty(a)));
    }

    #[test]
    fn identical_requests_get_distinct_seals() {
        let mut t = MetadataTable::new();
        let (a, _) = t.create_metadata(KEY, 0x1000, 32, 10, 5).unwrap();
        let (b, _) = t.create_metadata(KEY, 0x1000, 32, 11, 5).unwrap();
        assert_ne!(a, b);
        // Same counter too: the first candidate collides and the loop moves on.
        let (c, bm) = t.create_metadata(KEY, 0x1000, 32, 10, 5).unwrap();
        assert_ne!(c, a);
        assert_eq!(bm, bm32(KEY, 10, 5).wrapping_sub(1));
    }

    #[test]
    fn zero_size_rejected() {
        let mut t = MetadataTable::new();
        assert_eq!(t.create_metadata(KEY, 0x1000, 0, 0, 0), Err(TableError::ZeroSize));
    }
}
