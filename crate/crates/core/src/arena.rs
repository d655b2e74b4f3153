//! Bump allocation inside a fixed address window, with optional exact-size
//! free-list reuse.
//!
//! Every block is laid out as `[guard | payload rounded to 16 | guard]` so the
//! same placement serves both checkers: the redzone baseline poisons the guard
//! bytes, the seal checker ignores them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

pub const ALIGN: u64 = 16;

/// Addresses below this are never handed out; null plus a small offset lands here.
pub const NULL_PAGE_END: u64 = 0x1000;
pub const GLOBAL_WINDOW: (u64, u64) = (0x0010_0000, 0x1000_0000);
pub const STACK_WINDOW: (u64, u64) = (0x1000_0000, 0x4000_0000);
/// The heap ends below 4 GiB so that a conservative boundary extent of
/// `[0, 2^32 - 1)` covers every simulated object.
pub const HEAP_WINDOW: (u64, u64) = (0x4000_0000, 0xFFFF_0000);

pub fn round_up(n: u64, align: u64) -> u64 {
    n.div_ceil(align) * align
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: u64,
    pub reserved: u64,
}

#[derive(Debug, Clone)]
pub struct Arena {
    start: u64,
    end: u64,
    cursor: u64,
    guard: u64,
    reuse: bool,
    free: BTreeMap<u64, BTreeSet<u64>>,
    blocks: HashMap<u64, Block>,
}

impl Arena {
    pub fn new((start, end): (u64, u64), guard: u64, reuse: bool) -> Self {
        Arena {
            start,
            end,
            cursor: start,
            guard: round_up(guard, ALIGN),
            reuse,
            free: BTreeMap::new(),
            blocks: HashMap::new(),
        }
    }

    pub fn guard(&self) -> u64 {
        self.guard
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn reserved_for(&self, size: u64) -> u64 {
        2 * self.guard + round_up(size.max(1), ALIGN)
    }

    /// Places an object of `size` bytes and returns its base address.
    pub fn reserve(&mut self, size: u64) -> Option<u64> {
        let reserved = self.reserved_for(size);
        let start = match self.take_free(reserved) {
            Some(s) => s,
            None => {
                let s = self.cursor;
                let next = s.checked_add(reserved)?;
                if next > self.end {
                    return None;
                }
                self.cursor = next;
                s
            }
        };
        let base = start + self.guard;
        self.blocks.insert(base, Block { start, reserved });
        Some(base)
    }

    fn take_free(&mut self, reserved: u64) -> Option<u64> {
        if !self.reuse {
            return None;
        }
        let starts = self.free.get_mut(&reserved)?;
        let first = starts.pop_first();
        if starts.is_empty() {
            self.free.remove(&reserved);
        }
        first
    }

    pub fn block(&self, base: u64) -> Option<Block> {
        self.blocks.get(&base).copied()
    }

    /// Returns the block at `base` to the free list.
    pub fn release(&mut self, base: u64) -> bool {
        match self.blocks.remove(&base) {
            Some(b) => {
                if self.reuse {
                    self.free.entry(b.reserved).or_default().insert(b.start);
                }
                true
            }
            None => false,
        }
    }

    /// Pops every block at or above `mark` and rewinds the cursor (stack discipline).
    pub fn pop_to(&mut self, mark: u64) {
        debug_assert!(mark >= self.start && mark <= self.cursor);
        self.blocks.retain(|_, b| b.start < mark);
        self.cursor = mark;
    }

    pub fn live_blocks(&self) -> usize {
        self.blocks.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_disjointness() {
        let mut a = Arena::new(HEAP_WINDOW, 16, true);
        let b1 = a.reserve(100).unwrap();
        let b2 = a.reserve(1000).unwrap();
        assert_eq!(b1, HEAP_WINDOW.0 + 16);
        // 100 rounds to 112, plus trailing and leading guards.
        assert_eq!(b2 - b1, 112 + 32);
        assert_eq!(b1 % ALIGN, 0);
    }

    #[test]
    fn exact_size_reuse() {
        let mut a = Arena::new(HEAP_WINDOW, 16, true);
        let d1 = a.reserve(10).unwrap();
        assert!(a.release(d1));
        let big = a.reserve(1 << 28).unwrap();
        a.release(big);
        assert_eq!(a.reserve(10).unwrap(), d1);
        assert!(!a.release(d1 + 1));
    }

    #[test]
    fn window_exhaustion() {
        let mut a = Arena::new((0x1000, 0x2000), 16, false);
        assert!(a.reserve(0x2000).is_none());
        assert!(a.reserve(16).is_some());
    }

    #[test]
    fn stack_pop() {
        let mut a = Arena::new(STACK_WINDOW, 16, false);
        let outer = a.reserve(8).unwrap();
        let mark = a.cursor();
        let inner = a.reserve(8).unwrap();
        a.pop_to(mark);
        assert!(a.block(inner).is_none());
        assert!(a.block(outer).is_some());
        assert_eq!(a.reserve(8).unwrap(), inner);
    }
}
