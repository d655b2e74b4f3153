//! Redzone + quarantine checker used as the comparison target.
//!
//! The shadow is kept as byte-precise spans rather than a per-granule array,
//! which gives the same verdicts as partial-granule shadow encoding.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::arena::{round_up, Arena, NULL_PAGE_END};
use crate::checker::{AccessKind, Site, ViolationKind, ViolationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub redzone_bytes: u64,
    pub quarantine_capacity_bytes: u64,
    pub granularity: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            redzone_bytes: 16,
            quarantine_capacity_bytes: 1 << 28,
            granularity: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadowState {
    Addressable,
    Redzone,
    Freed,
}

/// Non-overlapping `[start, end)` spans keyed by start.
#[derive(Debug, Clone, Default)]
pub struct ShadowMap {
    spans: BTreeMap<u64, (u64, ShadowState)>,
}

impl ShadowMap {
    pub fn set(&mut self, start: u64, end: u64, state: ShadowState) {
        if start >= end {
            return;
        }
        // Trim a span that begins before `start` and reaches into the range.
        if let Some((&s, &(e, st))) = self.spans.range(..start).next_back() {
            if e > start {
                self.spans.insert(s, (start, st));
                if e > end {
                    self.spans.insert(end, (e, st));
                }
            }
        }
        let inside: Vec<u64> = self.spans.range(start..end).map(|(s, _)| *s).collect();
        for s in inside {
            let (e, st) = self.spans.remove(&s).unwrap();
            if e > end {
                self.spans.insert(end, (e, st));
            }
        }
        self.spans.insert(start, (end, state));
    }

    /// Worst state touched by `[start, end)`; unmapped bytes count as addressable.
    pub fn worst(&self, start: u64, end: u64) -> ShadowState {
        let mut worst = ShadowState::Addressable;
        let first = self.spans.range(..=start).next_back().map(|(s, _)| *s).unwrap_or(start);
        for (_, &(e, st)) in self.spans.range(first..end) {
            if e <= start {
                continue;
            }
            match st {
                ShadowState::Freed => return ShadowState::Freed,
                ShadowState::Redzone => worst = ShadowState::Redzone,
                ShadowState::Addressable => {}
            }
        }
        worst
    }

    pub fn state_at(&self, addr: u64) -> ShadowState {
        self.worst(addr, addr + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChunkState {
    Live,
    Quarantined,
}

#[derive(Debug, Clone)]
pub struct Baseline {
    pub cfg: BaselineConfig,
    pub shadow: ShadowMap,
    chunks: HashMap<u64, (u64, ChunkState)>,
    quarantine: VecDeque<(u64, u64)>,
    quarantined_bytes: u64,
}

impl Baseline {
    pub fn new(cfg: BaselineConfig) -> Self {
        Baseline {
            cfg,
            shadow: ShadowMap::default(),
            chunks: HashMap::new(),
            quarantine: VecDeque::new(),
            quarantined_bytes: 0,
        }
    }

    pub fn quarantined_bytes(&self) -> u64 {
        self.quarantined_bytes
    }

    /// Poisons the flanks of an object placed by the shared allocator and
    /// unpoisons its payload.
    pub fn mark_object(&mut self, base: u64, size: u64, guard: u64) {
        let payload_end = base + size;
        let padded_end = base + round_up(size.max(1), crate::arena::ALIGN);
        self.shadow.set(base - guard, base, ShadowState::Redzone);
        self.shadow.set(base, payload_end, ShadowState::Addressable);
        self.shadow.set(payload_end, padded_end + guard, ShadowState::Redzone);
    }

    /// Heap allocation: place, then poison redzones on both sides.
    pub fn b_alloc(&mut self, heap: &mut Arena, size: u64) -> Option<u64> {
        let base = heap.reserve(size)?;
        self.mark_object(base, size, heap.guard());
        self.chunks.insert(base, (size, ChunkState::Live));
        Some(base)
    }

    /// Heap free: quarantine the chunk, evicting the oldest chunks back to
    /// `heap` while the quarantine is over capacity.
    pub fn b_free(&mut self, heap: &mut Arena, raw: u64, site: Site) -> Result<(), ViolationReport> {
        let report = |kind| ViolationReport {
            kind,
            site,
            seal: 0,
            offset: None,
            access: AccessKind::Free,
        };
        match self.chunks.get(&raw).copied() {
            Some((size, ChunkState::Live)) => {
                self.chunks.insert(raw, (size, ChunkState::Quarantined));
                self.shadow.set(raw, raw + size.max(1), ShadowState::Freed);
                self.quarantine.push_back((raw, size));
                self.quarantined_bytes += size;
                while self.quarantined_bytes > self.cfg.quarantine_capacity_bytes {
                    let Some((old, old_size)) = self.quarantine.pop_front() else { break };
                    self.quarantined_bytes -= old_size;
                    self.chunks.remove(&old);
                    heap.release(old);
                }
                Ok(())
            }
            Some((_, ChunkState::Quarantined)) => Err(report(ViolationKind::DoubleFree)),
            None => Err(report(ViolationKind::InvalidFree)),
        }
    }

    /// Poisons a purged stack or scope object.
    pub fn mark_dead(&mut self, base: u64, size: u64) {
        self.shadow.set(base, base + size.max(1), ShadowState::Freed);
    }

    pub fn b_check(&self, raw: u64, n: u32, access: AccessKind, site: Site) -> Result<(), ViolationReport> {
        let end = raw.saturating_add(n as u64);
        let kind = if raw < NULL_PAGE_END {
            Some(ViolationKind::TemporalInvalid)
        } else {
            match self.shadow.worst(raw, end) {
                ShadowState::Addressable => None,
                ShadowState::Redzone => Some(ViolationKind::SpatialOob),
                ShadowState::Freed => Some(ViolationKind::TemporalInvalid),
            }
        };
        match kind {
            None => Ok(()),
            Some(kind) => Err(ViolationReport {
                kind,
                site,
                seal: 0,
                offset: None,
                access,
            }),
        }
    }
}
