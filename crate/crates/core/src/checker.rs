//! Runtime checks performed through the metadata table.
//!
//! Detection uses only the table. The [`GroundTruth`] hook is consulted after
//! a failure has already been decided, to label it spatial or temporal.

use serde::{Deserialize, Serialize};

use crate::metatable::{MetadataTable, TableError};
use crate::sealcodec::{PacKey, SealedWord};

pub type Site = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    SpatialOob,
    TemporalInvalid,
    DoubleFree,
    InvalidFree,
    BoundaryDangling,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::SpatialOob => "spatial-oob",
            ViolationKind::TemporalInvalid => "temporal-invalid",
            ViolationKind::DoubleFree => "double-free",
            ViolationKind::InvalidFree => "invalid-free",
            ViolationKind::BoundaryDangling => "boundary-dangling",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccessKind {
    Read,
    Write,
    Free,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub kind: ViolationKind,
    pub site: Site,
    pub seal: u32,
    pub offset: Option<i64>,
    pub access: AccessKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerConfig {
    pub write_only: bool,
    pub boundary_conservative_base: u64,
    pub boundary_conservative_size: u32,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        CheckerConfig {
            write_only: false,
            boundary_conservative_base: 0,
            boundary_conservative_size: u32::MAX,
        }
    }
}

/// Labelling oracle supplied by the execution engine.
pub trait GroundTruth {
    /// The object the pointer was derived from is still allocated.
    fn origin_live(&self) -> bool;
    /// The pointer was derived from a heap object that has since been freed.
    fn origin_freed(&self) -> bool;
}

/// Fixed answers, for callers without provenance.
#[derive(Debug, Clone, Copy, Default)]
pub struct KnownTruth {
    pub live: bool,
    pub freed: bool,
}

impl GroundTruth for KnownTruth {
    fn origin_live(&self) -> bool {
        self.live
    }
    fn origin_freed(&self) -> bool {
        self.freed
    }
}

/// Bound check of an `n`-byte access through `w`.
pub fn check_access(
    table: &MetadataTable,
    w: SealedWord,
    n: u32,
    access: AccessKind,
    cfg: &CheckerConfig,
    site: Site,
    truth: &dyn GroundTruth,
) -> Result<(), ViolationReport> {
    if cfg.write_only && access == AccessKind::Read {
        return Ok(());
    }
    let seal = w.seal();
    let entry = table.lookup(seal);
    if entry.is_empty() {
        return Err(ViolationReport {
            kind: ViolationKind::TemporalInvalid,
            site,
            seal,
            offset: None,
            access,
        });
    }
    let off = w.strip() as i64 - entry.base() as i64;
    if off < 0 || off + n as i64 > entry.size as i64 {
        let kind = if truth.origin_live() {
            ViolationKind::SpatialOob
        } else {
            ViolationKind::TemporalInvalid
        };
        return Err(ViolationReport {
            kind,
            site,
            seal,
            offset: Some(off),
            access,
        });
    }
    Ok(())
}

/// Authenticates a heap pointer about to be freed. On success the caller
/// clears the returned entry's slot and frees `w.strip()`.
pub fn check_free(
    table: &MetadataTable,
    key: PacKey,
    w: SealedWord,
    site: Site,
    truth: &dyn GroundTruth,
) -> Result<crate::metatable::MetadataEntry, ViolationReport> {
    let seal = w.seal();
    let entry = table.lookup(seal);
    let report = |kind, offset| ViolationReport {
        kind,
        site,
        seal,
        offset,
        access: AccessKind::Free,
    };
    if entry.is_empty() {
        let kind = if truth.origin_freed() {
            ViolationKind::DoubleFree
        } else {
            ViolationKind::InvalidFree
        };
        return Err(report(kind, None));
    }
    let base = entry.base();
    if w.strip() != base {
        return Err(report(
            ViolationKind::InvalidFree,
            Some(w.strip() as i64 - base as i64),
        ));
    }
    if entry.signature(key) != seal {
        return Err(report(ViolationKind::InvalidFree, Some(0)));
    }
    Ok(entry)
}

/// Verifies a pointer leaving for an unprotected module and strips it.
pub fn boundary_out(table: &MetadataTable, w: SealedWord, site: Site) -> Result<u64, ViolationReport> {
    let seal = w.seal();
    let entry = table.lookup(seal);
    let off = w.strip() as i64 - entry.base() as i64;
    if entry.is_empty() || off < 0 || off + 1 > entry.size as i64 {
        return Err(ViolationReport {
            kind: ViolationKind::BoundaryDangling,
            site,
            seal,
            offset: (!entry.is_empty()).then_some(off),
            access: AccessKind::Boundary,
        });
    }
    Ok(w.strip())
}

/// The seal checker's per-run state: table, key, config, and the memoized
/// conservative entry for pointers coming back from unprotected code.
#[derive(Debug, Clone)]
pub struct PacSan {
    pub table: MetadataTable,
    pub key: PacKey,
    pub cfg: CheckerConfig,
    conservative: Option<u32>,
}

/// Site constant used for the conservative boundary entry.
const BOUNDARY_SITE: u64 = 0xB0DA_2E55;

impl PacSan {
    pub fn new(key: PacKey, cfg: CheckerConfig) -> Self {
        PacSan {
            table: MetadataTable::new(),
            key,
            cfg,
            conservative: None,
        }
    }

    pub fn conservative_seal(&self) -> Option<u32> {
        self.conservative
    }

    pub fn check_access(
        &self,
        w: SealedWord,
        n: u32,
        access: AccessKind,
        site: Site,
        truth: &dyn GroundTruth,
    ) -> Result<(), ViolationReport> {
        check_access(&self.table, w, n, access, &self.cfg, site, truth)
    }

    pub fn check_free(
        &self,
        w: SealedWord,
        site: Site,
        truth: &dyn GroundTruth,
    ) -> Result<crate::metatable::MetadataEntry, ViolationReport> {
        check_free(&self.table, self.key, w, site, truth)
    }

    pub fn boundary_out(&self, w: SealedWord, site: Site) -> Result<u64, ViolationReport> {
        boundary_out(&self.table, w, site)
    }

    /// Re-seals a raw pointer from unprotected code under the conservative
    /// entry, creating that entry on first use.
    pub fn boundary_in(&mut self, raw: u64, alloc_counter: u64) -> Result<SealedWord, TableError> {
        let seal = match self.conservative {
            Some(s) => s,
            None => {
                let (s, _) = self.table.create_metadata(
                    self.key,
                    self.cfg.boundary_conservative_base,
                    self.cfg.boundary_conservative_size,
                    alloc_counter,
                    BOUNDARY_SITE,
                )?;
                self.conservative = Some(s);
                s
            }
        };
        Ok(SealedWord::encode(raw & crate::sealcodec::ADDR_MASK, seal).expect("masked address"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sealcodec::DEFAULT_KEY;

    const LIVE: KnownTruth = KnownTruth { live: true, freed: false };
    const FREED: KnownTruth = KnownTruth { live: false, freed: true };

    fn setup(base: u64, size: u32) -> (PacSan, SealedWord) {
        let mut p = PacSan::new(PacKey(DEFAULT_KEY), CheckerConfig::default());
        let (seal, _) = p.table.create_metadata(p.key, base, size, 1, 9).unwrap();
        (p, SealedWord::encode(base, seal).unwrap())
    }

    #[test]
    fn bound_check_edges() {
        let (p, w) = setup(0x4000_0010, 100);
        assert!(p.check_access(w, 100, AccessKind::Write, 1, &LIVE).is_ok());
        let err = p.check_access(w, 101, AccessKind::Write, 1, &LIVE).unwrap_err();
        assert_eq!(err.kind, ViolationKind::SpatialOob);
        assert_eq!(err.offset, Some(0));
        let under = p.check_access(w.offset(-1), 1, AccessKind::Read, 2, &LIVE).unwrap_err();
        assert_eq!(under.offset, Some(-1));
        assert_eq!(under.access, AccessKind::Read);
    }

    #[test]
    fn null_and_cleared_are_temporal() {
        let (mut p, w) = setup(0x4000_0010, 8);
        let e = p.check_access(SealedWord::NULL, 4, AccessKind::Read, 3, &LIVE).unwrap_err();
        assert_eq!(e.kind, ViolationKind::TemporalInvalid);
        p.table.clear(w.seal()).unwrap();
        let e = p.check_access(w, 1, AccessKind::Write, 3, &FREED).unwrap_err();
        assert_eq!(e.kind, ViolationKind::TemporalInvalid);
    }

    #[test]
    fn write_only_skips_reads() {
        let (mut p, w) = setup(0x4000_0010, 8);
        p.cfg.write_only = true;
        assert!(p.check_access(w.offset(64), 1, AccessKind::Read, 1, &LIVE).is_ok());
        assert!(p.check_access(w.offset(64), 1, AccessKind::Write, 1, &LIVE).is_err());
    }

    #[test]
    fn free_paths() {
        let (mut p, w) = setup(0x4000_0010, 10);
        let interior = p.check_free(w.offset(1), 7, &LIVE).unwrap_err();
        assert_eq!(interior.kind, ViolationKind::InvalidFree);
        assert_eq!(interior.offset, Some(1));
        let entry = p.check_free(w, 7, &LIVE).unwrap();
        p.table.clear(entry.sealed_base.seal()).unwrap();
        assert_eq!(p.check_free(w, 8, &FREED).unwrap_err().kind, ViolationKind::DoubleFree);
        assert_eq!(
            p.check_free(SealedWord::NULL.offset(16), 9, &KnownTruth::default()).unwrap_err().kind,
            ViolationKind::InvalidFree
        );
    }

    #[test]
    fn forged_seal_rejected() {
        let (p, w) = setup(0x4000_0010, 10);
        // A different base under the same seal points at the same slot but
        // fails the address comparison first; a matching address with a
        // tampered entry is unreachable through the public API.
        let forged = SealedWord::encode(0x4000_0020, w.seal()).unwrap();
        assert_eq!(p.check_free(forged, 1, &LIVE).unwrap_err().kind, ViolationKind::InvalidFree);
    }

    #[test]
    fn boundary_crossings() {
        let (mut p, w) = setup(0x4000_0010, 10);
        assert_eq!(p.boundary_out(w, 1).unwrap(), 0x4000_0010);
        assert_eq!(p.boundary_out(w.offset(5), 1).unwrap(), 0x4000_0015);
        assert_eq!(
            p.boundary_out(w.offset(10), 1).unwrap_err().kind,
            ViolationKind::BoundaryDangling
        );
        let a = p.boundary_in(0x4000_0015, 100).unwrap();
        let b = p.boundary_in(0x9000_0000, 101).unwrap();
        assert_eq!(a.seal(), b.seal());
        assert_ne!(a.seal(), 0);
        assert!(p.check_access(b, 4096, AccessKind::Write, 2, &LIVE).is_ok());
        p.table.clear(w.seal()).unwrap();
        assert_eq!(
            p.boundary_out(w, 1).unwrap_err().kind,
            ViolationKind::BoundaryDangling
        );
    }
}
