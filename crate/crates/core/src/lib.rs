//! Simulator for seal-indexed pointer metadata checking.
//!
//! Pointers carry a 24-bit seal in their upper bits. The seal indexes a
//! metadata table holding the object's sealed base, birthmark and size; a
//! keyed signature over those fields authenticates the entry on every check.
//! The crate models the codec, the table, a small address space, the
//! checker, a byte-precise redzone baseline, a pointer IR with check
//! elimination passes, and a scoring harness.

pub mod arena;
pub mod baseline;
pub mod checker;
pub mod harness;
pub mod ir;
pub mod machine;
pub mod metatable;
pub mod sealcodec;

pub use checker::{AccessKind, CheckerConfig, PacSan, Site, ViolationKind, ViolationReport};
pub use machine::{run, Machine, MachineError, RunConfig, RunResult, Tool};
pub use metatable::{MetadataEntry, MetadataTable, TableError};
pub use sealcodec::{PacKey, SealedWord};
