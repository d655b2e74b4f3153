//! The virtual execution environment.
//!
//! A [`Machine`] owns a 39-bit address space split into global, stack and
//! heap windows, the ground-truth record of every object it ever allocated,
//! and the state of exactly one checker. Pointer values carry their
//! provenance (the object they were derived from) alongside the sealed word;
//! the checkers never see it, it only feeds labelling and the ground-truth
//! event log.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{Arena, GLOBAL_WINDOW, HEAP_WINDOW, STACK_WINDOW};
use crate::baseline::{Baseline, BaselineConfig};
use crate::checker::{AccessKind, CheckerConfig, GroundTruth, PacSan, Site, ViolationKind, ViolationReport};
use crate::ir::{Access, AllocKind, Program, Stmt};
use crate::metatable::TableError;
use crate::sealcodec::{mix64, PacKey, SealedWord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tool {
    #[default]
    Pacsan,
    Baseline,
    /// No checker: frees and accesses are only recorded against ground truth.
    Off,
}

impl std::str::FromStr for Tool {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pacsan" => Ok(Tool::Pacsan),
            "baseline" => Ok(Tool::Baseline),
            "off" => Ok(Tool::Off),
            other => Err(format!("unknown tool {other:?} (expected pacsan, baseline or off)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tool: Tool,
    pub checker: CheckerConfig,
    pub baseline: BaselineConfig,
    pub halt_on_first: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tool: Tool::Pacsan,
            checker: CheckerConfig::default(),
            baseline: BaselineConfig::default(),
            halt_on_first: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Heap,
    Stack,
    Global,
}

impl From<AllocKind> for ObjectKind {
    fn from(k: AllocKind) -> Self {
        match k {
            AllocKind::Heap => ObjectKind::Heap,
            AllocKind::Stack => ObjectKind::Stack,
        }
    }
}

pub type ObjectId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectRecord {
    pub id: ObjectId,
    pub base: u64,
    pub size: u64,
    pub kind: ObjectKind,
    pub seal: u32,
    pub birthmark: u32,
    pub live: bool,
    /// Field extents `(offset, length)`; invisible to every checker.
    pub subobject_bounds: Vec<(u64, u64)>,
}

/// Where a pointer value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Origin {
    Null,
    Object(ObjectId),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Ptr { word: SealedWord, origin: Origin },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthKind {
    Spatial,
    Temporal,
    Null,
    DoubleFree,
    InvalidFree,
    Subobject,
}

/// A memory-safety error as seen by ground truth, independent of any checker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub kind: TruthKind,
    pub site: Site,
    pub offset: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub allocations: u64,
    pub frees: u64,
    pub max_live_objects: u64,
    pub live_objects_at_exit: u64,
    pub checks_by_site: BTreeMap<Site, u64>,
    /// Passed checks whose pointer was derived from a different (dead) object
    /// than the one currently owning its seal.
    pub stale_escapes: u64,
    /// Passed checks whose range is not inside the object owning the seal.
    pub soundness_breaches: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub violations: Vec<ViolationReport>,
    pub dynamic_check_count: u64,
    pub stats: RunStats,
    pub ground_truth: Vec<TruthEvent>,
}

impl RunResult {
    /// Stable JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("serializable");
        serde_json::to_string_pretty(&v).expect("serializable")
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MachineError {
    #[error("invalid allocation size {0}")]
    AllocSize(i64),
    #[error("{0:?} address window exhausted")]
    OutOfSpace(ObjectKind),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("global offset table is read-only")]
    GotFrozen,
    #[error("duplicate global @{0}")]
    DuplicateGlobal(String),
    #[error("unknown global @{0}")]
    UnknownGlobal(String),
    #[error("site {site}: %{reg} is not a pointer")]
    NotAPointer { site: Site, reg: String },
    #[error("site {site}: %{reg} is not an integer")]
    NotAnInteger { site: Site, reg: String },
    #[error("site {site}: %{reg} is undefined")]
    Undefined { site: Site, reg: String },
    #[error("site {0}: input queue exhausted")]
    InputExhausted(Site),
    #[error("scope exit for a word that names no live stack object")]
    NotAStackObject,
}

/// The simulated global offset table: frozen after start-up.
#[derive(Debug, Clone, Default)]
pub struct Got {
    map: BTreeMap<String, SealedWord>,
    frozen: bool,
}

impl Got {
    pub fn get(&self, name: &str) -> Option<SealedWord> {
        self.map.get(name).copied()
    }

    pub fn insert(&mut self, name: &str, w: SealedWord) -> Result<(), MachineError> {
        if self.frozen {
            return Err(MachineError::GotFrozen);
        }
        if self.map.contains_key(name) {
            return Err(MachineError::DuplicateGlobal(name.to_string()));
        }
        self.map.insert(name.to_string(), w);
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SealedWord)> {
        self.map.iter()
    }
}

/// Compile-time "random" constant for an allocation site.
pub fn site_constant(site: Site) -> u64 {
    mix64(PacKey(0x5173_C0DE), site as u64, 0)
}

struct Provenance<'a> {
    objects: &'a [ObjectRecord],
    origin: Origin,
}

impl GroundTruth for Provenance<'_> {
    fn origin_live(&self) -> bool {
        matches!(self.origin, Origin::Object(id) if self.objects[id].live)
    }

    fn origin_freed(&self) -> bool {
        matches!(self.origin, Origin::Object(id)
            if !self.objects[id].live && self.objects[id].kind == ObjectKind::Heap)
    }
}

enum Flow {
    Go,
    Halt,
}

pub struct Machine {
    key: PacKey,
    cfg: RunConfig,
    pacsan: Option<PacSan>,
    baseline: Option<Baseline>,
    heap: Arena,
    stack: Arena,
    globals: Arena,
    objects: Vec<ObjectRecord>,
    heap_live: HashMap<u64, ObjectId>,
    seal_owner: HashMap<u32, ObjectId>,
    seal_last: HashMap<u32, ObjectId>,
    global_ids: HashMap<String, ObjectId>,
    alloc_counter: u64,
    live: u64,
    got: Got,
    inputs: VecDeque<i64>,
    env: HashMap<String, Value>,
    violations: Vec<ViolationReport>,
    truth: Vec<TruthEvent>,
    checks: u64,
    stats: RunStats,
}

impl Machine {
    pub fn new(key: PacKey, cfg: RunConfig) -> Self {
        let guard = cfg.baseline.redzone_bytes;
        Machine {
            key,
            cfg,
            pacsan: (cfg.tool == Tool::Pacsan).then(|| PacSan::new(key, cfg.checker)),
            baseline: (cfg.tool == Tool::Baseline).then(|| Baseline::new(cfg.baseline)),
            heap: Arena::new(HEAP_WINDOW, guard, true),
            stack: Arena::new(STACK_WINDOW, guard, false),
            globals: Arena::new(GLOBAL_WINDOW, guard, false),
            objects: Vec::new(),
            heap_live: HashMap::new(),
            seal_owner: HashMap::new(),
            seal_last: HashMap::new(),
            global_ids: HashMap::new(),
            alloc_counter: 0,
            live: 0,
            got: Got::default(),
            inputs: VecDeque::new(),
            env: HashMap::new(),
            violations: Vec::new(),
            truth: Vec::new(),
            checks: 0,
            stats: RunStats::default(),
        }
    }

    pub fn key(&self) -> PacKey {
        self.key
    }

    pub fn pacsan(&self) -> Option<&PacSan> {
        self.pacsan.as_ref()
    }

    pub fn baseline(&self) -> Option<&Baseline> {
        self.baseline.as_ref()
    }

    pub fn objects(&self) -> &[ObjectRecord] {
        &self.objects
    }

    pub fn object(&self, id: ObjectId) -> &ObjectRecord {
        &self.objects[id]
    }

    pub fn got(&self) -> &Got {
        &self.got
    }

    pub fn got_mut(&mut self) -> &mut Got {
        &mut self.got
    }

    pub fn live_objects(&self) -> u64 {
        self.live
    }

    pub fn max_live_objects(&self) -> u64 {
        self.stats.max_live_objects
    }

    pub fn alloc_counter(&self) -> u64 {
        self.alloc_counter
    }

    pub fn set_inputs(&mut self, inputs: &[i64]) {
        self.inputs = inputs.iter().copied().collect();
    }

    /// Allocates an object and returns its pointer word.
    pub fn alloc(&mut self, kind: ObjectKind, size: u64, site_constant: u64) -> Result<SealedWord, MachineError> {
        self.alloc_object(kind, size, site_constant, Vec::new()).map(|(w, _)| w)
    }

    pub fn alloc_object(
        &mut self,
        kind: ObjectKind,
        size: u64,
        site_constant: u64,
        fields: Vec<(u64, u64)>,
    ) -> Result<(SealedWord, ObjectId), MachineError> {
        if size == 0 || size > u32::MAX as u64 {
            return Err(MachineError::AllocSize(size as i64));
        }
        let base = match (kind, self.baseline.as_mut()) {
            (ObjectKind::Heap, Some(b)) => b.b_alloc(&mut self.heap, size),
            _ => {
                let arena = match kind {
                    ObjectKind::Heap => &mut self.heap,
                    ObjectKind::Stack => &mut self.stack,
                    ObjectKind::Global => &mut self.globals,
                };
                let base = arena.reserve(size);
                if let (Some(b), Some(base)) = (self.baseline.as_mut(), base) {
                    b.mark_object(base, size, arena.guard());
                }
                base
            }
        }
        .ok_or(MachineError::OutOfSpace(kind))?;

        let (word, seal, birthmark) = match self.pacsan.as_mut() {
            Some(p) => {
                let (seal, bm) = match p.table.create_metadata(self.key, base, size as u32, self.alloc_counter, site_constant) {
                    Ok(v) => v,
                    Err(e) => {
                        // Undo the placement so the failed allocation leaves no trace.
                        match kind {
                            ObjectKind::Heap => {
                                self.heap.release(base);
                            }
                            ObjectKind::Stack => self.stack.pop_to(base - self.stack.guard()),
                            ObjectKind::Global => self.globals.pop_to(base - self.globals.guard()),
                        }
                        return Err(e.into());
                    }
                };
                (SealedWord::encode(base, seal).expect("window below 2^39"), seal, bm)
            }
            None => (SealedWord::encode(base, 0).expect("window below 2^39"), 0, 0),
        };
        self.alloc_counter += 1;
        let id = self.objects.len();
        self.objects.push(ObjectRecord {
            id,
            base,
            size,
            kind,
            seal,
            birthmark,
            live: true,
            subobject_bounds: fields,
        });
        if kind == ObjectKind::Heap {
            self.heap_live.insert(base, id);
        }
        if self.pacsan.is_some() {
            self.seal_owner.insert(seal, id);
            self.seal_last.insert(seal, id);
        }
        self.live += 1;
        self.stats.allocations += 1;
        self.stats.max_live_objects = self.stats.max_live_objects.max(self.live);
        Ok((word, id))
    }

    fn kill_object(&mut self, id: ObjectId) {
        let o = &mut self.objects[id];
        if !o.live {
            return;
        }
        o.live = false;
        self.live -= 1;
        if o.kind == ObjectKind::Heap {
            self.heap_live.remove(&o.base);
        }
        if self.seal_owner.get(&o.seal) == Some(&id) {
            self.seal_owner.remove(&o.seal);
        }
    }

    /// Best ground-truth guess at the object a bare word was derived from.
    fn origin_of(&self, w: SealedWord) -> Origin {
        if w.is_null() {
            return Origin::Null;
        }
        if self.pacsan.is_some() {
            if let Some(&id) = self.seal_last.get(&w.seal()) {
                return Origin::Object(id);
            }
            return Origin::Unknown;
        }
        self.objects
            .iter()
            .rev()
            .find(|o| w.strip() >= o.base && w.strip() < o.base + o.size)
            .map_or(Origin::Unknown, |o| Origin::Object(o.id))
    }

    /// Frees a heap pointer through the active checker.
    pub fn dealloc_heap(&mut self, w: SealedWord, site: Site) -> Result<Option<ViolationReport>, MachineError> {
        let origin = self.origin_of(w);
        self.free_value(w, origin, site)
    }

    fn free_value(&mut self, w: SealedWord, origin: Origin, site: Site) -> Result<Option<ViolationReport>, MachineError> {
        if w.is_null() {
            return Ok(None);
        }
        let addr = w.strip();
        let truth = match origin {
            Origin::Null | Origin::Unknown => Some((TruthKind::InvalidFree, None)),
            Origin::Object(id) => {
                let o = &self.objects[id];
                if !o.live {
                    Some((TruthKind::DoubleFree, None))
                } else if o.kind != ObjectKind::Heap || addr != o.base {
                    Some((TruthKind::InvalidFree, Some(addr as i64 - o.base as i64)))
                } else {
                    None
                }
            }
        };
        if let Some((kind, offset)) = truth {
            self.truth.push(TruthEvent { kind, site, offset });
        }

        match self.cfg.tool {
            Tool::Pacsan => {
                let p = self.pacsan.as_ref().expect("pacsan state");
                let prov = Provenance {
                    objects: &self.objects,
                    origin,
                };
                let entry = match p.check_free(w, site, &prov) {
                    Ok(e) => e,
                    Err(v) => return Ok(Some(v)),
                };
                let Some(&id) = self.heap_live.get(&addr) else {
                    // Authentic, but not a heap object: the allocator refuses it.
                    return Ok(Some(ViolationReport {
                        kind: ViolationKind::InvalidFree,
                        site,
                        seal: w.seal(),
                        offset: Some(0),
                        access: AccessKind::Free,
                    }));
                };
                self.pacsan
                    .as_mut()
                    .expect("pacsan state")
                    .table
                    .clear(entry.sealed_base.seal())?;
                self.kill_object(id);
                self.heap.release(addr);
            }
            Tool::Baseline => {
                let b = self.baseline.as_mut().expect("baseline state");
                if let Err(v) = b.b_free(&mut self.heap, addr, site) {
                    return Ok(Some(v));
                }
                if let Some(&id) = self.heap_live.get(&addr) {
                    self.kill_object(id);
                }
            }
            Tool::Off => {
                if truth.is_some() {
                    return Ok(None);
                }
                if let Some(&id) = self.heap_live.get(&addr) {
                    self.kill_object(id);
                    self.heap.release(addr);
                }
            }
        }
        self.stats.frees += 1;
        Ok(None)
    }

    fn purge(&mut self, ids: &[ObjectId]) -> Result<(), MachineError> {
        for &id in ids.iter().rev() {
            let o = &self.objects[id];
            if !o.live || o.kind != ObjectKind::Stack {
                return Err(MachineError::NotAStackObject);
            }
            let (seal, base, size) = (o.seal, o.base, o.size);
            if let Some(p) = self.pacsan.as_mut() {
                p.table.clear(seal)?;
            }
            if let Some(b) = self.baseline.as_mut() {
                b.mark_dead(base, size);
            }
            self.kill_object(id);
        }
        if let Some(&first) = ids.first() {
            let start = self.objects[first].base - self.stack.guard();
            self.stack.pop_to(start);
        }
        Ok(())
    }

    /// Purges the given stack objects (innermost last in `marks`) and pops
    /// the stack back to the lowest of them.
    pub fn scope_exit(&mut self, marks: &[SealedWord]) -> Result<(), MachineError> {
        let mut ids = Vec::with_capacity(marks.len());
        for &w in marks {
            let id = self
                .objects
                .iter()
                .rev()
                .find(|o| o.live && o.kind == ObjectKind::Stack && o.base == w.strip())
                .map(|o| o.id)
                .ok_or(MachineError::NotAStackObject)?;
            ids.push(id);
        }
        ids.sort_by_key(|&id| self.objects[id].base);
        self.purge(&ids)
    }

    /// Allocates every global and publishes its word in the GOT, then
    /// freezes the table.
    pub fn init_globals(&mut self, globals: &[(String, u32)]) -> Result<&Got, MachineError> {
        if self.got.is_frozen() {
            return Err(MachineError::GotFrozen);
        }
        for (i, (name, size)) in globals.iter().enumerate() {
            if self.got.get(name).is_some() {
                return Err(MachineError::DuplicateGlobal(name.clone()));
            }
            let (w, id) = self.alloc_object(
                ObjectKind::Global,
                *size as u64,
                mix64(PacKey(0x0610_7A15), i as u64, 1),
                Vec::new(),
            )?;
            self.got.insert(name, w)?;
            self.global_ids.insert(name.clone(), id);
        }
        self.got.freeze();
        Ok(&self.got)
    }

    /// Runs one access check through the active checker.
    pub fn check_word(
        &mut self,
        w: SealedWord,
        origin: Origin,
        n: u32,
        access: Access,
        site: Site,
    ) -> Option<ViolationReport> {
        if self.cfg.tool == Tool::Off || (self.cfg.checker.write_only && access == Access::Read) {
            return None;
        }
        self.checks += 1;
        *self.stats.checks_by_site.entry(site).or_default() += 1;
        let access = match access {
            Access::Read => AccessKind::Read,
            Access::Write => AccessKind::Write,
        };
        if let Some(b) = &self.baseline {
            return b.b_check(w.strip(), n, access, site).err();
        }
        let p = self.pacsan.as_ref().expect("pacsan state");
        let prov = Provenance {
            objects: &self.objects,
            origin,
        };
        match p.check_access(w, n, access, site, &prov) {
            Err(v) => Some(v),
            Ok(()) => {
                if p.conservative_seal() != Some(w.seal()) {
                    if let Some(&owner) = self.seal_owner.get(&w.seal()) {
                        let o = &self.objects[owner];
                        let (lo, hi) = (w.strip(), w.strip() + n as u64);
                        if lo < o.base || hi > o.base + o.size {
                            self.stats.soundness_breaches += 1;
                        }
                        if matches!(origin, Origin::Object(id) if id != owner) {
                            self.stats.stale_escapes += 1;
                        }
                    } else {
                        self.stats.soundness_breaches += 1;
                    }
                }
                None
            }
        }
    }

    fn record_access_truth(&mut self, w: SealedWord, origin: Origin, n: u32, site: Site) {
        let event = match origin {
            Origin::Null => Some((TruthKind::Null, None)),
            Origin::Unknown => None,
            Origin::Object(id) => {
                let o = &self.objects[id];
                let off = w.strip() as i64 - o.base as i64;
                let end = off + n as i64;
                if !o.live {
                    Some((TruthKind::Temporal, Some(off)))
                } else if off < 0 || end > o.size as i64 {
                    Some((TruthKind::Spatial, Some(off)))
                } else if !o.subobject_bounds.is_empty()
                    && !o
                        .subobject_bounds
                        .iter()
                        .any(|&(fo, fl)| off >= fo as i64 && end <= (fo + fl) as i64)
                {
                    Some((TruthKind::Subobject, Some(off)))
                } else {
                    None
                }
            }
        };
        if let Some((kind, offset)) = event {
            self.truth.push(TruthEvent { kind, site, offset });
        }
    }

    fn report(&mut self, v: ViolationReport) -> Flow {
        self.violations.push(v);
        if self.cfg.halt_on_first {
            Flow::Halt
        } else {
            Flow::Go
        }
    }

    fn value(&self, reg: &str, site: Site) -> Result<Value, MachineError> {
        self.env.get(reg).copied().ok_or_else(|| MachineError::Undefined {
            site,
            reg: reg.to_string(),
        })
    }

    fn ptr(&self, reg: &str, site: Site) -> Result<(SealedWord, Origin), MachineError> {
        match self.value(reg, site)? {
            Value::Ptr { word, origin } => Ok((word, origin)),
            Value::Int(_) => Err(MachineError::NotAPointer {
                site,
                reg: reg.to_string(),
            }),
        }
    }

    fn eval(&self, a: &crate::ir::Affine, site: Site) -> Result<i64, MachineError> {
        let mut err = None;
        let v = a.eval(|r| match self.env.get(r) {
            Some(Value::Int(i)) => Some(*i),
            Some(Value::Ptr { .. }) => {
                err = Some(MachineError::NotAnInteger {
                    site,
                    reg: r.to_string(),
                });
                None
            }
            None => {
                err = Some(MachineError::Undefined {
                    site,
                    reg: r.to_string(),
                });
                None
            }
        });
        match (v, err) {
            (Some(v), _) => Ok(v),
            (None, Some(e)) => Err(e),
            (None, None) => unreachable!("affine evaluation fails only through the callback"),
        }
    }

    /// Executes a block as one stack scope.
    fn exec_scope(&mut self, block: &[Stmt]) -> Result<Flow, MachineError> {
        let mut frame = Vec::new();
        let flow = self.exec_block(block, &mut frame)?;
        if let Flow::Halt = flow {
            return Ok(Flow::Halt);
        }
        self.purge(&frame)?;
        Ok(Flow::Go)
    }

    fn exec_block(&mut self, block: &[Stmt], frame: &mut Vec<ObjectId>) -> Result<Flow, MachineError> {
        for s in block {
            if let Flow::Halt = self.exec_stmt(s, frame)? {
                return Ok(Flow::Halt);
            }
        }
        Ok(Flow::Go)
    }

    fn exec_stmt(&mut self, s: &Stmt, frame: &mut Vec<ObjectId>) -> Result<Flow, MachineError> {
        let site = s.id();
        match s {
            Stmt::Alloc {
                dst, kind, size, fields, ..
            } => {
                let n = self.eval(size, site)?;
                if n <= 0 {
                    return Err(MachineError::AllocSize(n));
                }
                let fields = fields.iter().map(|&(o, l)| (o as u64, l as u64)).collect();
                let (word, id) = self.alloc_object((*kind).into(), n as u64, site_constant(site), fields)?;
                if *kind == AllocKind::Stack {
                    frame.push(id);
                }
                self.env.insert(
                    dst.clone(),
                    Value::Ptr {
                        word,
                        origin: Origin::Object(id),
                    },
                );
            }
            Stmt::Gep { dst, ptr, index, .. } => {
                let (word, origin) = self.ptr(ptr, site)?;
                let delta = self.eval(index, site)?;
                self.env.insert(
                    dst.clone(),
                    Value::Ptr {
                        word: word.offset(delta),
                        origin,
                    },
                );
            }
            Stmt::Load { ptr, width, .. } | Stmt::Store { ptr, width, .. } => {
                let (word, origin) = self.ptr(ptr, site)?;
                self.record_access_truth(word, origin, *width, site);
            }
            Stmt::Free { ptr, .. } => {
                let (word, origin) = self.ptr(ptr, site)?;
                if let Some(v) = self.free_value(word, origin, site)? {
                    return Ok(self.report(v));
                }
            }
            Stmt::Check(c) => {
                let (word, origin) = self.ptr(&c.ptr, site)?;
                let delta = self.eval(&c.offset, site)?;
                if let Some(v) = self.check_word(word.offset(delta), origin, c.width, c.access, c.site) {
                    return Ok(self.report(v));
                }
            }
            Stmt::Loop {
                var, lo, hi, step, body, ..
            } => {
                let mut i = *lo;
                while if *step > 0 { i < *hi } else { i > *hi } {
                    self.env.insert(var.clone(), Value::Int(i));
                    if let Flow::Halt = self.exec_scope(body)? {
                        return Ok(Flow::Halt);
                    }
                    i = match i.checked_add(*step) {
                        Some(next) => next,
                        None => break,
                    };
                }
            }
            Stmt::If {
                cond,
                then_body,
                else_body,
                ..
            } => {
                let (a, b) = (self.eval(&cond.lhs, site)?, self.eval(&cond.rhs, site)?);
                let arm = if cond.op.apply(a, b) { then_body } else { else_body };
                return self.exec_scope(arm);
            }
            Stmt::CallExt { ptr, .. } => {
                let (word, _) = self.ptr(ptr, site)?;
                if let Some(p) = &self.pacsan {
                    if let Err(v) = p.boundary_out(word, site) {
                        return Ok(self.report(v));
                    }
                }
            }
            Stmt::RecvExt { dst, ptr, .. } => {
                let (word, origin) = self.ptr(ptr, site)?;
                let counter = self.alloc_counter;
                let word = match self.pacsan.as_mut() {
                    Some(p) => p.boundary_in(word.strip(), counter)?,
                    None => SealedWord::encode(word.strip(), 0).expect("masked"),
                };
                self.env.insert(dst.clone(), Value::Ptr { word, origin });
            }
            Stmt::Input { dst, .. } => {
                let v = self.inputs.pop_front().ok_or(MachineError::InputExhausted(site))?;
                self.env.insert(dst.clone(), Value::Int(v));
            }
            Stmt::AddrOf { dst, global, .. } => {
                let word = self.got.get(global).ok_or_else(|| MachineError::UnknownGlobal(global.clone()))?;
                let origin = Origin::Object(self.global_ids[global]);
                self.env.insert(dst.clone(), Value::Ptr { word, origin });
            }
            Stmt::Null { dst, .. } => {
                self.env.insert(
                    dst.clone(),
                    Value::Ptr {
                        word: SealedWord::NULL,
                        origin: Origin::Null,
                    },
                );
            }
        }
        Ok(Flow::Go)
    }

    /// Executes `p` from a fresh start: globals, then each function in order,
    /// each function body being one stack scope.
    pub fn run(&mut self, p: &Program) -> Result<RunResult, MachineError> {
        self.set_inputs(&p.inputs);
        let globals: Vec<(String, u32)> = p.globals.iter().map(|g| (g.name.clone(), g.size)).collect();
        self.init_globals(&globals)?;
        for f in &p.functions {
            if let Flow::Halt = self.exec_scope(&f.body)? {
                break;
            }
        }
        self.stats.live_objects_at_exit = self.live;
        Ok(RunResult {
            violations: std::mem::take(&mut self.violations),
            dynamic_check_count: self.checks,
            stats: self.stats.clone(),
            ground_truth: std::mem::take(&mut self.truth),
        })
    }
}

/// Runs a program on a fresh machine.
pub fn run(p: &Program, cfg: RunConfig, key: PacKey) -> Result<RunResult, MachineError> {
    Machine::new(key, cfg).run(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{instrument, parse};
    use crate::sealcodec::DEFAULT_KEY;

    const KEY: PacKey = PacKey(DEFAULT_KEY);

    fn machine() -> Machine {
        Machine::new(KEY, RunConfig::default())
    }

    #[test]
    fn heap_allocations_are_disjoint_and_sealed() {
        let mut m = machine();
        let a = m.alloc(ObjectKind::Heap, 100, 1).unwrap();
        let b = m.alloc(ObjectKind::Heap, 1000, 2).unwrap();
        assert_ne!(a.seal(), b.seal());
        assert!(a.strip() + 100 <= b.strip());
        assert_eq!(m.alloc(ObjectKind::Heap, 1 << 32, 3), Err(MachineError::AllocSize(1 << 32)));
        assert_eq!(m.alloc(ObjectKind::Heap, 0, 3), Err(MachineError::AllocSize(0)));
    }

    #[test]
    fn heap_reuse_gets_fresh_seal() {
        let mut m = machine();
        let a = m.alloc(ObjectKind::Heap, 32, 7).unwrap();
        assert_eq!(m.dealloc_heap(a, 1).unwrap(), None);
        let b = m.alloc(ObjectKind::Heap, 32, 7).unwrap();
        assert_eq!(a.strip(), b.strip());
        assert_ne!(a.seal(), b.seal());
        let table = &m.pacsan().unwrap().table;
        assert!(table.lookup(a.seal()).is_empty());
        let v = m.dealloc_heap(a, 2).unwrap().unwrap();
        assert_eq!(v.kind, ViolationKind::DoubleFree);
    }

    #[test]
    fn scope_exit_purges_without_auth() {
        let mut m = machine();
        let outer = m.alloc(ObjectKind::Stack, 16, 1).unwrap();
        let inner = m.alloc(ObjectKind::Stack, 16, 2).unwrap();
        m.scope_exit(&[inner]).unwrap();
        let table = &m.pacsan().unwrap().table;
        assert!(table.lookup(inner.seal()).is_empty());
        assert!(!table.lookup(outer.seal()).is_empty());
        let v = m.check_word(inner, Origin::Unknown, 1, Access::Write, 9).unwrap();
        assert_eq!(v.kind, ViolationKind::TemporalInvalid);
        m.scope_exit(&[]).unwrap();
        assert_eq!(m.live_objects(), 1);
        m.scope_exit(&[outer]).unwrap();
        assert_eq!(m.live_objects(), 0);
    }

    #[test]
    fn got_is_frozen_after_init() {
        let mut m = machine();
        let got = m.init_globals(&[("a".into(), 16), ("b".into(), 32)]).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got.is_frozen());
        assert_eq!(m.pacsan().unwrap().table.live_count(), 2);
        assert_eq!(m.got_mut().insert("c", SealedWord::NULL), Err(MachineError::GotFrozen));
        assert_eq!(m.init_globals(&[]).unwrap_err(), MachineError::GotFrozen);

        let mut empty = machine();
        assert!(empty.init_globals(&[]).unwrap().is_empty());
        let mut dup = machine();
        assert_eq!(
            dup.init_globals(&[("a".into(), 1), ("a".into(), 1)]).unwrap_err(),
            MachineError::DuplicateGlobal("a".into())
        );
    }

    #[test]
    fn exec_errors_are_not_violations() {
        let p = parse("func main { %x = input %p = gep %x, 1 }").unwrap();
        let mut prog = p.clone();
        prog.inputs = vec![1];
        assert!(matches!(run(&prog, RunConfig::default(), KEY), Err(MachineError::NotAPointer { .. })));
        assert!(matches!(run(&p, RunConfig::default(), KEY), Err(MachineError::InputExhausted(1))));
    }

    #[test]
    fn free_of_global_is_refused() {
        let p = instrument(&parse("global @g 8 func main { %g = addr_of @g free %g }").unwrap()).unwrap();
        let r = run(&p, RunConfig::default(), KEY).unwrap();
        assert_eq!(r.violations[0].kind, ViolationKind::InvalidFree);
        assert_eq!(r.ground_truth[0].kind, TruthKind::InvalidFree);
    }

    #[test]
    fn loop_scopes_purge_each_iteration() {
        let p = instrument(
            &parse("func main { loop %i = 0, 3, 1 { %s = alloc stack 32 store %s, 4 } }").unwrap(),
        )
        .unwrap();
        let r = run(&p, RunConfig::default(), KEY).unwrap();
        assert!(r.violations.is_empty());
        assert_eq!(r.stats.max_live_objects, 1);
        assert_eq!(r.stats.live_objects_at_exit, 0);
        assert_eq!(r.dynamic_check_count, 3);
    }

    #[test]
    fn free_null_is_a_no_op() {
        let p = parse("func main { %n = null free %n }").unwrap();
        let r = run(&p, RunConfig::default(), KEY).unwrap();
        assert!(r.violations.is_empty() && r.ground_truth.is_empty());
    }
}
