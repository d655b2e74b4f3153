//! Corpus generation, scoring, and the statistical experiments.
//!
//! Every generated case is labelled by running it uninstrumented with the
//! checker switched off and reading the machine's ground-truth log. A
//! generator that produces a GOOD case with an error, or a BAD case without
//! the intended one, is a bug in the generator and panics.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::arena::round_up;
use crate::checker::ViolationKind;
use crate::ir::{instrument, parse, Access, IrError, OptFlags, Program};
use crate::machine::{Machine, MachineError, ObjectKind, Origin, RunConfig, TruthKind, Tool};
use crate::sealcodec::{modifier, pac24, PacKey};

pub const LISTING_A1: &str = include_str!("../fixtures/listing_a1.pir");
pub const LISTING_A2: &str = include_str!("../fixtures/listing_a2.pir");
pub const LISTING_A3: &str = include_str!("../fixtures/listing_a3.pir");

/// Redzone width assumed by generators that aim past one object into the next.
const GUARD: i64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cwe {
    StackOverflow,
    HeapOverflow,
    Underwrite,
    Overread,
    Underread,
    DoubleFree,
    UseAfterFree,
    NullDeref,
    InvalidFree,
    Subobject,
}

impl Cwe {
    pub const ALL: [Cwe; 10] = [
        Cwe::StackOverflow,
        Cwe::HeapOverflow,
        Cwe::Underwrite,
        Cwe::Overread,
        Cwe::Underread,
        Cwe::DoubleFree,
        Cwe::UseAfterFree,
        Cwe::NullDeref,
        Cwe::InvalidFree,
        Cwe::Subobject,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Cwe::StackOverflow => "121",
            Cwe::HeapOverflow => "122",
            Cwe::Underwrite => "124",
            Cwe::Overread => "126",
            Cwe::Underread => "127",
            Cwe::DoubleFree => "415",
            Cwe::UseAfterFree => "416",
            Cwe::NullDeref => "476",
            Cwe::InvalidFree => "761",
            Cwe::Subobject => "subobject",
        }
    }

    fn id_prefix(self) -> String {
        match self {
            Cwe::Subobject => "subobject".to_string(),
            c => format!("cwe{}", c.as_str()),
        }
    }

    /// Ground-truth kind every BAD case of this class must exhibit first.
    pub fn truth_kind(self) -> TruthKind {
        match self {
            Cwe::StackOverflow | Cwe::HeapOverflow | Cwe::Underwrite | Cwe::Overread | Cwe::Underread => {
                TruthKind::Spatial
            }
            Cwe::DoubleFree => TruthKind::DoubleFree,
            Cwe::UseAfterFree => TruthKind::Temporal,
            Cwe::NullDeref => TruthKind::Null,
            Cwe::InvalidFree => TruthKind::InvalidFree,
            Cwe::Subobject => TruthKind::Subobject,
        }
    }
}

impl FromStr for Cwe {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Cwe::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown CWE class {s:?}"))
    }
}

impl Serialize for Cwe {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Cwe {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Good,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusCase {
    pub id: String,
    pub cwe: Cwe,
    pub variant: Variant,
    /// Uninstrumented program; its `inputs` directive carries the case inputs.
    pub program: Program,
    pub violates: bool,
    pub expected_kind: Option<TruthKind>,
}

/// Ground truth for a program: the first error kind, if any.
pub fn label(p: &Program, key: PacKey) -> Result<Option<TruthKind>, MachineError> {
    let cfg = RunConfig {
        tool: Tool::Off,
        halt_on_first: false,
        ..RunConfig::default()
    };
    let r = Machine::new(key, cfg).run(p)?;
    Ok(r.ground_truth.first().map(|e| e.kind))
}

/// Emits one program body. Registers are unique per program; `n` counts them.
struct Gen {
    rng: ChaCha8Rng,
    body: String,
    prelude: String,
    funcs: String,
    inputs: Vec<i64>,
    regs: usize,
}

impl Gen {
    fn reg(&mut self, stem: &str) -> String {
        self.regs += 1;
        format!("{stem}{}", self.regs)
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.body.push_str("  ");
        self.body.push_str(s.as_ref());
        self.body.push('\n');
    }

    fn input(&mut self, v: i64) -> String {
        self.inputs.push(v);
        let r = self.reg("in");
        self.line(format!("%{r} = input"));
        r
    }

    fn alloc(&mut self, kind: &str, size: i64) -> String {
        let r = self.reg(if kind == "heap" { "h" } else { "s" });
        self.line(format!("%{r} = alloc {kind} {size}"));
        r
    }

    fn gep(&mut self, p: &str, off: impl std::fmt::Display) -> String {
        let r = self.reg("p");
        self.line(format!("%{p2} = gep %{p}, {off}", p2 = r));
        r
    }

    fn access(&mut self, write: bool, p: &str, width: i64) {
        let op = if write { "store" } else { "load" };
        self.line(format!("{op} %{p}, {width}"));
    }

    fn width(&mut self) -> i64 {
        *[1, 1, 2, 4, 8].choose(&mut self.rng).unwrap()
    }

    fn size(&mut self) -> i64 {
        let w = self.rng.gen_range(0..4);
        match w {
            0 => self.rng.gen_range(8..=32),
            1 => self.rng.gen_range(33..=128),
            2 => self.rng.gen_range(129..=512),
            _ => 8 * self.rng.gen_range(1..=64),
        }
    }

    /// Error-free traffic that gives the optimizer something to chew on.
    fn noise(&mut self) {
        let n = self.rng.gen_range(0..3);
        for _ in 0..n {
            match self.rng.gen_range(0..5) {
                0 => {
                    let size = 8 * self.rng.gen_range(1..8);
                    let h = self.alloc("heap", size);
                    let trips = self.rng.gen_range(1..12);
                    let i = self.reg("i");
                    let a = self.reg("p");
                    self.line(format!("loop %{i} = 0, {trips}, 1 {{"));
                    self.line(format!("  store %{h}, 4"));
                    self.line(format!("  %{a} = gep %{h}, 4"));
                    self.line(format!("  load %{a}, 4"));
                    self.line("}");
                    self.line(format!("free %{h}"));
                }
                1 => {
                    let size = self.rng.gen_range(16..64);
                    let s = self.alloc("stack", size);
                    let off = self.rng.gen_range(0..size - 8);
                    let p = self.gep(&s, off);
                    self.access(true, &p, 8);
                    self.access(false, &p, 8);
                    self.access(false, &p, 8);
                }
                2 => {
                    let size = self.rng.gen_range(4..40);
                    let h = self.alloc("heap", size);
                    let i = self.reg("i");
                    let p = self.reg("p");
                    self.line(format!("loop %{i} = 0, {size}, 1 {{"));
                    self.line(format!("  %{p} = gep %{h}, %{i}"));
                    self.line(format!("  store %{p}, 1"));
                    self.line("}");
                    self.line(format!("call_ext %{h}"));
                    let back = self.reg("x");
                    self.line(format!("%{back} = recv_ext %{h}"));
                    self.access(false, &back, 1);
                    self.line(format!("free %{h}"));
                }
                3 => {
                    let g = self.reg("g");
                    let size = 8 * self.rng.gen_range(1..16);
                    writeln!(self.prelude, "global @{g} {size}").unwrap();
                    let a = self.reg("a");
                    self.line(format!("%{a} = addr_of @{g}"));
                    let off = self.rng.gen_range(0..size / 8) * 8;
                    let p = self.gep(&a, off);
                    self.access(true, &p, 8);
                }
                _ => {
                    let x = self.rng.gen_range(0..10);
                    let v = self.input(x);
                    let size = 16;
                    let h = self.alloc("heap", size);
                    self.line(format!("if %{v} < 5 {{"));
                    self.line(format!("  store %{h}, 8"));
                    self.line("} else {");
                    self.line(format!("  load %{h}, 16"));
                    self.line("}");
                    self.line(format!("free %{h}"));
                }
            }
        }
    }

    fn finish(self) -> String {
        let mut out = String::new();
        if !self.inputs.is_empty() {
            let list: Vec<String> = self.inputs.iter().map(i64::to_string).collect();
            writeln!(out, "inputs {}", list.join(", ")).unwrap();
        }
        out.push_str(&self.prelude);
        out.push_str(&self.funcs);
        out.push_str("func main {\n");
        out.push_str(&self.body);
        out.push_str("}\n");
        out
    }
}

/// Accesses past the end of an object (`write` selects store vs load).
fn gen_overflow(g: &mut Gen, kind: &str, write: bool, bad: bool) {
    g.noise();
    match g.rng.gen_range(0..4) {
        0 => {
            let size = g.size();
            let w = g.width().min(size);
            let b = g.alloc(kind, size);
            let idx = if bad {
                g.rng.gen_range(size - w + 1..=size + 64)
            } else {
                g.rng.gen_range(0..=size - w)
            };
            let i = g.input(idx);
            let p = g.gep(&b, format!("%{i}"));
            g.access(write, &p, w);
            if kind == "heap" {
                g.line(format!("free %{b}"));
            }
        }
        1 => {
            let size = g.size();
            let b = g.alloc(kind, size);
            let trips = if bad { size + g.rng.gen_range(1..=16) } else { size };
            let i = g.reg("i");
            let p = g.reg("p");
            g.line(format!("loop %{i} = 0, {trips}, 1 {{"));
            g.line(format!("  %{p} = gep %{b}, %{i}"));
            g.line(format!("  {} %{p}, 1", if write { "store" } else { "load" }));
            g.line("}");
            if kind == "heap" {
                g.line(format!("free %{b}"));
            }
        }
        2 => {
            // Index far enough to skip the redzone and land in the neighbour.
            let first = g.size();
            let second = g.size().max(16);
            let b1 = g.alloc(kind, first);
            let b2 = g.alloc(kind, second);
            let w = g.width().min(first);
            let idx = if bad {
                round_up(first as u64, 16) as i64 + 2 * GUARD + g.rng.gen_range(0..=second - w)
            } else {
                g.rng.gen_range(0..=first - w)
            };
            let i = g.input(idx);
            let p = g.gep(&b1, format!("%{i}"));
            g.access(write, &p, w);
            if kind == "heap" {
                g.line(format!("free %{b2}"));
                g.line(format!("free %{b1}"));
            }
        }
        _ => {
            let words = g.rng.gen_range(2..=32);
            let b = g.alloc(kind, 4 * words);
            let trips = if bad { words + 1 } else { words };
            let i = g.reg("i");
            let p = g.reg("p");
            g.line(format!("loop %{i} = 0, {trips}, 1 {{"));
            g.line(format!("  %{p} = gep %{b}, %{i}*4"));
            g.line(format!("  {} %{p}, 4", if write { "store" } else { "load" }));
            g.line("}");
            if kind == "heap" {
                g.line(format!("free %{b}"));
            }
        }
    }
    g.noise();
}

/// Accesses before the start of an object.
fn gen_underflow(g: &mut Gen, write: bool, bad: bool) {
    let kind = if g.rng.gen_bool(0.5) { "heap" } else { "stack" };
    g.noise();
    let size = g.size();
    let b = g.alloc(kind, size);
    match g.rng.gen_range(0..3) {
        0 => {
            let w = g.width().min(size);
            let off = if bad {
                -g.rng.gen_range(1..=64)
            } else {
                g.rng.gen_range(0..=size - w)
            };
            let p = g.gep(&b, off);
            g.access(write, &p, w);
        }
        1 => {
            // Walk backwards from a cursor in the middle.
            let mid = g.rng.gen_range(0..size);
            let m = g.gep(&b, mid);
            let back = if bad {
                mid + g.rng.gen_range(1..=16)
            } else {
                g.rng.gen_range(0..=mid)
            };
            let d = g.input(back);
            let p = g.gep(&m, format!("%{d}*-1"));
            g.access(write, &p, 1);
        }
        _ => {
            let stop = if bad { -1 - g.rng.gen_range(1..=8) } else { -1 };
            let i = g.reg("i");
            let p = g.reg("p");
            g.line(format!("loop %{i} = {}, {stop}, -1 {{", size - 1));
            g.line(format!("  %{p} = gep %{b}, %{i}"));
            g.line(format!("  {} %{p}, 1", if write { "store" } else { "load" }));
            g.line("}");
        }
    }
    if kind == "heap" {
        g.line(format!("free %{b}"));
    }
    g.noise();
}

fn gen_double_free(g: &mut Gen, bad: bool) {
    g.noise();
    let size = g.size();
    let a = g.alloc("heap", size);
    match g.rng.gen_range(0..3) {
        0 => {
            g.access(true, &a, 1);
            g.line(format!("free %{a}"));
            if bad {
                g.line(format!("free %{a}"));
            }
        }
        1 => {
            // Free through an alias after the slot has been handed out again.
            let alias = g.gep(&a, 0);
            g.line(format!("free %{a}"));
            let again = g.alloc("heap", size);
            g.access(true, &again, 1);
            if bad {
                g.line(format!("free %{alias}"));
            }
            g.line(format!("free %{again}"));
        }
        _ => {
            // Free inside a loop: the second trip frees again.
            let trips = if bad { 2 } else { 1 };
            let i = g.reg("i");
            g.line(format!("loop %{i} = 0, {trips}, 1 {{"));
            g.line(format!("  free %{a}"));
            g.line("}");
        }
    }
    g.noise();
}

fn gen_use_after_free(g: &mut Gen, bad: bool) {
    g.noise();
    let write = g.rng.gen_bool(0.5);
    match g.rng.gen_range(0..4) {
        0 => {
            let size = g.size();
            let a = g.alloc("heap", size);
            let w = g.width().min(size);
            let off = g.rng.gen_range(0..=size - w);
            let p = g.gep(&a, off);
            if !bad {
                g.access(write, &p, w);
            }
            g.line(format!("free %{a}"));
            if bad {
                g.access(write, &p, w);
            }
        }
        1 => {
            // Stale pointer into a reallocated slot of the same size.
            let size = g.size();
            let a = g.alloc("heap", size);
            let copy = g.gep(&a, 0);
            g.line(format!("free %{a}"));
            let b = g.alloc("heap", size);
            let target = if bad { copy } else { b.clone() };
            g.access(write, &target, 1);
            g.line(format!("free %{b}"));
        }
        2 => {
            let size = g.size();
            let a = g.alloc("heap", size);
            let n = g.rng.gen_range(1..6);
            let churn = g.reg("c");
            let i = g.reg("i");
            if bad {
                g.line(format!("free %{a}"));
            }
            g.line(format!("loop %{i} = 0, {n}, 1 {{"));
            g.line(format!("  %{churn} = alloc heap {size}"));
            g.line(format!("  free %{churn}"));
            g.line("}");
            g.access(write, &a, 1);
            if !bad {
                g.line(format!("free %{a}"));
            }
        }
        _ => {
            // Stack object used after the function that owned it returned.
            let size = g.size();
            let s = g.reg("s");
            let f = g.reg("helper");
            writeln!(g.funcs, "func {f} {{\n  %{s} = alloc stack {size}\n  store %{s}, 1\n}}").unwrap();
            if bad {
                g.access(write, &s, 1);
            } else {
                let a = g.alloc("stack", size);
                g.access(write, &a, 1);
            }
        }
    }
    g.noise();
}

fn gen_null_deref(g: &mut Gen, bad: bool) {
    g.noise();
    let n = g.reg("n");
    g.line(format!("%{n} = null"));
    let size = g.size().max(16);
    let a = g.alloc("heap", size);
    let sel = g.input(if bad { 0 } else { 1 });
    let write = g.rng.gen_bool(0.5);
    let op = if write { "store" } else { "load" };
    let target = if g.rng.gen_bool(0.5) {
        n.clone()
    } else {
        let f = g.rng.gen_range(1..16) * 8;
        g.gep(&n, f)
    };
    g.line(format!("if %{sel} == 0 {{"));
    g.line(format!("  {op} %{target}, 8"));
    g.line("} else {");
    g.line(format!("  {op} %{a}, 8"));
    g.line("}");
    g.line(format!("free %{a}"));
    g.noise();
}

fn gen_invalid_free(g: &mut Gen, bad: bool) {
    g.noise();
    let size = g.size();
    match g.rng.gen_range(0..3) {
        0 => {
            let a = g.alloc("heap", size);
            if bad {
                let off = g.rng.gen_range(1..size);
                let p = g.gep(&a, off);
                g.line(format!("free %{p}"));
            } else {
                let p = g.gep(&a, 0);
                g.line(format!("free %{p}"));
            }
        }
        1 => {
            let kind = if bad { "stack" } else { "heap" };
            let a = g.alloc(kind, size);
            g.access(true, &a, 1);
            g.line(format!("free %{a}"));
        }
        _ => {
            let h = g.alloc("heap", size);
            if bad {
                let gl = g.reg("g");
                writeln!(g.prelude, "global @{gl} {size}").unwrap();
                let a = g.reg("a");
                g.line(format!("%{a} = addr_of @{gl}"));
                g.line(format!("free %{a}"));
            }
            g.line(format!("free %{h}"));
        }
    }
    g.noise();
}

fn gen_subobject(g: &mut Gen, bad: bool) {
    g.noise();
    let kind = if g.rng.gen_bool(0.5) { "heap" } else { "stack" };
    let first = 8 * g.rng.gen_range(1..=8);
    let second = 8 * g.rng.gen_range(1..=8);
    let r = g.reg("o");
    g.line(format!("%{r} = alloc {kind} {} fields 0:{first} {first}:{second}", first + second));
    let w = *[2, 4, 8].choose(&mut g.rng).unwrap();
    let off = if bad {
        g.rng.gen_range(first - w + 1..first)
    } else if g.rng.gen_bool(0.5) {
        g.rng.gen_range(0..=first - w)
    } else {
        first + g.rng.gen_range(0..=second - w)
    };
    let i = g.input(off);
    let p = g.gep(&r, format!("%{i}"));
    let write = g.rng.gen_bool(0.5);
    g.access(write, &p, w);
    if kind == "heap" {
        g.line(format!("free %{r}"));
    }
    g.noise();
}

fn generate(cwe: Cwe, bad: bool, rng: ChaCha8Rng) -> String {
    let mut g = Gen {
        rng,
        body: String::new(),
        prelude: String::new(),
        funcs: String::new(),
        inputs: Vec::new(),
        regs: 0,
    };
    match cwe {
        Cwe::StackOverflow => {
            let write = g.rng.gen_bool(0.75);
            gen_overflow(&mut g, "stack", write, bad)
        }
        Cwe::HeapOverflow => {
            let write = g.rng.gen_bool(0.75);
            gen_overflow(&mut g, "heap", write, bad)
        }
        Cwe::Overread => {
            let kind = if g.rng.gen_bool(0.5) { "heap" } else { "stack" };
            gen_overflow(&mut g, kind, false, bad)
        }
        Cwe::Underwrite => gen_underflow(&mut g, true, bad),
        Cwe::Underread => gen_underflow(&mut g, false, bad),
        Cwe::DoubleFree => gen_double_free(&mut g, bad),
        Cwe::UseAfterFree => gen_use_after_free(&mut g, bad),
        Cwe::NullDeref => gen_null_deref(&mut g, bad),
        Cwe::InvalidFree => gen_invalid_free(&mut g, bad),
        Cwe::Subobject => gen_subobject(&mut g, bad),
    }
    g.finish()
}

fn listing_for(cwe: Cwe) -> Option<&'static str> {
    match cwe {
        Cwe::HeapOverflow => Some(LISTING_A1),
        Cwe::UseAfterFree => Some(LISTING_A2),
        Cwe::InvalidFree => Some(LISTING_A3),
        _ => None,
    }
}

/// Generates `per_cwe` GOOD and `per_cwe` BAD cases for every class.
///
/// The three committed case-study listings take the place of BAD case 0 of
/// their class. Panics if `per_cwe` is zero or a generator produces a mislabelled case.
pub fn gen_corpus(seed: u64, per_cwe: usize) -> Vec<CorpusCase> {
    assert!(per_cwe >= 1, "per_cwe must be at least 1");
    let key = PacKey(crate::sealcodec::DEFAULT_KEY);
    let mut out = Vec::with_capacity(Cwe::ALL.len() * per_cwe * 2);
    for (ci, cwe) in Cwe::ALL.into_iter().enumerate() {
        for variant in [Variant::Good, Variant::Bad] {
            let bad = variant == Variant::Bad;
            for n in 0..per_cwe {
                let stream = ((ci as u64) << 32) | ((bad as u64) << 31) | n as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let text = match listing_for(cwe) {
                    Some(listing) if bad && n == 0 => listing.to_string(),
                    _ => generate(cwe, bad, rng),
                };
                let program = parse(&text).unwrap_or_else(|e| panic!("generator emitted bad IR: {e}\n{text}"));
                let id = format!("{}-{}-{n:03}", cwe.id_prefix(), if bad { "bad" } else { "good" });
                let truth = label(&program, key).unwrap_or_else(|e| panic!("{id}: {e}\n{text}"));
                if bad {
                    assert_eq!(truth, Some(cwe.truth_kind()), "{id} mislabelled\n{text}");
                } else {
                    assert_eq!(truth, None, "{id} mislabelled\n{text}");
                }
                out.push(CorpusCase {
                    id,
                    cwe,
                    variant,
                    program,
                    violates: bad,
                    expected_kind: truth,
                });
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("{0}: {1}")]
    Ir(String, IrError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    cwe: Cwe,
    variant: Variant,
    violates: bool,
    expected: Option<TruthKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    per_cwe: usize,
    cases: Vec<ManifestEntry>,
}

/// A corpus with the seed that produced it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub per_cwe: usize,
    pub cases: Vec<CorpusCase>,
}

impl Corpus {
    pub fn generate(seed: u64, per_cwe: usize) -> Self {
        Corpus {
            seed,
            per_cwe,
            cases: gen_corpus(seed, per_cwe),
        }
    }

    /// Writes `manifest.json` and one `<id>.pir` per case.
    pub fn write_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        let io = |p: &Path, e| CorpusError::Io(p.display().to_string(), e);
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut entries = Vec::new();
        for c in &self.cases {
            let path = dir.join(format!("{}.pir", c.id));
            fs::write(&path, c.program.to_string()).map_err(|e| io(&path, e))?;
            entries.push(ManifestEntry {
                id: c.id.clone(),
                cwe: c.cwe,
                variant: c.variant,
                violates: c.violates,
                expected: c.expected_kind,
            });
        }
        let manifest = Manifest {
            seed: self.seed,
            per_cwe: self.per_cwe,
            cases: entries,
        };
        let text = serde_json::to_string_pretty(&serde_json::to_value(&manifest)?)?;
        let path = dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| io(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self, CorpusError> {
        let io = |p: &Path, e| CorpusError::Io(p.display().to_string(), e);
        let path = dir.join("manifest.json");
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).map_err(|e| io(&path, e))?)?;
        let mut cases = Vec::with_capacity(manifest.cases.len());
        for e in manifest.cases {
            let path = dir.join(format!("{}.pir", e.id));
            let text = fs::read_to_string(&path).map_err(|err| io(&path, err))?;
            let program = parse(&text).map_err(|err| CorpusError::Ir(path.display().to_string(), err))?;
            cases.push(CorpusCase {
                id: e.id,
                cwe: e.cwe,
                variant: e.variant,
                program,
                violates: e.violates,
                expected_kind: e.expected,
            });
        }
        cases.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Corpus {
            seed: manifest.seed,
            per_cwe: manifest.per_cwe,
            cases,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaseVerdict {
    pub id: String,
    pub cwe: Cwe,
    pub variant: Variant,
    pub expected: Option<TruthKind>,
    pub detected: bool,
    pub kind: Option<ViolationKind>,
    pub site: Option<u32>,
    pub checks: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClassScore {
    pub good: usize,
    pub bad: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ClassScore {
    pub fn fp_rate(&self) -> f64 {
        if self.good == 0 {
            0.0
        } else {
            self.false_positives as f64 / self.good as f64
        }
    }

    pub fn fn_rate(&self) -> f64 {
        if self.bad == 0 {
            0.0
        } else {
            self.false_negatives as f64 / self.bad as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreReport {
    pub key: PacKey,
    pub seed: u64,
    pub tool: Tool,
    pub flags: OptFlags,
    pub cases: Vec<CaseVerdict>,
}

impl ScoreReport {
    pub fn by_class(&self) -> BTreeMap<Cwe, ClassScore> {
        let mut out: BTreeMap<Cwe, ClassScore> = BTreeMap::new();
        for c in &self.cases {
            let s = out.entry(c.cwe).or_default();
            match c.variant {
                Variant::Good => {
                    s.good += 1;
                    s.false_positives += c.detected as usize;
                }
                Variant::Bad => {
                    s.bad += 1;
                    s.false_negatives += !c.detected as usize;
                }
            }
        }
        out
    }

    pub fn verdict(&self, id: &str) -> Option<&CaseVerdict> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Stable JSON with sorted keys and cases ordered by id.
    pub fn to_json(&self) -> String {
        let doc = json!({
            "meta": {
                "key": self.key.to_string(),
                "seed": self.seed,
                "tool": self.tool,
                "flags": self.flags.names(),
            },
            "cases": self.cases,
        });
        serde_json::to_string_pretty(&doc).expect("serializable") + "\n"
    }

    /// Plain-text per-class table.
    pub fn summary(&self) -> String {
        let mut out = format!("{:<10} {:>5} {:>5} {:>8} {:>8}\n", "cwe", "good", "bad", "FP", "FN");
        for (cwe, s) in self.by_class() {
            writeln!(
                out,
                "{:<10} {:>5} {:>5} {:>7.1}% {:>7.1}%",
                cwe.as_str(),
                s.good,
                s.bad,
                100.0 * s.fp_rate(),
                100.0 * s.fn_rate()
            )
            .unwrap();
        }
        out
    }
}

/// Instruments `p`, applies `flags`, and runs it under `cfg`.
pub fn run_case(p: &Program, flags: OptFlags, cfg: RunConfig, key: PacKey) -> Result<crate::machine::RunResult, MachineError> {
    let inst = instrument(p).expect("corpus programs carry no checks");
    let opt = flags.apply(&inst);
    let mut cfg = cfg;
    cfg.checker.write_only |= flags.write_only;
    Machine::new(key, cfg).run(&opt)
}

pub fn score(corpus: &Corpus, tool: Tool, flags: OptFlags, key: PacKey) -> Result<ScoreReport, MachineError> {
    let cfg = RunConfig {
        tool,
        ..RunConfig::default()
    };
    let mut cases = Vec::with_capacity(corpus.cases.len());
    for c in &corpus.cases {
        let r = run_case(&c.program, flags, cfg, key)?;
        let first = r.violations.first();
        cases.push(CaseVerdict {
            id: c.id.clone(),
            cwe: c.cwe,
            variant: c.variant,
            expected: c.expected_kind,
            detected: first.is_some(),
            kind: first.map(|v| v.kind),
            site: first.map(|v| v.site),
            checks: r.dynamic_check_count,
        });
    }
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ScoreReport {
        key,
        seed: corpus.seed,
        tool,
        flags,
        cases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollisionMode {
    /// Both members of a pair drawn independently.
    #[default]
    Independent,
    /// Second member copies the first; every trial must match.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollisionResult {
    pub trials: u64,
    pub matches: u64,
}

impl CollisionResult {
    pub const ANALYTIC: f64 = 1.0 / (1u64 << 24) as f64;

    pub fn rate(&self) -> f64 {
        self.matches as f64 / self.trials as f64
    }

    pub fn sigma(&self) -> f64 {
        let p = Self::ANALYTIC;
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    pub fn z_score(&self) -> f64 {
        (self.rate() - Self::ANALYTIC) / self.sigma()
    }
}

fn draw_object(rng: &mut ChaCha8Rng) -> (u64, u32, u32) {
    let base = rng.gen_range(0x1000u64..1 << 39) & !0xF;
    (base, rng.gen(), rng.gen_range(1..=u32::MAX))
}

/// Raw seal collisions between pairs of random objects, no probing loop.
pub fn collision_trial(key: PacKey, trials: u64, seed: u64, mode: CollisionMode) -> CollisionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matches = 0;
    for _ in 0..trials {
        let (b1, m1, s1) = draw_object(&mut rng);
        let (b2, m2, s2) = match mode {
            CollisionMode::Independent => draw_object(&mut rng),
            CollisionMode::Identical => (b1, m1, s1),
        };
        if pac24(key, b1, modifier(m1, s1)) == pac24(key, b2, modifier(m2, s2)) {
            matches += 1;
        }
    }
    CollisionResult { trials, matches }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChurnResult {
    pub stale_derefs: u64,
    pub detected: u64,
    pub escapes: u64,
    pub allocations: u64,
}

impl ChurnResult {
    pub fn escape_rate(&self) -> f64 {
        self.escapes as f64 / self.stale_derefs as f64
    }
}

/// Heap churn with dangling dereferences.
///
/// Keeps about `live` objects alive. Each step frees a random object,
/// allocates a replacement (often landing on the freed slot), and then
/// dereferences `per_stale` times through a pointer to some recently freed
/// object. Runs until `stale_derefs` dereferences have been made.
pub fn uaf_churn(key: PacKey, seed: u64, stale_derefs: u64, live: usize, per_stale: u32) -> ChurnResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RunConfig {
        halt_on_first: false,
        ..RunConfig::default()
    };
    let mut m = Machine::new(key, cfg);
    let sizes = [16u64, 32, 48, 64, 128, 256];
    let mut pool = Vec::with_capacity(live);
    let mut site = 0u64;
    let mut alloc = |m: &mut Machine, rng: &mut ChaCha8Rng| {
        site += 1;
        let size = *sizes.choose(rng).unwrap();
        let (w, id) = m
            .alloc_object(ObjectKind::Heap, size, crate::machine::site_constant(site as u32 % 64), Vec::new())
            .expect("heap window");
        (w, id, size)
    };
    for _ in 0..live {
        pool.push(alloc(&mut m, &mut rng));
    }
    let mut stale: VecDeque<(crate::sealcodec::SealedWord, usize, u64)> = VecDeque::new();
    let mut res = ChurnResult {
        stale_derefs: 0,
        detected: 0,
        escapes: 0,
        allocations: live as u64,
    };
    while res.stale_derefs < stale_derefs {
        let victim = rng.gen_range(0..pool.len());
        let (w, id, size) = pool[victim];
        assert!(m.dealloc_heap(w, 0).expect("heap free").is_none());
        pool[victim] = alloc(&mut m, &mut rng);
        res.allocations += 1;
        stale.push_back((w, id, size));
        if stale.len() > 256 {
            stale.pop_front();
        }
        let (sw, sid, ssize) = stale[rng.gen_range(0..stale.len())];
        for _ in 0..per_stale {
            let off = rng.gen_range(0..ssize);
            let before = m.alloc_counter();
            let v = m.check_word(sw.offset(off as i64), Origin::Object(sid), 1, Access::Write, 1);
            debug_assert_eq!(before, m.alloc_counter());
            res.stale_derefs += 1;
            match v {
                Some(_) => res.detected += 1,
                None => res.escapes += 1,
            }
        }
    }
    res
}
