//! Miniature structured IR: allocations, pointer arithmetic, loads/stores,
//! frees, counted loops and two-armed conditionals.
//!
//! Registers are single-assignment. Every non-check statement carries a site
//! id assigned in pre-order; checks name the site of the access they guard.

mod instrument;
mod parse;
pub mod passes;
mod print;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use instrument::instrument;
pub use parse::parse;
pub use passes::{
    pass_loop_bounds, pass_loop_invariant, pass_redundant_elim, pass_write_only, static_verify_elim,
    OptFlags, RedundantOptions,
};

pub type Reg = String;
pub type StmtId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{}validation error: {msg}", loc.map(|(l, c)| format!("{l}:{c}: ")).unwrap_or_default())]
    Validation { loc: Option<(usize, usize)>, msg: String },
    #[error("program is already instrumented")]
    AlreadyInstrumented,
}

/// `scale * var + offset`, or a constant when `var` is `None`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Affine {
    pub var: Option<Reg>,
    pub scale: i64,
    pub offset: i64,
}

impl Affine {
    pub fn constant(c: i64) -> Self {
        Affine {
            var: None,
            scale: 0,
            offset: c,
        }
    }

    pub fn var(reg: impl Into<Reg>) -> Self {
        Affine::linear(reg, 1, 0)
    }

    pub fn linear(reg: impl Into<Reg>, scale: i64, offset: i64) -> Self {
        if scale == 0 {
            return Affine::constant(offset);
        }
        Affine {
            var: Some(reg.into()),
            scale,
            offset,
        }
    }

    pub fn as_const(&self) -> Option<i64> {
        self.var.is_none().then_some(self.offset)
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0)
    }

    /// Sum of two expressions, if it is still affine in at most one variable.
    pub fn add(&self, other: &Affine) -> Option<Affine> {
        let offset = self.offset.checked_add(other.offset)?;
        match (&self.var, &other.var) {
            (None, None) => Some(Affine::constant(offset)),
            (Some(v), None) => Some(Affine::linear(v.clone(), self.scale, offset)),
            (None, Some(v)) => Some(Affine::linear(v.clone(), other.scale, offset)),
            (Some(a), Some(b)) if a == b => {
                Some(Affine::linear(a.clone(), self.scale.checked_add(other.scale)?, offset))
            }
            _ => None,
        }
    }

    pub fn eval(&self, var_value: impl FnOnce(&str) -> Option<i64>) -> Option<i64> {
        match &self.var {
            None => Some(self.offset),
            Some(v) => Some(var_value(v)?.wrapping_mul(self.scale).wrapping_add(self.offset)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocKind {
    Heap,
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

impl CmpOp {
    pub fn apply(self, a: i64, b: i64) -> bool {
        match self {
            CmpOp::Lt => a < b,
            CmpOp::Le => a <= b,
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Ge => a >= b,
            CmpOp::Gt => a > b,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Ge => ">=",
            CmpOp::Gt => ">",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cond {
    pub lhs: Affine,
    pub op: CmpOp,
    pub rhs: Affine,
}

/// A runtime check of `width` bytes at `ptr + offset`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Check {
    pub ptr: Reg,
    pub offset: Affine,
    pub width: u32,
    pub access: Access,
    pub site: StmtId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stmt {
    Alloc {
        id: StmtId,
        dst: Reg,
        kind: AllocKind,
        size: Affine,
        /// Field extents `(offset, length)`, ground truth only.
        fields: Vec<(u32, u32)>,
    },
    Gep {
        id: StmtId,
        dst: Reg,
        ptr: Reg,
        index: Affine,
    },
    Load {
        id: StmtId,
        ptr: Reg,
        width: u32,
    },
    Store {
        id: StmtId,
        ptr: Reg,
        width: u32,
    },
    Free {
        id: StmtId,
        ptr: Reg,
    },
    Check(Check),
    Loop {
        id: StmtId,
        var: Reg,
        lo: i64,
        hi: i64,
        step: i64,
        body: Vec<Stmt>,
    },
    If {
        id: StmtId,
        cond: Cond,
        then_body: Vec<Stmt>,
        else_body: Vec<Stmt>,
    },
    CallExt {
        id: StmtId,
        ptr: Reg,
    },
    RecvExt {
        id: StmtId,
        dst: Reg,
        ptr: Reg,
    },
    Input {
        id: StmtId,
        dst: Reg,
    },
    AddrOf {
        id: StmtId,
        dst: Reg,
        global: String,
    },
    Null {
        id: StmtId,
        dst: Reg,
    },
}

impl Stmt {
    /// Site id; for checks, the guarded access.
    pub fn id(&self) -> StmtId {
        match self {
            Stmt::Check(c) => c.site,
            Stmt::Alloc { id, .. }
            | Stmt::Gep { id, .. }
            | Stmt::Load { id, .. }
            | Stmt::Store { id, .. }
            | Stmt::Free { id, .. }
            | Stmt::Loop { id, .. }
            | Stmt::If { id, .. }
            | Stmt::CallExt { id, .. }
            | Stmt::RecvExt { id, .. }
            | Stmt::Input { id, .. }
            | Stmt::AddrOf { id, .. }
            | Stmt::Null { id, .. } => *id,
        }
    }

    pub fn def(&self) -> Option<&Reg> {
        match self {
            Stmt::Alloc { dst, .. }
            | Stmt::Gep { dst, .. }
            | Stmt::RecvExt { dst, .. }
            | Stmt::Input { dst, .. }
            | Stmt::AddrOf { dst, .. }
            | Stmt::Null { dst, .. } => Some(dst),
            _ => None,
        }
    }

    fn uses(&self) -> Vec<&Reg> {
        fn affine(a: &Affine) -> Option<&Reg> {
            a.var.as_ref()
        }
        match self {
            Stmt::Alloc { size, .. } => affine(size).into_iter().collect(),
            Stmt::Gep { ptr, index, .. } => std::iter::once(ptr).chain(affine(index)).collect(),
            Stmt::Load { ptr, .. }
            | Stmt::Store { ptr, .. }
            | Stmt::Free { ptr, .. }
            | Stmt::CallExt { ptr, .. }
            | Stmt::RecvExt { ptr, .. } => vec![ptr],
            Stmt::Check(c) => std::iter::once(&c.ptr).chain(affine(&c.offset)).collect(),
            Stmt::If { cond, .. } => affine(&cond.lhs).into_iter().chain(affine(&cond.rhs)).collect(),
            Stmt::Loop { .. } | Stmt::Input { .. } | Stmt::AddrOf { .. } | Stmt::Null { .. } => vec![],
        }
    }

    /// Frees and external calls end what the passes may assume about liveness.
    pub fn is_kill(&self) -> bool {
        matches!(self, Stmt::Free { .. } | Stmt::CallExt { .. })
    }
}

/// Number of iterations of `for (v = lo; step > 0 ? v < hi : v > hi; v += step)`.
pub fn trip_count(lo: i64, hi: i64, step: i64) -> u64 {
    let (span, stride) = if step > 0 {
        (hi as i128 - lo as i128, step as i128)
    } else {
        (lo as i128 - hi as i128, -(step as i128))
    };
    if span <= 0 || stride == 0 {
        0
    } else {
        ((span + stride - 1) / stride) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Global {
    pub name: String,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub body: Vec<Stmt>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Program {
    pub inputs: Vec<i64>,
    pub globals: Vec<Global>,
    pub functions: Vec<Function>,
}

pub fn walk<'a>(block: &'a [Stmt], f: &mut impl FnMut(&'a Stmt)) {
    for s in block {
        f(s);
        match s {
            Stmt::Loop { body, .. } => walk(body, f),
            Stmt::If {
                then_body,
                else_body,
                ..
            } => {
                walk(then_body, f);
                walk(else_body, f);
            }
            _ => {}
        }
    }
}

pub fn block_has_kill(block: &[Stmt]) -> bool {
    let mut kill = false;
    walk(block, &mut |s| kill |= s.is_kill());
    kill
}

impl Program {
    pub fn stmts(&self) -> Vec<&Stmt> {
        let mut out = Vec::new();
        for f in &self.functions {
            walk(&f.body, &mut |s| out.push(s));
        }
        out
    }

    pub fn check_count(&self) -> usize {
        self.stmts().iter().filter(|s| matches!(s, Stmt::Check(_))).count()
    }

    pub fn checks(&self) -> Vec<&Check> {
        self.stmts()
            .into_iter()
            .filter_map(|s| match s {
                Stmt::Check(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    pub fn global_size(&self, name: &str) -> Option<u32> {
        self.globals.iter().find(|g| g.name == name).map(|g| g.size)
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn validate(&self) -> Result<(), IrError> {
        validate(self, &HashMap::new())
    }
}

/// Source positions for statements, keyed by site id (checks excluded).
pub(crate) type Positions = HashMap<StmtId, (usize, usize)>;

pub(crate) fn validate(p: &Program, pos: &Positions) -> Result<(), IrError> {
    let err = |id: Option<StmtId>, msg: String| IrError::Validation {
        loc: id.and_then(|i| pos.get(&i).copied()),
        msg,
    };
    let mut names = HashSet::new();
    for g in &p.globals {
        if !names.insert(g.name.as_str()) {
            return Err(err(None, format!("duplicate global @{}", g.name)));
        }
        if g.size == 0 {
            return Err(err(None, format!("global @{} has zero size", g.name)));
        }
    }
    let mut sites = HashSet::new();
    for s in p.stmts() {
        if !matches!(s, Stmt::Check(_)) && !sites.insert(s.id()) {
            return Err(err(Some(s.id()), format!("duplicate site id {}", s.id())));
        }
    }
    let mut defined: HashSet<Reg> = HashSet::new();
    let mut visible: Vec<Reg> = Vec::new();
    for f in &p.functions {
        // Top-level registers of earlier functions stay visible.
        check_block(p, &f.body, &mut defined, &mut visible, &sites, &err)?;
    }
    Ok(())
}

fn check_block(
    p: &Program,
    block: &[Stmt],
    defined: &mut HashSet<Reg>,
    visible: &mut Vec<Reg>,
    sites: &HashSet<StmtId>,
    err: &impl Fn(Option<StmtId>, String) -> IrError,
) -> Result<(), IrError> {
    for s in block {
        let site = (!matches!(s, Stmt::Check(_))).then(|| s.id());
        for u in s.uses() {
            if !visible.contains(u) {
                return Err(err(site, format!("use of undefined register %{u}")));
            }
        }
        match s {
            Stmt::Load { width, .. } | Stmt::Store { width, .. } if *width == 0 => {
                return Err(err(site, "zero-width access".into()));
            }
            Stmt::Check(c) => {
                if c.width == 0 {
                    return Err(err(None, "zero-width check".into()));
                }
                if !sites.contains(&c.site) {
                    return Err(err(None, format!("check names unknown site @{}", c.site)));
                }
            }
            Stmt::AddrOf { global, .. } if p.global_size(global).is_none() => {
                return Err(err(site, format!("unknown global @{global}")));
            }
            Stmt::Alloc { size, fields, .. } => {
                if let Some(n) = size.as_const() {
                    if n <= 0 {
                        return Err(err(site, "allocation size must be positive".into()));
                    }
                    if fields.iter().any(|&(o, l)| l == 0 || o as i64 + l as i64 > n) {
                        return Err(err(site, "field extent outside the object".into()));
                    }
                }
            }
            _ => {}
        }
        if let Some(d) = s.def() {
            if !defined.insert(d.clone()) {
                return Err(err(site, format!("register %{d} assigned twice")));
            }
            visible.push(d.clone());
        }
        match s {
            Stmt::Loop { var, step, body, .. } => {
                if *step == 0 {
                    return Err(err(site, "loop step must be nonzero".into()));
                }
                if !defined.insert(var.clone()) {
                    return Err(err(site, format!("register %{var} assigned twice")));
                }
                visible.push(var.clone());
                let inner = visible.len() - 1;
                check_block(p, body, defined, visible, sites, err)?;
                visible.truncate(inner);
            }
            Stmt::If {
                then_body,
                else_body,
                ..
            } => {
                // Arm-local definitions go out of scope at the end of the arm.
                let mark = visible.len();
                check_block(p, then_body, defined, visible, sites, err)?;
                visible.truncate(mark);
                check_block(p, else_body, defined, visible, sites, err)?;
                visible.truncate(mark);
            }
            _ => {}
        }
    }
    Ok(())
}
