//! Check-reducing passes over instrumented programs.
//!
//! A check's address range is compared in resolved form: the `gep` chain
//! behind its pointer is folded into (root register, affine offset) as long
//! as the offsets stay affine in one variable. Two ranges are the same only
//! when root, offset expression and width are syntactically equal.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{block_has_kill, trip_count, walk, Access, Affine, Check, Program, Reg, Stmt};

type GepDefs = HashMap<Reg, (Reg, Affine)>;

fn gep_defs(p: &Program) -> GepDefs {
    let mut defs = GepDefs::new();
    for s in p.stmts() {
        if let Stmt::Gep { dst, ptr, index, .. } = s {
            defs.insert(dst.clone(), (ptr.clone(), index.clone()));
        }
    }
    defs
}

fn resolve(defs: &GepDefs, ptr: &Reg, offset: &Affine) -> (Reg, Affine) {
    let mut root = ptr.clone();
    let mut off = offset.clone();
    while let Some((base, index)) = defs.get(&root) {
        match index.add(&off) {
            Some(sum) => {
                root = base.clone();
                off = sum;
            }
            None => break,
        }
    }
    (root, off)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Range {
    root: Reg,
    offset: Affine,
    width: u32,
    access: Access,
}

impl Range {
    fn of(defs: &GepDefs, c: &Check) -> Range {
        let (root, offset) = resolve(defs, &c.ptr, &c.offset);
        Range {
            root,
            offset,
            width: c.width,
            access: c.access,
        }
    }

    /// A write check also covers a read of the same range.
    fn covers(&self, other: &Range) -> bool {
        self.root == other.root
            && self.offset == other.offset
            && self.width == other.width
            && (self.access == Access::Write || self.access == other.access)
    }
}

fn map_functions(p: &Program, mut f: impl FnMut(Vec<Stmt>) -> Vec<Stmt>) -> Program {
    let mut out = p.clone();
    for func in &mut out.functions {
        func.body = f(std::mem::take(&mut func.body));
    }
    out
}

fn defined_in(block: &[Stmt]) -> HashSet<Reg> {
    let mut regs = HashSet::new();
    walk(block, &mut |s| {
        if let Some(d) = s.def() {
            regs.insert(d.clone());
        }
        if let Stmt::Loop { var, .. } = s {
            regs.insert(var.clone());
        }
    });
    regs
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Hoist {
    Invariant,
    Bounds,
}

fn hoist_block(block: Vec<Stmt>, defs: &GepDefs, mode: Hoist) -> Vec<Stmt> {
    let mut out = Vec::with_capacity(block.len());
    for s in block {
        match s {
            Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body,
            } => {
                let body = hoist_block(body, defs, mode);
                let trips = trip_count(lo, hi, step);
                if trips == 0 || block_has_kill(&body) {
                    out.push(Stmt::Loop {
                        id,
                        var,
                        lo,
                        hi,
                        step,
                        body,
                    });
                    continue;
                }
                let mut inner = defined_in(&body);
                inner.insert(var.clone());
                let last = (trips as i64 - 1).checked_mul(step).and_then(|d| d.checked_add(lo));
                let mut kept = Vec::with_capacity(body.len());
                for st in body {
                    if let Stmt::Check(c) = &st {
                        let (root, off) = resolve(defs, &c.ptr, &c.offset);
                        let root_outside = !inner.contains(&root);
                        let hoisted = |offset: Affine| {
                            Stmt::Check(Check {
                                ptr: root.clone(),
                                offset,
                                ..c.clone()
                            })
                        };
                        match &off.var {
                            _ if !root_outside => {}
                            Some(v) if v == &var => {
                                if mode == Hoist::Bounds {
                                    let at = |i: i64| off.scale.checked_mul(i)?.checked_add(off.offset);
                                    if let (Some(a), Some(b)) = (at(lo), last.and_then(at)) {
                                        let (min, max) = (a.min(b), a.max(b));
                                        out.push(hoisted(Affine::constant(min)));
                                        if max != min {
                                            out.push(hoisted(Affine::constant(max)));
                                        }
                                        continue;
                                    }
                                }
                            }
                            Some(v) if inner.contains(v) => {}
                            _ => {
                                out.push(hoisted(off.clone()));
                                continue;
                            }
                        }
                    }
                    kept.push(st);
                }
                out.push(Stmt::Loop {
                    id,
                    var,
                    lo,
                    hi,
                    step,
                    body: kept,
                });
            }
            Stmt::If {
                id,
                cond,
                then_body,
                else_body,
            } => out.push(Stmt::If {
                id,
                cond,
                then_body: hoist_block(then_body, defs, mode),
                else_body: hoist_block(else_body, defs, mode),
            }),
            other => out.push(other),
        }
    }
    out
}

/// Moves checks whose range does not change across iterations in front of
/// the loop, innermost loop first. Loops that free memory or call out are
/// left alone, as are loops that never run.
pub fn pass_loop_invariant(p: &Program) -> Program {
    let defs = gep_defs(p);
    map_functions(p, |b| hoist_block(b, &defs, Hoist::Invariant))
}

/// Replaces a check on `root + (i*a + b)` inside a loop over `i` by checks of
/// the lowest and highest address ranges, placed before the loop. Invariant
/// checks (stride 0) are hoisted as a single check.
pub fn pass_loop_bounds(p: &Program) -> Program {
    let defs = gep_defs(p);
    map_functions(p, |b| hoist_block(b, &defs, Hoist::Bounds))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedundantOptions {
    /// Also drop a check when a later identical check post-dominates it.
    /// The surviving check then runs after the access it guards.
    pub post_dominance: bool,
}

fn dominated_block(block: Vec<Stmt>, defs: &GepDefs, avail: &mut Vec<Range>) -> Vec<Stmt> {
    let mut out = Vec::with_capacity(block.len());
    for s in block {
        match s {
            Stmt::Check(c) => {
                let r = Range::of(defs, &c);
                if avail.iter().any(|f| f.covers(&r)) {
                    continue;
                }
                avail.push(r);
                out.push(Stmt::Check(c));
            }
            Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body,
            } => {
                let kill = block_has_kill(&body);
                let mut inner = if kill { Vec::new() } else { avail.clone() };
                let body = dominated_block(body, defs, &mut inner);
                if kill {
                    avail.clear();
                }
                out.push(Stmt::Loop {
                    id,
                    var,
                    lo,
                    hi,
                    step,
                    body,
                });
            }
            Stmt::If {
                id,
                cond,
                then_body,
                else_body,
            } => {
                let mut t = avail.clone();
                let then_body = dominated_block(then_body, defs, &mut t);
                let mut e = avail.clone();
                let else_body = dominated_block(else_body, defs, &mut e);
                avail.retain(|f| t.contains(f) && e.contains(f));
                out.push(Stmt::If {
                    id,
                    cond,
                    then_body,
                    else_body,
                });
            }
            other => {
                if other.is_kill() {
                    avail.clear();
                }
                out.push(other);
            }
        }
    }
    out
}

fn postdominated_block(block: Vec<Stmt>, defs: &GepDefs) -> Vec<Stmt> {
    let block: Vec<Stmt> = block
        .into_iter()
        .map(|s| match s {
            Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body,
            } => Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body: postdominated_block(body, defs),
            },
            Stmt::If {
                id,
                cond,
                then_body,
                else_body,
            } => Stmt::If {
                id,
                cond,
                then_body: postdominated_block(then_body, defs),
                else_body: postdominated_block(else_body, defs),
            },
            other => other,
        })
        .collect();
    let mut later: Vec<Range> = Vec::new();
    let mut keep = vec![true; block.len()];
    for (i, s) in block.iter().enumerate().rev() {
        match s {
            Stmt::Check(c) => {
                let r = Range::of(defs, c);
                if later.iter().any(|f| f.covers(&r)) {
                    keep[i] = false;
                } else {
                    later.push(r);
                }
            }
            Stmt::Loop { body, .. } if block_has_kill(body) => later.clear(),
            Stmt::If {
                then_body,
                else_body,
                ..
            } if block_has_kill(then_body) || block_has_kill(else_body) => later.clear(),
            s if s.is_kill() => later.clear(),
            _ => {}
        }
    }
    block
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

/// Removes a check when an identical range check dominates it with no free
/// or external call in between.
pub fn pass_redundant_elim(p: &Program, opts: RedundantOptions) -> Program {
    let defs = gep_defs(p);
    let mut out = map_functions(p, |b| dominated_block(b, &defs, &mut Vec::new()));
    if opts.post_dominance {
        out = map_functions(&out, |b| postdominated_block(b, &defs));
    }
    out
}

fn drop_reads(block: Vec<Stmt>) -> Vec<Stmt> {
    block
        .into_iter()
        .filter_map(|s| match s {
            Stmt::Check(c) if c.access == Access::Read => None,
            Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body,
            } => Some(Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body: drop_reads(body),
            }),
            Stmt::If {
                id,
                cond,
                then_body,
                else_body,
            } => Some(Stmt::If {
                id,
                cond,
                then_body: drop_reads(then_body),
                else_body: drop_reads(else_body),
            }),
            other => Some(other),
        })
        .collect()
}

/// Deletes every read check.
pub fn pass_write_only(p: &Program) -> Program {
    map_functions(p, drop_reads)
}

#[derive(Clone, Copy)]
struct Known {
    size: i64,
    tainted: bool,
    global: bool,
}

fn taint_all(known: &mut HashMap<Reg, Known>) {
    for k in known.values_mut() {
        if !k.global {
            k.tainted = true;
        }
    }
}

fn static_block(block: Vec<Stmt>, defs: &GepDefs, p: &Program, known: &mut HashMap<Reg, Known>) -> Vec<Stmt> {
    let mut out = Vec::with_capacity(block.len());
    for s in block {
        match s {
            Stmt::Check(c) => {
                let (root, off) = resolve(defs, &c.ptr, &c.offset);
                let provable = match (known.get(&root), off.as_const()) {
                    (Some(k), Some(o)) if !k.tainted => o >= 0 && o + c.width as i64 <= k.size,
                    _ => false,
                };
                if !provable {
                    out.push(Stmt::Check(c));
                }
            }
            Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body,
            } => {
                let kill = block_has_kill(&body);
                if kill {
                    taint_all(known);
                }
                let mut inner = known.clone();
                let body = static_block(body, defs, p, &mut inner);
                out.push(Stmt::Loop {
                    id,
                    var,
                    lo,
                    hi,
                    step,
                    body,
                });
            }
            Stmt::If {
                id,
                cond,
                then_body,
                else_body,
            } => {
                let kill = block_has_kill(&then_body) || block_has_kill(&else_body);
                let then_body = static_block(then_body, defs, p, &mut known.clone());
                let else_body = static_block(else_body, defs, p, &mut known.clone());
                if kill {
                    taint_all(known);
                }
                out.push(Stmt::If {
                    id,
                    cond,
                    then_body,
                    else_body,
                });
            }
            other => {
                match &other {
                    Stmt::Alloc { dst, size, .. } => {
                        if let Some(n) = size.as_const() {
                            known.insert(
                                dst.clone(),
                                Known {
                                    size: n,
                                    tainted: false,
                                    global: false,
                                },
                            );
                        }
                    }
                    Stmt::AddrOf { dst, global, .. } => {
                        if let Some(n) = p.global_size(global) {
                            known.insert(
                                dst.clone(),
                                Known {
                                    size: n as i64,
                                    tainted: false,
                                    global: true,
                                },
                            );
                        }
                    }
                    s if s.is_kill() => taint_all(known),
                    _ => {}
                }
                out.push(other);
            }
        }
    }
    out
}

/// Removes checks that are provably in bounds: the root is an allocation in
/// the same function with a literal size (or a global), the offset is a
/// literal, and no free or external call can have run since the allocation.
pub fn static_verify_elim(p: &Program) -> Program {
    let defs = gep_defs(p);
    map_functions(p, |b| static_block(b, &defs, p, &mut HashMap::new()))
}

/// Selection of passes, applied in a fixed order by [`OptFlags::apply`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptFlags {
    pub write_only: bool,
    pub static_verify: bool,
    pub loop_invariant: bool,
    pub loop_bounds: bool,
    pub redundant: bool,
    pub redundant_postdom: bool,
}

impl OptFlags {
    pub const NAMES: &'static [&'static str] = &["loop-inv", "loop-bounds", "redundant", "redundant-postdom", "static"];

    /// Parses a comma-separated list such as `loop-inv,redundant`.
    pub fn parse_list(list: &str) -> Result<Self, String> {
        let mut f = OptFlags::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "loop-inv" => f.loop_invariant = true,
                "loop-bounds" => f.loop_bounds = true,
                "redundant" => f.redundant = true,
                "redundant-postdom" => {
                    f.redundant = true;
                    f.redundant_postdom = true;
                }
                "static" => f.static_verify = true,
                other => return Err(format!("unknown optimization {other:?} (expected one of {})", Self::NAMES.join(", "))),
            }
        }
        Ok(f)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.loop_invariant {
            v.push("loop-inv");
        }
        if self.loop_bounds {
            v.push("loop-bounds");
        }
        if self.redundant_postdom {
            v.push("redundant-postdom");
        } else if self.redundant {
            v.push("redundant");
        }
        if self.static_verify {
            v.push("static");
        }
        if self.write_only {
            v.push("write-only");
        }
        v
    }

    pub fn apply(&self, p: &Program) -> Program {
        let mut p = p.clone();
        if self.write_only {
            p = pass_write_only(&p);
        }
        if self.static_verify {
            p = static_verify_elim(&p);
        }
        if self.loop_invariant {
            p = pass_loop_invariant(&p);
        }
        if self.loop_bounds {
            p = pass_loop_bounds(&p);
        }
        if self.redundant {
            p = pass_redundant_elim(
                &p,
                RedundantOptions {
                    post_dominance: self.redundant_postdom,
                },
            );
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{instrument, parse};

    fn inst(text: &str) -> Program {
        instrument(&parse(text).unwrap()).unwrap()
    }

    fn check_lines(p: &Program) -> Vec<String> {
        p.checks().iter().map(|c| c.to_string()).collect()
    }

    #[test]
    fn invariant_check_hoisted() {
        let p = inst("func main { %q = alloc heap 8 loop %i = 0, 10, 1 { store %q, 4 } }");
        let q = pass_loop_invariant(&p);
        match &q.functions[0].body[1] {
            Stmt::Check(c) => assert_eq!(c.ptr, "q"),
            other => panic!("expected hoisted check, got {other:?}"),
        }
        assert_eq!(q.check_count(), 1);
    }

    #[test]
    fn variant_check_stays() {
        let p = inst("func main { %q = alloc heap 8 loop %i = 0, 8, 1 { %p = gep %q, %i store %p, 1 } }");
        assert_eq!(pass_loop_invariant(&p), p);
    }

    #[test]
    fn nested_hoists_one_level() {
        let p = inst(
            "func main { %q = alloc heap 64
               loop %j = 0, 4, 1 { loop %i = 0, 5, 1 { %p = gep %q, %j*4 store %p, 4 } } }",
        );
        let q = pass_loop_invariant(&p);
        let Stmt::Loop { body: outer, .. } = &q.functions[0].body[1] else { panic!() };
        assert!(matches!(&outer[0], Stmt::Check(c) if c.ptr == "q" && c.offset == Affine::linear("j", 4, 0)));
        let Stmt::Loop { body: inner, .. } = &outer[1] else { panic!() };
        assert!(inner.iter().all(|s| !matches!(s, Stmt::Check(_))));
    }

    #[test]
    fn bounds_checks_at_extremes() {
        let p = inst("func main { %b = alloc heap 100 loop %i = 0, 100, 1 { %p = gep %b, %i store %p, 1 } }");
        let q = pass_loop_bounds(&p);
        assert_eq!(check_lines(&q), vec!["check %b, 1, w @4", "check %b[99], 1, w @4"]);
        // Descending loop with scaled index.
        let p = inst("func main { %b = alloc heap 100 loop %i = 9, -1, -1 { %p = gep %b, %i*8+4 load %p, 4 } }");
        assert_eq!(
            check_lines(&pass_loop_bounds(&p)),
            vec!["check %b[4], 4, r @4", "check %b[76], 4, r @4"]
        );
    }

    #[test]
    fn loops_with_frees_are_untouched() {
        let p = inst(
            "func main { %q = alloc heap 8 %r = alloc heap 8
               loop %i = 0, 2, 1 { store %q, 4 free %r } }",
        );
        assert_eq!(pass_loop_invariant(&p), p);
        assert_eq!(pass_loop_bounds(&p), p);
        let empty = inst("func main { %q = alloc heap 8 loop %i = 0, 0, 1 { store %q, 4 } }");
        assert_eq!(pass_loop_invariant(&empty), empty);
    }

    #[test]
    fn straight_line_duplicate_removed() {
        let p = inst("func main { %q = alloc heap 8 store %q, 4 store %q, 4 }");
        assert_eq!(pass_redundant_elim(&p, RedundantOptions::default()).check_count(), 1);
    }

    #[test]
    fn if_arms_do_not_dominate_each_other() {
        let p = inst("func main { %q = alloc heap 8 %x = input if %x < 1 { store %q, 4 } else { store %q, 4 } store %q, 4 }");
        assert_eq!(pass_redundant_elim(&p, RedundantOptions::default()), p);
    }

    #[test]
    fn dominating_check_before_if() {
        let p = inst("func main { %q = alloc heap 8 %x = input store %q, 4 if %x < 1 { store %q, 4 } }");
        let q = pass_redundant_elim(&p, RedundantOptions::default());
        assert_eq!(q.check_count(), 1);
    }

    #[test]
    fn free_blocks_elimination() {
        let p = inst("func main { %q = alloc heap 8 %r = alloc heap 8 store %q, 4 free %r store %q, 4 }");
        assert_eq!(pass_redundant_elim(&p, RedundantOptions::default()), p);
    }

    #[test]
    fn read_does_not_cover_write() {
        let p = inst("func main { %q = alloc heap 8 load %q, 4 store %q, 4 load %q, 4 }");
        let q = pass_redundant_elim(&p, RedundantOptions::default());
        assert_eq!(check_lines(&q), vec!["check %q, 4, r @2", "check %q, 4, w @3"]);
    }

    #[test]
    fn postdominance_is_opt_in() {
        let p = inst("func main { %q = alloc heap 8 %x = input load %q, 4 if %x < 1 { } store %q, 4 }");
        assert_eq!(pass_redundant_elim(&p, RedundantOptions::default()), p);
        let q = pass_redundant_elim(&p, RedundantOptions { post_dominance: true });
        assert_eq!(check_lines(&q), vec!["check %q, 4, w @5"]);
    }

    #[test]
    fn write_only_drops_reads() {
        let p = inst("func main { %q = alloc heap 8 load %q, 1 load %q, 2 store %q, 1 loop %i = 0, 2, 1 { load %q, 3 store %q, 2 } load %q, 4 load %q, 5 }");
        let q = pass_write_only(&p);
        assert_eq!(q.check_count(), 2);
        assert!(q.checks().iter().all(|c| c.access == Access::Write));
    }

    #[test]
    fn static_elimination() {
        let p = inst("func main { %p = alloc heap 100 %q = gep %p, 4 store %q, 4 }");
        assert_eq!(static_verify_elim(&p).check_count(), 0);
        let edge = inst("func main { %p = alloc heap 100 %q = gep %p, 97 store %q, 4 }");
        assert_eq!(static_verify_elim(&edge), edge);
        let input = inst("func main { %p = alloc heap 100 %x = input %q = gep %p, %x store %q, 4 }");
        assert_eq!(static_verify_elim(&input), input);
        let freed = inst("func main { %p = alloc heap 100 %r = alloc heap 8 free %r store %p, 4 }");
        assert_eq!(static_verify_elim(&freed), freed);
        let global = inst("global @g 16 func main { %g = addr_of @g %r = alloc heap 8 free %r store %g, 8 }");
        assert_eq!(static_verify_elim(&global).check_count(), 0);
        let other_fn = inst("func f { %p = alloc heap 100 } func g { store %p, 4 }");
        assert_eq!(static_verify_elim(&other_fn), other_fn);
    }

    #[test]
    fn flag_parsing() {
        let f = OptFlags::parse_list("loop-inv, static").unwrap();
        assert!(f.loop_invariant && f.static_verify && !f.redundant);
        assert!(OptFlags::parse_list("fast").is_err());
        assert_eq!(f.names(), vec!["loop-inv", "static"]);
    }
}
