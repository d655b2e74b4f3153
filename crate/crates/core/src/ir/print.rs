use std::fmt::{self, Display, Formatter, Write};

use super::{Access, Affine, AllocKind, Check, Cond, Program, Stmt};

impl Display for Affine {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let Some(v) = &self.var else {
            return write!(f, "{}", self.offset);
        };
        write!(f, "%{v}")?;
        if self.scale != 1 {
            write!(f, "*{}", self.scale)?;
        }
        match self.offset {
            0 => Ok(()),
            o if o > 0 => write!(f, "+{o}"),
            o => write!(f, "-{}", o.unsigned_abs()),
        }
    }
}

impl Display for Cond {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op.symbol(), self.rhs)
    }
}

impl Display for Check {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        write!(f, "check %{}", self.ptr)?;
        if !self.offset.is_zero() {
            write!(f, "[{}]", self.offset)?;
        }
        let rw = match self.access {
            Access::Read => "r",
            Access::Write => "w",
        };
        write!(f, ", {}, {rw} @{}", self.width, self.site)
    }
}

fn write_block(out: &mut String, block: &[Stmt], depth: usize) -> fmt::Result {
    for s in block {
        let pad = "  ".repeat(depth);
        match s {
            Stmt::Alloc {
                dst,
                kind,
                size,
                fields,
                ..
            } => {
                let kind = match kind {
                    AllocKind::Heap => "heap",
                    AllocKind::Stack => "stack",
                };
                write!(out, "{pad}%{dst} = alloc {kind} {size}")?;
                if !fields.is_empty() {
                    out.push_str(" fields");
                    for (o, l) in fields {
                        write!(out, " {o}:{l}")?;
                    }
                }
                out.push('\n');
            }
            Stmt::Gep { dst, ptr, index, .. } => writeln!(out, "{pad}%{dst} = gep %{ptr}, {index}")?,
            Stmt::Load { ptr, width, .. } => writeln!(out, "{pad}load %{ptr}, {width}")?,
            Stmt::Store { ptr, width, .. } => writeln!(out, "{pad}store %{ptr}, {width}")?,
            Stmt::Free { ptr, .. } => writeln!(out, "{pad}free %{ptr}")?,
            Stmt::Check(c) => writeln!(out, "{pad}{c}")?,
            Stmt::Loop {
                var,
                lo,
                hi,
                step,
                body,
                ..
            } => {
                writeln!(out, "{pad}loop %{var} = {lo}, {hi}, {step} {{")?;
                write_block(out, body, depth + 1)?;
                writeln!(out, "{pad}}}")?;
            }
            Stmt::If {
                cond,
                then_body,
                else_body,
                ..
            } => {
                writeln!(out, "{pad}if {cond} {{")?;
                write_block(out, then_body, depth + 1)?;
                if else_body.is_empty() {
                    writeln!(out, "{pad}}}")?;
                } else {
                    writeln!(out, "{pad}}} else {{")?;
                    write_block(out, else_body, depth + 1)?;
                    writeln!(out, "{pad}}}")?;
                }
            }
            Stmt::CallExt { ptr, .. } => writeln!(out, "{pad}call_ext %{ptr}")?,
            Stmt::RecvExt { dst, ptr, .. } => writeln!(out, "{pad}%{dst} = recv_ext %{ptr}")?,
            Stmt::Input { dst, .. } => writeln!(out, "{pad}%{dst} = input")?,
            Stmt::AddrOf { dst, global, .. } => writeln!(out, "{pad}%{dst} = addr_of @{global}")?,
            Stmt::Null { dst, .. } => writeln!(out, "{pad}%{dst} = null")?,
        }
    }
    Ok(())
}

impl Display for Program {
    fn fmt(&self, f: &mut Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        if !self.inputs.is_empty() {
            let list: Vec<String> = self.inputs.iter().map(i64::to_string).collect();
            writeln!(out, "inputs {}", list.join(", "))?;
        }
        for g in &self.globals {
            writeln!(out, "global @{} {}", g.name, g.size)?;
        }
        for func in &self.functions {
            writeln!(out, "func {} {{", func.name)?;
            write_block(&mut out, &func.body, 1)?;
            writeln!(out, "}}")?;
        }
        f.write_str(&out)
    }
}
