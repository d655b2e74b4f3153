use super::{Access, Affine, Check, IrError, Program, Stmt};

/// Inserts a read check before every load and a write check before every store.
pub fn instrument(p: &Program) -> Result<Program, IrError> {
    if p.check_count() > 0 {
        return Err(IrError::AlreadyInstrumented);
    }
    let mut out = p.clone();
    for f in &mut out.functions {
        f.body = instrument_block(std::mem::take(&mut f.body));
    }
    Ok(out)
}

fn instrument_block(block: Vec<Stmt>) -> Vec<Stmt> {
    let mut out = Vec::with_capacity(block.len());
    for s in block {
        match s {
            Stmt::Load { id, ref ptr, width } | Stmt::Store { id, ref ptr, width } => {
                let access = if matches!(s, Stmt::Load { .. }) {
                    Access::Read
                } else {
                    Access::Write
                };
                out.push(Stmt::Check(Check {
                    ptr: ptr.clone(),
                    offset: Affine::constant(0),
                    width,
                    access,
                    site: id,
                }));
                out.push(s);
            }
            Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body,
            } => out.push(Stmt::Loop {
                id,
                var,
                lo,
                hi,
                step,
                body: instrument_block(body),
            }),
            Stmt::If {
                id,
                cond,
                then_body,
                else_body,
            } => out.push(Stmt::If {
                id,
                cond,
                then_body: instrument_block(then_body),
                else_body: instrument_block(else_body),
            }),
            other => out.push(other),
        }
    }
    out
}
