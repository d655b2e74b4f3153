//! Text format reader. Whitespace-insensitive; `;` starts a line comment.

use super::{
    validate, Access, Affine, AllocKind, Check, CmpOp, Cond, Function, Global, IrError, Positions, Program,
    Stmt, StmtId,
};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Reg(String),
    At(String),
    Int(i64),
    Punct(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

const PUNCT: &[&str] = &["<=", ">=", "==", "!=", "=", ",", "{", "}", "[", "]", "*", "+", "-", ":", "<", ">"];

fn is_ident(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(text: &str) -> Result<Vec<Token>, IrError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split(';').next().unwrap_or("");
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            let at = |tok| Token { tok, line: ln + 1, col };
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '%' || c == '@' {
                let start = i + 1;
                let mut j = start;
                while j < chars.len() && is_ident(chars[j]) {
                    j += 1;
                }
                if j == start {
                    return Err(IrError::Syntax {
                        line: ln + 1,
                        col,
                        msg: format!("expected a name after '{c}'"),
                    });
                }
                let name: String = chars[start..j].iter().collect();
                out.push(at(if c == '%' { Tok::Reg(name) } else { Tok::At(name) }));
                i = j;
                continue;
            }
            if c.is_ascii_digit() {
                let mut j = i;
                while j < chars.len() && is_ident(chars[j]) {
                    j += 1;
                }
                let lit: String = chars[i..j].iter().collect();
                let parsed = match lit.strip_prefix("0x").or_else(|| lit.strip_prefix("0X")) {
                    Some(hex) => i64::from_str_radix(&hex.replace('_', ""), 16),
                    None => lit.replace('_', "").parse::<i64>(),
                };
                let v = parsed.map_err(|_| IrError::Syntax {
                    line: ln + 1,
                    col,
                    msg: format!("bad integer literal {lit:?}"),
                })?;
                out.push(at(Tok::Int(v)));
                i = j;
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let mut j = i;
                while j < chars.len() && is_ident(chars[j]) {
                    j += 1;
                }
                out.push(at(Tok::Word(chars[i..j].iter().collect())));
                i = j;
                continue;
            }
            let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
            match PUNCT.iter().find(|p| rest.starts_with(**p)) {
                Some(p) => {
                    out.push(at(Tok::Punct(p)));
                    i += p.len();
                }
                None => {
                    return Err(IrError::Syntax {
                        line: ln + 1,
                        col,
                        msg: format!("unexpected character {c:?}"),
                    })
                }
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    next_id: StmtId,
    positions: Positions,
    eof: (usize, usize),
}

type PResult<T> = Result<T, IrError>;

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks.get(self.pos).map(|t| (t.line, t.col)).unwrap_or(self.eof)
    }

    fn fail<T>(&self, msg: impl Into<String>) -> PResult<T> {
        let (line, col) = self.here();
        Err(IrError::Syntax {
            line,
            col,
            msg: msg.into(),
        })
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.tok.clone());
        self.pos += 1;
        t
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Punct(q)) if *q == p) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn punct(&mut self, p: &str) -> PResult<()> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            self.fail(format!("expected '{p}'"))
        }
    }

    fn eat_word(&mut self, w: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Word(x)) if x == w) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn word(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.fail("expected a keyword"),
        }
    }

    fn reg(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Tok::Reg(r)) => {
                let r = r.clone();
                self.pos += 1;
                Ok(r)
            }
            _ => self.fail("expected a register"),
        }
    }

    fn int(&mut self) -> PResult<i64> {
        let neg = self.eat_punct("-");
        match self.peek() {
            Some(Tok::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(if neg { -v } else { v })
            }
            _ => self.fail("expected an integer"),
        }
    }

    fn uint<T: TryFrom<i64>>(&mut self, what: &str) -> PResult<T> {
        let v = self.int()?;
        T::try_from(v).or_else(|_| self.fail(format!("{what} out of range: {v}")))
    }

    fn affine(&mut self) -> PResult<Affine> {
        match self.peek() {
            Some(Tok::Reg(_)) => {
                let v = self.reg()?;
                let scale = if self.eat_punct("*") { self.int()? } else { 1 };
                let offset = if self.eat_punct("+") {
                    self.int()?
                } else if self.eat_punct("-") {
                    -self.int()?
                } else {
                    0
                };
                Ok(Affine::linear(v, scale, offset))
            }
            _ => Ok(Affine::constant(self.int()?)),
        }
    }

    fn fresh_id(&mut self, at: (usize, usize)) -> StmtId {
        self.next_id += 1;
        self.positions.insert(self.next_id, at);
        self.next_id
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        self.punct("{")?;
        let mut out = Vec::new();
        while !self.eat_punct("}") {
            if self.peek().is_none() {
                return self.fail("unterminated block");
            }
            out.push(self.stmt()?);
        }
        Ok(out)
    }

    fn literal_bound(&mut self, what: &str) -> PResult<i64> {
        let at = self.here();
        let a = self.affine()?;
        a.as_const().ok_or_else(|| IrError::Validation {
            loc: Some(at),
            msg: format!("loop {what} must be an integer literal"),
        })
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        let at = self.here();
        match self.peek().cloned() {
            Some(Tok::Reg(dst)) => {
                self.pos += 1;
                self.punct("=")?;
                let op = self.word()?;
                let id = self.fresh_id(at);
                match op.as_str() {
                    "alloc" => {
                        let kind = match self.word()?.as_str() {
                            "heap" => AllocKind::Heap,
                            "stack" => AllocKind::Stack,
                            other => return self.fail(format!("unknown allocation kind {other:?}")),
                        };
                        let size = self.affine()?;
                        let mut fields = Vec::new();
                        if self.eat_word("fields") {
                            while matches!(self.peek(), Some(Tok::Int(_))) {
                                let o = self.uint("field offset")?;
                                self.punct(":")?;
                                let l = self.uint("field length")?;
                                fields.push((o, l));
                            }
                        }
                        Ok(Stmt::Alloc {
                            id,
                            dst,
                            kind,
                            size,
                            fields,
                        })
                    }
                    "gep" => {
                        let ptr = self.reg()?;
                        self.punct(",")?;
                        let index = self.affine()?;
                        Ok(Stmt::Gep { id, dst, ptr, index })
                    }
                    "recv_ext" => Ok(Stmt::RecvExt {
                        id,
                        dst,
                        ptr: self.reg()?,
                    }),
                    "input" => Ok(Stmt::Input { id, dst }),
                    "null" => Ok(Stmt::Null { id, dst }),
                    "addr_of" => match self.bump() {
                        Some(Tok::At(global)) => Ok(Stmt::AddrOf { id, dst, global }),
                        _ => {
                            self.pos -= 1;
                            self.fail("expected @global")
                        }
                    },
                    other => {
                        self.pos -= 1;
                        self.fail(format!("unknown operation {other:?}"))
                    }
                }
            }
            Some(Tok::Word(w)) => {
                self.pos += 1;
                match w.as_str() {
                    "load" | "store" => {
                        let id = self.fresh_id(at);
                        let ptr = self.reg()?;
                        self.punct(",")?;
                        let width = self.uint("width")?;
                        Ok(if w == "load" {
                            Stmt::Load { id, ptr, width }
                        } else {
                            Stmt::Store { id, ptr, width }
                        })
                    }
                    "free" => {
                        let id = self.fresh_id(at);
                        Ok(Stmt::Free { id, ptr: self.reg()? })
                    }
                    "call_ext" => {
                        let id = self.fresh_id(at);
                        Ok(Stmt::CallExt { id, ptr: self.reg()? })
                    }
                    "check" => {
                        let ptr = self.reg()?;
                        let offset = if self.eat_punct("[") {
                            let a = self.affine()?;
                            self.punct("]")?;
                            a
                        } else {
                            Affine::constant(0)
                        };
                        self.punct(",")?;
                        let width = self.uint("width")?;
                        self.punct(",")?;
                        let access = match self.word()?.as_str() {
                            "r" => Access::Read,
                            "w" => Access::Write,
                            other => return self.fail(format!("expected r or w, found {other:?}")),
                        };
                        let site = match self.bump() {
                            Some(Tok::At(s)) => s.parse().or_else(|_| self.fail("bad site id"))?,
                            _ => {
                                self.pos -= 1;
                                return self.fail("expected @site");
                            }
                        };
                        Ok(Stmt::Check(Check {
                            ptr,
                            offset,
                            width,
                            access,
                            site,
                        }))
                    }
                    "loop" => {
                        let id = self.fresh_id(at);
                        let var = self.reg()?;
                        self.punct("=")?;
                        let lo = self.literal_bound("lower bound")?;
                        self.punct(",")?;
                        let hi = self.literal_bound("upper bound")?;
                        self.punct(",")?;
                        let step = self.literal_bound("step")?;
                        let body = self.block()?;
                        Ok(Stmt::Loop {
                            id,
                            var,
                            lo,
                            hi,
                            step,
                            body,
                        })
                    }
                    "if" => {
                        let id = self.fresh_id(at);
                        let lhs = self.affine()?;
                        let op = match self.bump() {
                            Some(Tok::Punct("<")) => CmpOp::Lt,
                            Some(Tok::Punct("<=")) => CmpOp::Le,
                            Some(Tok::Punct("==")) => CmpOp::Eq,
                            Some(Tok::Punct("!=")) => CmpOp::Ne,
                            Some(Tok::Punct(">=")) => CmpOp::Ge,
                            Some(Tok::Punct(">")) => CmpOp::Gt,
                            _ => {
                                self.pos -= 1;
                                return self.fail("expected a comparison");
                            }
                        };
                        let rhs = self.affine()?;
                        let then_body = self.block()?;
                        let else_body = if self.eat_word("else") { self.block()? } else { Vec::new() };
                        Ok(Stmt::If {
                            id,
                            cond: Cond { lhs, op, rhs },
                            then_body,
                            else_body,
                        })
                    }
                    other => {
                        self.pos -= 1;
                        self.fail(format!("unknown statement {other:?}"))
                    }
                }
            }
            _ => self.fail("expected a statement"),
        }
    }

    fn program(&mut self) -> PResult<Program> {
        let mut p = Program::default();
        while let Some(tok) = self.peek().cloned() {
            match tok {
                Tok::Word(w) if w == "inputs" => {
                    self.pos += 1;
                    p.inputs.push(self.int()?);
                    while self.eat_punct(",") {
                        p.inputs.push(self.int()?);
                    }
                }
                Tok::Word(w) if w == "global" => {
                    self.pos += 1;
                    let name = match self.bump() {
                        Some(Tok::At(n)) => n,
                        _ => {
                            self.pos -= 1;
                            return self.fail("expected @name");
                        }
                    };
                    let size = self.uint("global size")?;
                    p.globals.push(Global { name, size });
                }
                Tok::Word(w) if w == "func" => {
                    self.pos += 1;
                    let name = self.word()?;
                    let body = self.block()?;
                    p.functions.push(Function { name, body });
                }
                _ => return self.fail("expected inputs, global or func"),
            }
        }
        Ok(p)
    }
}

/// Parses and validates a program.
pub fn parse(text: &str) -> Result<Program, IrError> {
    let toks = lex(text)?;
    let eof = (text.lines().count().max(1), 1);
    let mut parser = Parser {
        toks,
        pos: 0,
        next_id: 0,
        positions: Positions::new(),
        eof,
    };
    let program = parser.program()?;
    validate(&program, &parser.positions)?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOOP: &str = "
        inputs 3, -4
        global @tbl 64
        func main {
          %a = alloc heap 100 fields 0:8 8:92   ; comment
          %x = input
          loop %i = 0, 10, 1 {
            %p = gep %a, %i*4+3
            store %p, 4
            if %x < 10 { load %p, 1 } else { %q = gep %p, -1 }
          }
          check %a[%x*-2-1], 4, w @5
          %g = addr_of @tbl
          %n = null
          call_ext %a
          %r = recv_ext %a
          free %a
        }";

    #[test]
    fn parses_and_numbers_sites() {
        let p = parse(LOOP).unwrap();
        assert_eq!(p.inputs, vec![3, -4]);
        assert_eq!(p.globals[0].size, 64);
        let ids: Vec<u32> = p.stmts().iter().filter(|s| !matches!(s, Stmt::Check(_))).map(|s| s.id()).collect();
        assert_eq!(ids, (1..=ids.len() as u32).collect::<Vec<_>>());
        let c = &p.checks()[0];
        assert_eq!(c.offset, Affine::linear("x", -2, -1));
    }

    #[test]
    fn canonical_round_trip() {
        let p = parse(LOOP).unwrap();
        let text = p.to_text();
        let q = parse(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_text(), text);
    }

    #[test]
    fn syntax_errors_cite_position() {
        let err = parse("func main {\n  %a = alloc heap 4\n  frob %a\n}").unwrap_err();
        assert_eq!(
            err,
            IrError::Syntax {
                line: 3,
                col: 3,
                msg: "unknown statement \"frob\"".into()
            }
        );
        assert!(matches!(parse("func main {"), Err(IrError::Syntax { .. })));
        assert!(matches!(parse("func main { $ }"), Err(IrError::Syntax { line: 1, col: 13, .. })));
    }

    #[test]
    fn validation_errors() {
        let undefined = parse("func main {\n  store %p, 4\n}").unwrap_err();
        assert!(matches!(undefined, IrError::Validation { loc: Some((2, 3)), .. }), "{undefined}");
        let twice = parse("func main { %a = null %a = null }").unwrap_err();
        assert!(matches!(twice, IrError::Validation { .. }));
        let nonliteral = parse("func main { %n = input loop %i = 0, %n, 1 { } }").unwrap_err();
        assert!(matches!(nonliteral, IrError::Validation { .. }), "{nonliteral}");
        let scoped = parse("func main { loop %i = 0, 2, 1 { %p = null } load %p, 1 }").unwrap_err();
        assert!(matches!(scoped, IrError::Validation { .. }));
        let arm = parse("func main { if 1 < 2 { %p = null } else { load %p, 1 } }").unwrap_err();
        assert!(matches!(arm, IrError::Validation { .. }));
        let site = parse("func main { %p = null check %p, 1, r @9 }").unwrap_err();
        assert!(matches!(site, IrError::Validation { .. }));
        assert!(parse("func main { %g = addr_of @nope }").is_err());
        assert!(parse("global @a 4 global @a 8").is_err());
    }

    #[test]
    fn cross_function_visibility() {
        let p = parse("func f { %s = alloc stack 8 } func g { store %s, 1 }");
        assert!(p.is_ok());
    }
}
