use super::{Block, BinOp, Expr, Function, Instr, IrError, Operand, Param, ParamKind, Program};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Colon,
    Equals,
}

fn syntax(line: usize, message: impl Into<String>) -> IrError {
    IrError::Syntax {
        line,
        message: message.into(),
    }
}

fn tokenize(line_no: usize, line: &str) -> Result<Vec<Tok>, IrError> {
    let mut toks = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            '#' => break,
            ' ' | '\t' | '\r' | ',' => i += 1,
            '(' => {
                toks.push(Tok::LParen);
                i += 1
            }
            ')' => {
                toks.push(Tok::RParen);
                i += 1
            }
            '[' => {
                toks.push(Tok::LBracket);
                i += 1
            }
            ']' => {
                toks.push(Tok::RBracket);
                i += 1
            }
            ':' => {
                toks.push(Tok::Colon);
                i += 1
            }
            '=' => {
                toks.push(Tok::Equals);
                i += 1
            }
            c if c == '-' || c.is_ascii_digit() => {
                let start = i;
                i += 1;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                let text = &line[start..i];
                let v = text
                    .parse::<i64>()
                    .map_err(|_| syntax(line_no, format!("bad integer literal `{text}`")))?;
                toks.push(Tok::Int(v));
            }
            c if c == '_' || c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d == '_' || d == '.' || d.is_ascii_alphanumeric() {
                        i += 1;
                    } else {
                        break;
                    }
                }
                toks.push(Tok::Ident(line[start..i].to_string()));
            }
            other => return Err(syntax(line_no, format!("unexpected character `{other}`"))),
        }
    }
    Ok(toks)
}

struct Cursor<'a> {
    toks: &'a [Tok],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [Tok], line: usize) -> Self {
        Cursor { toks, pos: 0, line }
    }

    fn peek(&self) -> Option<&'a Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Tok> {
        let t = self.toks.get(self.pos);
        self.pos += 1;
        t
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), IrError> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            _ => Err(syntax(self.line, format!("expected {what}"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, IrError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s.clone()),
            _ => Err(syntax(self.line, format!("expected {what}"))),
        }
    }

    fn int(&mut self, what: &str) -> Result<i64, IrError> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(*v),
            _ => Err(syntax(self.line, format!("expected {what}"))),
        }
    }

    fn operand(&mut self) -> Result<Operand, IrError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(Operand::Var(s.clone())),
            Some(Tok::Int(v)) => Ok(Operand::Const(*v)),
            _ => Err(syntax(self.line, "expected an operand")),
        }
    }

    fn op(&mut self) -> Result<BinOp, IrError> {
        let name = self.ident("an operator")?;
        BinOp::from_mnemonic(&name)
            .ok_or_else(|| syntax(self.line, format!("unknown operator `{name}`")))
    }

    fn cond(&mut self) -> Result<Expr, IrError> {
        if self.peek() == Some(&Tok::LParen) {
            self.next();
            let op = self.op()?;
            let a = self.operand()?;
            let b = self.operand()?;
            self.expect(&Tok::RParen, "`)`")?;
            Ok(Expr::Binary(op, a, b))
        } else {
            Ok(Expr::Operand(self.operand()?))
        }
    }

    fn call_args(&mut self) -> Result<(String, Vec<Operand>), IrError> {
        let callee = self.ident("a function name")?;
        self.expect(&Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        while self.peek() != Some(&Tok::RParen) {
            if self.at_end() {
                return Err(syntax(self.line, "unterminated argument list"));
            }
            args.push(self.operand()?);
        }
        self.next();
        Ok((callee, args))
    }

    fn finish(&self) -> Result<(), IrError> {
        if self.at_end() {
            Ok(())
        } else {
            Err(syntax(self.line, "unexpected trailing tokens"))
        }
    }
}

struct FunctionBuilder {
    name: String,
    params: Vec<Param>,
    buffers: Vec<(String, usize)>,
    blocks: Vec<Block>,
    /// Set after a terminator; the next instruction needs a fresh label.
    closed: bool,
}

impl FunctionBuilder {
    fn push(&mut self, line: usize, instr: Instr) -> Result<(), IrError> {
        if self.blocks.is_empty() {
            self.blocks.push(Block {
                label: "entry".into(),
                instrs: Vec::new(),
            });
        } else if self.closed {
            return Err(syntax(line, "instruction after a terminator needs a label"));
        }
        self.closed = instr.is_terminator();
        self.blocks.last_mut().expect("nonempty").instrs.push(instr);
        Ok(())
    }

    fn build(self) -> Function {
        Function::new(self.name, self.params, self.buffers, self.blocks)
    }
}

fn parse_header(c: &mut Cursor) -> Result<FunctionBuilder, IrError> {
    let name = c.ident("a function name")?;
    c.expect(&Tok::LParen, "`(`")?;
    let mut params = Vec::new();
    while c.peek() != Some(&Tok::RParen) {
        if c.at_end() {
            return Err(syntax(c.line, "unterminated parameter list"));
        }
        let pname = c.ident("a parameter name")?;
        c.expect(&Tok::Colon, "`:`")?;
        let kind = match c.ident("`int` or `buf`")?.as_str() {
            "int" => ParamKind::Int,
            "buf" => {
                if c.peek() == Some(&Tok::LBracket) {
                    c.next();
                    let n = c.int("a buffer length")?;
                    c.expect(&Tok::RBracket, "`]`")?;
                    if n <= 0 {
                        return Err(syntax(c.line, "buffer length must be positive"));
                    }
                    ParamKind::Buf(Some(n as usize))
                } else {
                    ParamKind::Buf(None)
                }
            }
            other => return Err(syntax(c.line, format!("unknown parameter kind `{other}`"))),
        };
        params.push(Param { name: pname, kind });
    }
    c.next();
    c.finish()?;
    Ok(FunctionBuilder {
        name,
        params,
        buffers: Vec::new(),
        blocks: Vec::new(),
        closed: false,
    })
}

fn parse_instr(c: &mut Cursor) -> Result<Instr, IrError> {
    let first = c.ident("an instruction")?;
    let instr = if c.peek() == Some(&Tok::Equals) {
        c.next();
        let dst = first;
        let head = c.ident("an instruction")?;
        match head.as_str() {
            "const" => Instr::Const {
                dst,
                value: c.int("an integer literal")?,
            },
            "load" => Instr::Load {
                dst,
                buf: c.ident("a buffer name")?,
                index: c.operand()?,
            },
            "call" => {
                let (callee, args) = c.call_args()?;
                Instr::Call {
                    callee,
                    args,
                    dst: Some(dst),
                }
            }
            op => {
                let op = BinOp::from_mnemonic(op)
                    .ok_or_else(|| syntax(c.line, format!("unknown instruction `{op}`")))?;
                Instr::Bin {
                    dst,
                    op,
                    lhs: c.operand()?,
                    rhs: c.operand()?,
                }
            }
        }
    } else {
        match first.as_str() {
            "store" => Instr::Store {
                buf: c.ident("a buffer name")?,
                index: c.operand()?,
                value: c.operand()?,
            },
            "br" => Instr::Br {
                cond: c.cond()?,
                then_label: c.ident("a label")?,
                else_label: c.ident("a label")?,
            },
            "jmp" => Instr::Jmp {
                label: c.ident("a label")?,
            },
            "call" => {
                let (callee, args) = c.call_args()?;
                Instr::Call {
                    callee,
                    args,
                    dst: None,
                }
            }
            "ret" => Instr::Ret {
                value: if c.at_end() { None } else { Some(c.operand()?) },
            },
            "assert" => Instr::Assert { cond: c.cond()? },
            other => return Err(syntax(c.line, format!("unknown instruction `{other}`"))),
        }
    };
    c.finish()?;
    Ok(instr)
}

/// Parses the textual IR into a validated [`Program`].
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let mut functions = Vec::new();
    let mut current: Option<FunctionBuilder> = None;
    let mut entry = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks = tokenize(line, raw)?;
        if toks.is_empty() {
            continue;
        }
        let mut c = Cursor::new(&toks, line);
        match &toks[0] {
            Tok::Ident(kw) if kw == "fn" => {
                c.next();
                if let Some(done) = current.take() {
                    functions.push(done.build());
                }
                current = Some(parse_header(&mut c)?);
            }
            Tok::Ident(kw) if kw == "entry" && toks.len() == 2 && current.is_none() => {
                c.next();
                entry = Some(c.ident("an entry function name")?);
            }
            Tok::Ident(label) if toks.len() == 2 && toks[1] == Tok::Colon => {
                let f = current
                    .as_mut()
                    .ok_or_else(|| syntax(line, "label outside of a function"))?;
                f.blocks.push(Block {
                    label: label.clone(),
                    instrs: Vec::new(),
                });
                f.closed = false;
            }
            Tok::Ident(kw) if kw == "buf" => {
                let f = current
                    .as_mut()
                    .ok_or_else(|| syntax(line, "buffer declaration outside of a function"))?;
                c.next();
                let name = c.ident("a buffer name")?;
                c.expect(&Tok::LBracket, "`[`")?;
                let n = c.int("a buffer length")?;
                c.expect(&Tok::RBracket, "`]`")?;
                c.finish()?;
                if n <= 0 {
                    return Err(syntax(line, "buffer length must be positive"));
                }
                f.buffers.push((name, n as usize));
            }
            _ => {
                let f = current
                    .as_mut()
                    .ok_or_else(|| syntax(line, "instruction outside of a function"))?;
                let instr = parse_instr(&mut c)?;
                f.push(line, instr)?;
            }
        }
    }
    if let Some(done) = current.take() {
        functions.push(done.build());
    }
    Program::new(functions, entry.unwrap_or_else(|| "main".to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const P1: &str = "\
fn main(input: buf[2])
entry:
  x = load input 0
  br (gt x 5) L1 L2
L1:
  call mid(x)
  ret
L2:
  ret

fn mid(a: int)
entry:
  b = add a 1
  call target(b)
  ret

fn target(c: int)
entry:
  assert (ne c 7)
  ret
";

    #[test]
    fn parses_p1() {
        let p = parse_program(P1).unwrap();
        let names: Vec<_> = p.function_names().collect();
        assert_eq!(names, ["main", "mid", "target"]);
        assert_eq!(p.entry(), "main");
        assert_eq!(p.entry_input_len(), 2);
        assert_eq!(p.function("main").unwrap().instr_count(), 5);
    }

    #[test]
    fn empty_text_is_missing_entry() {
        assert_eq!(
            parse_program("").unwrap_err(),
            IrError::MissingEntry("main".into())
        );
        assert_eq!(
            parse_program("# nothing here\n\n").unwrap_err(),
            IrError::MissingEntry("main".into())
        );
    }

    #[test]
    fn undefined_label() {
        let err = parse_program("fn main()\nentry:\n  c = const 1\n  br c, L9, L1\nL1:\n  ret\n")
            .unwrap_err();
        assert_eq!(
            err,
            IrError::UndefinedLabel {
                function: "main".into(),
                label: "L9".into()
            }
        );
    }

    #[test]
    fn undefined_callee() {
        let err = parse_program("fn main()\nentry:\n  call nope()\n  ret\n").unwrap_err();
        assert!(matches!(err, IrError::UndefinedCallee { .. }));
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse_program("fn main()\nentry:\n  x = frob 1 2\n  ret\n").unwrap_err();
        assert!(matches!(err, IrError::Syntax { line: 3, .. }));
        let err = parse_program("fn main()\nentry:\n  ret\n  ret\n").unwrap_err();
        assert!(matches!(err, IrError::Syntax { line: 4, .. }));
    }

    #[test]
    fn implicit_entry_block_and_entry_directive() {
        let p = parse_program("entry start\nfn start()\n  call f(3)\n  ret\nfn f(a: int)\n  ret a\n")
            .unwrap();
        assert_eq!(p.entry(), "start");
        assert_eq!(p.function("f").unwrap().blocks()[0].label, "entry");
        assert!(p.function("f").unwrap().returns_value());
    }

    #[test]
    fn local_buffers_and_unsized_params() {
        let p = parse_program(
            "fn main(in: buf)\n  buf tmp[4]\nentry:\n  store tmp 0 1\n  call g(tmp)\n  ret\nfn g(p: buf)\n  ret\n",
        )
        .unwrap();
        assert_eq!(p.entry_input_len(), crate::ir::DEFAULT_BUF_LEN);
        assert_eq!(p.function("main").unwrap().buffers, vec![("tmp".into(), 4)]);
    }
}
