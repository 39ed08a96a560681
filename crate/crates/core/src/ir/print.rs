use std::fmt;

use super::{Expr, Function, Instr, Operand, ParamKind, Program};

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => f.write_str(v),
            Operand::Const(c) => write!(f, "{c}"),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Operand(o) => write!(f, "{o}"),
            Expr::Binary(op, a, b) => write!(f, "({} {a} {b})", op.mnemonic()),
        }
    }
}

fn write_args(f: &mut fmt::Formatter<'_>, callee: &str, args: &[Operand]) -> fmt::Result {
    write!(f, "call {callee}(")?;
    for (i, a) in args.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{a}")?;
    }
    f.write_str(")")
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instr::Const { dst, value } => write!(f, "{dst} = const {value}"),
            Instr::Bin { dst, op, lhs, rhs } => {
                write!(f, "{dst} = {} {lhs} {rhs}", op.mnemonic())
            }
            Instr::Load { dst, buf, index } => write!(f, "{dst} = load {buf} {index}"),
            Instr::Store { buf, index, value } => write!(f, "store {buf} {index} {value}"),
            Instr::Br {
                cond,
                then_label,
                else_label,
            } => write!(f, "br {cond} {then_label} {else_label}"),
            Instr::Jmp { label } => write!(f, "jmp {label}"),
            Instr::Call { callee, args, dst } => {
                if let Some(d) = dst {
                    write!(f, "{d} = ")?;
                }
                write_args(f, callee, args)
            }
            Instr::Ret { value: None } => f.write_str("ret"),
            Instr::Ret { value: Some(v) } => write!(f, "ret {v}"),
            Instr::Assert { cond } => write!(f, "assert {cond}"),
        }
    }
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fn {}(", self.name)?;
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match p.kind {
                ParamKind::Int => write!(f, "{}: int", p.name)?,
                ParamKind::Buf(None) => write!(f, "{}: buf", p.name)?,
                ParamKind::Buf(Some(n)) => write!(f, "{}: buf[{n}]", p.name)?,
            }
        }
        writeln!(f, ")")?;
        for (name, len) in &self.buffers {
            writeln!(f, "  buf {name}[{len}]")?;
        }
        for b in self.blocks() {
            writeln!(f, "{}:", b.label)?;
            for i in &b.instrs {
                writeln!(f, "  {i}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entry() != "main" {
            writeln!(f, "entry {}", self.entry())?;
            writeln!(f)?;
        }
        for (i, func) in self.functions().iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{func}")?;
        }
        Ok(())
    }
}
