//! The minimal imperative IR shared by every analysis.
//!
//! A [`Program`] is a set of functions; each function is a list of labelled
//! blocks. Instructions are addressed by a flat index across the blocks of a
//! function, so a [`Location`] is a `(function, instrIndex)` pair and
//! fallthrough between blocks is simply `index + 1`.

mod interp;
mod parse;
mod print;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use interp::{
    run_concrete, run_concrete_with, BlockEdge, Outcome, OutcomeKind, RunOptions, ViolationKind,
};
pub use parse::parse_program;

/// Buffer length used for unsized `buf` parameters when a length is needed.
pub const DEFAULT_BUF_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("undefined label `{label}` in function `{function}`")]
    UndefinedLabel { function: String, label: String },
    #[error("call to undefined function `{callee}` in `{function}`")]
    UndefinedCallee { function: String, callee: String },
    #[error("entry function `{0}` is not defined")]
    MissingEntry(String),
    #[error("entry function `{function}` is invalid: {message}")]
    InvalidEntry { function: String, message: String },
    #[error("function `{0}` is defined more than once")]
    DuplicateFunction(String),
    #[error("label `{label}` is defined more than once in `{function}`")]
    DuplicateLabel { function: String, label: String },
    #[error("name `{name}` is declared more than once in `{function}`")]
    DuplicateName { function: String, name: String },
    #[error("undefined variable `{name}` in `{function}`")]
    UndefinedVariable { function: String, name: String },
    #[error("type error in `{function}`: {message}")]
    TypeMismatch { function: String, message: String },
    #[error("`{function}` calls `{callee}` with {found} arguments, expected {expected}")]
    ArityMismatch {
        function: String,
        callee: String,
        expected: usize,
        found: usize,
    },
    #[error("function `{0}` has no instructions")]
    EmptyFunction(String),
    #[error("block `{label}` in `{function}` is empty")]
    EmptyBlock { function: String, label: String },
    #[error("control falls off the end of `{0}`")]
    FallsOffEnd(String),
    #[error("terminator in the middle of block `{label}` in `{function}`")]
    TerminatorNotLast { function: String, label: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl BinOp {
    pub const ALL: [BinOp; 11] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Mod,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Mod => "mod",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::Lt => "lt",
            BinOp::Le => "le",
            BinOp::Gt => "gt",
            BinOp::Ge => "ge",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge
        )
    }

    pub fn is_division(self) -> bool {
        matches!(self, BinOp::Div | BinOp::Mod)
    }

    /// Wrapping 64-bit semantics. `None` on division or modulo by zero.
    pub fn eval(self, a: i64, b: i64) -> Option<i64> {
        Some(match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Div => {
                if b == 0 {
                    return None;
                }
                a.wrapping_div(b)
            }
            BinOp::Mod => {
                if b == 0 {
                    return None;
                }
                a.wrapping_rem(b)
            }
            BinOp::Eq => (a == b) as i64,
            BinOp::Ne => (a != b) as i64,
            BinOp::Lt => (a < b) as i64,
            BinOp::Le => (a <= b) as i64,
            BinOp::Gt => (a > b) as i64,
            BinOp::Ge => (a >= b) as i64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Var(String),
    Const(i64),
}

impl Operand {
    pub fn var(name: impl Into<String>) -> Self {
        Operand::Var(name.into())
    }
}

/// A branch or assertion condition: a single operand or one binary operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Operand(Operand),
    Binary(BinOp, Operand, Operand),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Instr {
    Const {
        dst: String,
        value: i64,
    },
    Bin {
        dst: String,
        op: BinOp,
        lhs: Operand,
        rhs: Operand,
    },
    Load {
        dst: String,
        buf: String,
        index: Operand,
    },
    Store {
        buf: String,
        index: Operand,
        value: Operand,
    },
    Br {
        cond: Expr,
        then_label: String,
        else_label: String,
    },
    Jmp {
        label: String,
    },
    Call {
        callee: String,
        args: Vec<Operand>,
        dst: Option<String>,
    },
    Ret {
        value: Option<Operand>,
    },
    Assert {
        cond: Expr,
    },
}

impl Instr {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Instr::Br { .. } | Instr::Jmp { .. } | Instr::Ret { .. })
    }

    fn defined_int(&self) -> Option<&str> {
        match self {
            Instr::Const { dst, .. } | Instr::Bin { dst, .. } | Instr::Load { dst, .. } => {
                Some(dst)
            }
            Instr::Call { dst: Some(dst), .. } => Some(dst),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Int,
    /// A single pointer to a buffer; the declared length is optional.
    Buf(Option<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instr>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Param>,
    /// Local buffers, zero-initialised on every call.
    pub buffers: Vec<(String, usize)>,
    blocks: Vec<Block>,
    starts: Vec<usize>,
    len: usize,
}

impl Function {
    pub fn new(
        name: impl Into<String>,
        params: Vec<Param>,
        buffers: Vec<(String, usize)>,
        blocks: Vec<Block>,
    ) -> Self {
        let mut starts = Vec::with_capacity(blocks.len());
        let mut len = 0;
        for b in &blocks {
            starts.push(len);
            len += b.instrs.len();
        }
        Function {
            name: name.into(),
            params,
            buffers,
            blocks,
            starts,
            len,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn instr_count(&self) -> usize {
        self.len
    }

    pub fn instr(&self, index: usize) -> &Instr {
        let b = self.block_index_of(index);
        &self.blocks[b].instrs[index - self.starts[b]]
    }

    pub fn instrs(&self) -> impl Iterator<Item = (usize, &Instr)> + '_ {
        self.blocks.iter().flat_map(|b| b.instrs.iter()).enumerate()
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn block_start(&self, label: &str) -> Option<usize> {
        self.block_index(label).map(|b| self.starts[b])
    }

    pub fn block_start_at(&self, block: usize) -> usize {
        self.starts[block]
    }

    /// Index of the block containing the flat instruction `index`.
    pub fn block_index_of(&self, index: usize) -> usize {
        assert!(index < self.len, "instruction index out of range");
        match self.starts.binary_search(&index) {
            Ok(mut b) => {
                // Skip over empty blocks sharing the same start.
                while self.blocks[b].instrs.is_empty() {
                    b += 1;
                }
                b
            }
            Err(b) => b - 1,
        }
    }

    /// Intra-frame successors of an instruction. Calls continue at the next
    /// instruction; `ret` has none.
    pub fn successors(&self, index: usize) -> Vec<usize> {
        match self.instr(index) {
            Instr::Br {
                then_label,
                else_label,
                ..
            } => {
                let t = self.block_start(then_label).expect("validated label");
                let e = self.block_start(else_label).expect("validated label");
                if t == e {
                    vec![t]
                } else {
                    vec![t, e]
                }
            }
            Instr::Jmp { label } => vec![self.block_start(label).expect("validated label")],
            Instr::Ret { .. } => vec![],
            _ => vec![index + 1],
        }
    }

    /// True when some `ret` carries a value.
    pub fn returns_value(&self) -> bool {
        self.instrs()
            .any(|(_, i)| matches!(i, Instr::Ret { value: Some(_) }))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// A `(function, instrIndex)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Location {
    pub function: String,
    pub instr_index: usize,
}

impl Location {
    pub fn new(function: impl Into<String>, instr_index: usize) -> Self {
        Location {
            function: function.into(),
            instr_index,
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.function, self.instr_index)
    }
}

#[derive(Debug, Clone)]
pub struct Program {
    functions: Vec<Function>,
    index: HashMap<String, usize>,
    entry: String,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.entry == other.entry && self.functions == other.functions
    }
}

impl Eq for Program {}

impl Program {
    /// Builds and validates a program.
    pub fn new(functions: Vec<Function>, entry: impl Into<String>) -> Result<Self, IrError> {
        let entry = entry.into();
        let mut index = HashMap::new();
        for (i, f) in functions.iter().enumerate() {
            if index.insert(f.name.clone(), i).is_some() {
                return Err(IrError::DuplicateFunction(f.name.clone()));
            }
        }
        let program = Program {
            functions,
            index,
            entry,
        };
        program.validate()?;
        Ok(program)
    }

    pub fn functions(&self) -> &[Function] {
        &self.functions
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.index.get(name).map(|&i| &self.functions[i])
    }

    pub fn function_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn function_names(&self) -> impl Iterator<Item = &str> + '_ {
        self.functions.iter().map(|f| f.name.as_str())
    }

    pub fn entry(&self) -> &str {
        &self.entry
    }

    pub fn entry_function(&self) -> &Function {
        self.function(&self.entry).expect("validated entry")
    }

    /// Length of the external input buffer the entry function receives,
    /// or 0 when the entry takes no parameters.
    pub fn entry_input_len(&self) -> usize {
        match self.entry_function().params.first() {
            Some(Param {
                kind: ParamKind::Buf(len),
                ..
            }) => len.unwrap_or(DEFAULT_BUF_LEN),
            _ => 0,
        }
    }

    pub fn instr_count(&self) -> usize {
        self.functions.iter().map(|f| f.instr_count()).sum()
    }

    /// Returns a copy with one function replaced, re-validated.
    pub fn with_function(&self, replacement: Function) -> Result<Program, IrError> {
        let mut functions = self.functions.clone();
        match self.index.get(&replacement.name) {
            Some(&i) => functions[i] = replacement,
            None => functions.push(replacement),
        }
        Program::new(functions, self.entry.clone())
    }

    /// Returns a copy with an extra function and a different entry.
    pub fn with_entry(&self, extra: Function) -> Result<Program, IrError> {
        let entry = extra.name.clone();
        let mut functions = self.functions.clone();
        functions.push(extra);
        Program::new(functions, entry)
    }

    fn validate(&self) -> Result<(), IrError> {
        let entry = self
            .function(&self.entry)
            .ok_or_else(|| IrError::MissingEntry(self.entry.clone()))?;
        match entry.params.as_slice() {
            [] => {}
            [Param {
                kind: ParamKind::Buf(_),
                ..
            }] => {}
            _ => {
                return Err(IrError::InvalidEntry {
                    function: entry.name.clone(),
                    message: "the entry takes no parameters or exactly one buf parameter".into(),
                })
            }
        }
        for f in &self.functions {
            self.validate_function(f)?;
        }
        Ok(())
    }

    fn validate_function(&self, f: &Function) -> Result<(), IrError> {
        let fname = &f.name;
        if f.len == 0 {
            return Err(IrError::EmptyFunction(fname.clone()));
        }
        let mut labels = BTreeSet::new();
        for b in &f.blocks {
            if !labels.insert(b.label.as_str()) {
                return Err(IrError::DuplicateLabel {
                    function: fname.clone(),
                    label: b.label.clone(),
                });
            }
            if b.instrs.is_empty() {
                return Err(IrError::EmptyBlock {
                    function: fname.clone(),
                    label: b.label.clone(),
                });
            }
            let last = b.instrs.len() - 1;
            if b.instrs[..last].iter().any(Instr::is_terminator) {
                return Err(IrError::TerminatorNotLast {
                    function: fname.clone(),
                    label: b.label.clone(),
                });
            }
        }
        if !f.instr(f.len - 1).is_terminator() {
            return Err(IrError::FallsOffEnd(fname.clone()));
        }

        let mut ints = BTreeSet::new();
        let mut bufs = BTreeSet::new();
        let mut declared = BTreeSet::new();
        for p in &f.params {
            if !declared.insert(p.name.as_str()) {
                return Err(IrError::DuplicateName {
                    function: fname.clone(),
                    name: p.name.clone(),
                });
            }
            match p.kind {
                ParamKind::Int => ints.insert(p.name.as_str()),
                ParamKind::Buf(Some(0)) => {
                    return Err(IrError::TypeMismatch {
                        function: fname.clone(),
                        message: format!("buffer parameter `{}` has length 0", p.name),
                    })
                }
                ParamKind::Buf(_) => bufs.insert(p.name.as_str()),
            };
        }
        for (name, len) in &f.buffers {
            if !declared.insert(name.as_str()) {
                return Err(IrError::DuplicateName {
                    function: fname.clone(),
                    name: name.clone(),
                });
            }
            if *len == 0 {
                return Err(IrError::TypeMismatch {
                    function: fname.clone(),
                    message: format!("buffer `{name}` has length 0"),
                });
            }
            bufs.insert(name.as_str());
        }
        for (_, instr) in f.instrs() {
            if let Some(d) = instr.defined_int() {
                if bufs.contains(d) {
                    return Err(IrError::TypeMismatch {
                        function: fname.clone(),
                        message: format!("`{d}` is a buffer and cannot be assigned"),
                    });
                }
                ints.insert(d);
            }
        }

        let int_operand = |o: &Operand| -> Result<(), IrError> {
            match o {
                Operand::Const(_) => Ok(()),
                Operand::Var(v) if ints.contains(v.as_str()) => Ok(()),
                Operand::Var(v) if bufs.contains(v.as_str()) => Err(IrError::TypeMismatch {
                    function: fname.clone(),
                    message: format!("buffer `{v}` used as an integer"),
                }),
                Operand::Var(v) => Err(IrError::UndefinedVariable {
                    function: fname.clone(),
                    name: v.clone(),
                }),
            }
        };
        let buf_name = |v: &str| -> Result<(), IrError> {
            if bufs.contains(v) {
                Ok(())
            } else if ints.contains(v) {
                Err(IrError::TypeMismatch {
                    function: fname.clone(),
                    message: format!("integer `{v}` used as a buffer"),
                })
            } else {
                Err(IrError::UndefinedVariable {
                    function: fname.clone(),
                    name: v.to_string(),
                })
            }
        };
        let expr = |e: &Expr| -> Result<(), IrError> {
            match e {
                Expr::Operand(o) => int_operand(o),
                Expr::Binary(_, a, b) => {
                    int_operand(a)?;
                    int_operand(b)
                }
            }
        };
        let label = |l: &str| -> Result<(), IrError> {
            if labels.contains(l) {
                Ok(())
            } else {
                Err(IrError::UndefinedLabel {
                    function: fname.clone(),
                    label: l.to_string(),
                })
            }
        };

        for (_, instr) in f.instrs() {
            match instr {
                Instr::Const { .. } => {}
                Instr::Bin { lhs, rhs, .. } => {
                    int_operand(lhs)?;
                    int_operand(rhs)?;
                }
                Instr::Load { buf, index, .. } => {
                    buf_name(buf)?;
                    int_operand(index)?;
                }
                Instr::Store { buf, index, value } => {
                    buf_name(buf)?;
                    int_operand(index)?;
                    int_operand(value)?;
                }
                Instr::Br {
                    cond,
                    then_label,
                    else_label,
                } => {
                    expr(cond)?;
                    label(then_label)?;
                    label(else_label)?;
                }
                Instr::Jmp { label: l } => label(l)?,
                Instr::Call { callee, args, .. } => {
                    let target =
                        self.function(callee)
                            .ok_or_else(|| IrError::UndefinedCallee {
                                function: fname.clone(),
                                callee: callee.clone(),
                            })?;
                    if target.params.len() != args.len() {
                        return Err(IrError::ArityMismatch {
                            function: fname.clone(),
                            callee: callee.clone(),
                            expected: target.params.len(),
                            found: args.len(),
                        });
                    }
                    for (p, a) in target.params.iter().zip(args) {
                        match (p.kind, a) {
                            (ParamKind::Int, a) => int_operand(a)?,
                            (ParamKind::Buf(_), Operand::Var(v)) => buf_name(v)?,
                            (ParamKind::Buf(_), Operand::Const(_)) => {
                                return Err(IrError::TypeMismatch {
                                    function: fname.clone(),
                                    message: format!(
                                        "constant passed to buffer parameter `{}` of `{callee}`",
                                        p.name
                                    ),
                                })
                            }
                        }
                    }
                }
                Instr::Ret { value } => {
                    if let Some(v) = value {
                        int_operand(v)?;
                    }
                }
                Instr::Assert { cond } => expr(cond)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binop_wrapping_and_division() {
        assert_eq!(BinOp::Add.eval(i64::MAX, 1), Some(i64::MIN));
        assert_eq!(BinOp::Div.eval(i64::MIN, -1), Some(i64::MIN));
        assert_eq!(BinOp::Mod.eval(7, 0), None);
        assert_eq!(BinOp::Div.eval(7, 0), None);
        assert_eq!(BinOp::Mod.eval(-7, 2), Some(-1));
        assert_eq!(BinOp::Lt.eval(-1, 0), Some(1));
    }

    #[test]
    fn flat_indexing_and_successors() {
        let p = parse_program(
            "fn main()\nentry:\n  x = const 1\n  br x A B\nA:\n  jmp B\nB:\n  ret\n",
        )
        .unwrap();
        let f = p.function("main").unwrap();
        assert_eq!(f.instr_count(), 4);
        assert_eq!(f.block_index_of(2), 1);
        assert_eq!(f.successors(1), vec![2, 3]);
        assert_eq!(f.successors(2), vec![3]);
        assert!(f.successors(3).is_empty());
    }

    #[test]
    fn entry_with_int_param_is_rejected() {
        let err = parse_program("fn main(a: int)\nentry:\n  ret\n").unwrap_err();
        assert!(matches!(err, IrError::InvalidEntry { .. }));
    }

    #[test]
    fn falls_off_end_is_rejected() {
        let err = parse_program("fn main()\nentry:\n  x = const 1\n").unwrap_err();
        assert_eq!(err, IrError::FallsOffEnd("main".into()));
    }

    #[test]
    fn type_errors() {
        let err = parse_program("fn main(b: buf[2])\nentry:\n  x = add b 1\n  ret\n").unwrap_err();
        assert!(matches!(err, IrError::TypeMismatch { .. }));
        let err = parse_program("fn main()\nentry:\n  x = add y 1\n  ret\n").unwrap_err();
        assert!(matches!(err, IrError::UndefinedVariable { .. }));
        let err =
            parse_program("fn main()\nentry:\n  call f(1)\n  ret\nfn f()\nentry:\n  ret\n")
                .unwrap_err();
        assert!(matches!(err, IrError::ArityMismatch { .. }));
    }
}
