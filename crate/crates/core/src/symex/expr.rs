use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;

use crate::ir::BinOp;

pub type ExprRef = Rc<SymExpr>;

/// Symbolic integer expression over atoms. Evaluation mirrors the concrete
/// interpreter except that division by zero evaluates to 0: any path that
/// reaches a division already carries a non-zero-divisor constraint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SymExpr {
    Const(i64),
    Atom(usize),
    Bin(BinOp, ExprRef, ExprRef),
    /// `if cond != 0 { then } else { else }`
    Ite(ExprRef, ExprRef, ExprRef),
}

impl SymExpr {
    pub fn eval(&self, model: &[i64]) -> i64 {
        match self {
            SymExpr::Const(c) => *c,
            SymExpr::Atom(a) => model[*a],
            SymExpr::Bin(op, a, b) => op.eval(a.eval(model), b.eval(model)).unwrap_or(0),
            SymExpr::Ite(c, t, e) => {
                if c.eval(model) != 0 {
                    t.eval(model)
                } else {
                    e.eval(model)
                }
            }
        }
    }

    pub fn collect_atoms(&self, out: &mut BTreeSet<usize>) {
        match self {
            SymExpr::Const(_) => {}
            SymExpr::Atom(a) => {
                out.insert(*a);
            }
            SymExpr::Bin(_, a, b) => {
                a.collect_atoms(out);
                b.collect_atoms(out);
            }
            SymExpr::Ite(c, t, e) => {
                c.collect_atoms(out);
                t.collect_atoms(out);
                e.collect_atoms(out);
            }
        }
    }

    pub fn bin(op: BinOp, a: ExprRef, b: ExprRef) -> ExprRef {
        if let (SymExpr::Const(x), SymExpr::Const(y)) = (&*a, &*b) {
            if let Some(v) = op.eval(*x, *y) {
                return Rc::new(SymExpr::Const(v));
            }
        }
        Rc::new(SymExpr::Bin(op, a, b))
    }

    pub fn constant(v: i64) -> ExprRef {
        Rc::new(SymExpr::Const(v))
    }

    pub fn atom(a: usize) -> ExprRef {
        Rc::new(SymExpr::Atom(a))
    }

    pub fn ite(c: ExprRef, t: ExprRef, e: ExprRef) -> ExprRef {
        if let SymExpr::Const(v) = &*c {
            return if *v != 0 { t } else { e };
        }
        Rc::new(SymExpr::Ite(c, t, e))
    }

    /// The expression that is truthy exactly when `e` is zero.
    pub fn negate(e: ExprRef) -> ExprRef {
        SymExpr::bin(BinOp::Eq, e, SymExpr::constant(0))
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymExpr::Const(c) => write!(f, "{c}"),
            SymExpr::Atom(a) => write!(f, "a{a}"),
            SymExpr::Bin(op, a, b) => write!(f, "({} {a} {b})", op.mnemonic()),
            SymExpr::Ite(c, t, e) => write!(f, "(ite {c} {t} {e})"),
        }
    }
}

/// A symbolic-store value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Concrete(i64),
    Symbolic(ExprRef),
}

impl Value {
    pub fn expr(&self) -> ExprRef {
        match self {
            Value::Concrete(c) => SymExpr::constant(*c),
            Value::Symbolic(e) => e.clone(),
        }
    }

    pub fn as_concrete(&self) -> Option<i64> {
        match self {
            Value::Concrete(c) => Some(*c),
            Value::Symbolic(_) => None,
        }
    }

    pub fn from_expr(e: ExprRef) -> Value {
        match &*e {
            SymExpr::Const(c) => Value::Concrete(*c),
            _ => Value::Symbolic(e),
        }
    }

    /// Applies `op`; the caller has already excluded a zero divisor.
    pub fn bin(op: BinOp, a: &Value, b: &Value) -> Value {
        match (a, b) {
            (Value::Concrete(x), Value::Concrete(y)) => {
                Value::Concrete(op.eval(*x, *y).unwrap_or(0))
            }
            _ => Value::from_expr(SymExpr::bin(op, a.expr(), b.expr())),
        }
    }
}

/// A path-condition conjunct: truthy when the expression is non-zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub expr: ExprRef,
    pub atoms: Vec<usize>,
}

impl Constraint {
    pub fn new(expr: ExprRef) -> Self {
        let mut atoms = BTreeSet::new();
        expr.collect_atoms(&mut atoms);
        Constraint {
            expr,
            atoms: atoms.into_iter().collect(),
        }
    }

    pub fn holds(&self, model: &[i64]) -> bool {
        self.expr.eval(model) != 0
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.expr)
    }
}

/// A symbolic input variable with an inclusive finite domain.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Atom {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
}

impl Atom {
    pub fn byte(name: impl Into<String>) -> Self {
        Atom {
            name: name.into(),
            lo: 0,
            hi: 255,
        }
    }
}
