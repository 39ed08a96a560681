//! Exact decision procedure for path conditions over finite-domain atoms.
//!
//! Single-atom affine comparisons narrow the atom intervals first. The
//! remaining constraints are split into independent atom components, and
//! each component is enumerated in lexicographic order with early constraint
//! checks. Because components share no atoms, combining the per-component
//! minima yields the global lexicographically smallest model.

use thiserror::Error;

use super::expr::{Atom, Constraint, SymExpr};
use crate::ir::BinOp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SolverConfig {
    /// Largest number of non-fixed atoms allowed in one component.
    pub max_atoms: usize,
    /// Largest residual assignment space enumerated for one component.
    pub max_assignments: u128,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_atoms: 4,
            max_assignments: 1 << 24,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SolverError {
    #[error("solver budget exceeded: {atoms} free atoms, {space} residual assignments")]
    SolverBudgetExceeded { atoms: usize, space: u128 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolveResult {
    /// Values for every atom, in declaration order.
    Sat(Vec<i64>),
    Unsat,
}

impl SolveResult {
    pub fn is_sat(&self) -> bool {
        matches!(self, SolveResult::Sat(_))
    }
}

#[derive(Debug, Clone, Copy)]
struct Bound {
    atom: usize,
    op: BinOp,
    k: i128,
}

fn negate(op: BinOp) -> BinOp {
    match op {
        BinOp::Eq => BinOp::Ne,
        BinOp::Ne => BinOp::Eq,
        BinOp::Lt => BinOp::Ge,
        BinOp::Ge => BinOp::Lt,
        BinOp::Le => BinOp::Gt,
        BinOp::Gt => BinOp::Le,
        other => other,
    }
}

fn flip(op: BinOp) -> BinOp {
    match op {
        BinOp::Lt => BinOp::Gt,
        BinOp::Gt => BinOp::Lt,
        BinOp::Le => BinOp::Ge,
        BinOp::Ge => BinOp::Le,
        other => other,
    }
}

/// `atom + offset` when the expression has that shape.
fn affine(e: &SymExpr) -> Option<(usize, i128)> {
    match e {
        SymExpr::Atom(a) => Some((*a, 0)),
        SymExpr::Bin(BinOp::Add, x, y) => match (&**x, &**y) {
            (other, SymExpr::Const(c)) | (SymExpr::Const(c), other) => {
                affine(other).map(|(a, off)| (a, off + *c as i128))
            }
            _ => None,
        },
        SymExpr::Bin(BinOp::Sub, x, y) => match &**y {
            SymExpr::Const(c) => affine(x).map(|(a, off)| (a, off - *c as i128)),
            _ => None,
        },
        _ => None,
    }
}

/// Recognises `atom + off CMP k` (possibly negated) as a bound on the atom.
/// `positive` is false when the constraint asserts `e == 0`.
fn unit_bound(e: &SymExpr, positive: bool, domains: &[(i64, i64)]) -> Option<Bound> {
    let no_wrap = |atom: usize, off: i128| {
        let (lo, hi) = domains[atom];
        let range = i64::MIN as i128..=i64::MAX as i128;
        range.contains(&(lo as i128 + off)) && range.contains(&(hi as i128 + off))
    };
    if let Some((atom, off)) = affine(e) {
        if !no_wrap(atom, off) {
            return None;
        }
        let op = if positive { BinOp::Ne } else { BinOp::Eq };
        return Some(Bound { atom, op, k: -off });
    }
    let SymExpr::Bin(op, x, y) = e else {
        return None;
    };
    if !op.is_comparison() {
        return None;
    }
    // `eq X 0` / `ne X 0` wrap another truth value.
    if matches!(op, BinOp::Eq | BinOp::Ne) {
        if let SymExpr::Const(0) = &**y {
            if affine(x).is_none() {
                let inner_positive = (*op == BinOp::Ne) == positive;
                return unit_bound(x, inner_positive, domains);
            }
        }
    }
    let (side, k, op) = match (&**x, &**y) {
        (side, SymExpr::Const(k)) => (side, *k as i128, *op),
        (SymExpr::Const(k), side) => (side, *k as i128, flip(*op)),
        _ => return None,
    };
    let (atom, off) = affine(side)?;
    if !no_wrap(atom, off) {
        return None;
    }
    let op = if positive { op } else { negate(op) };
    Some(Bound {
        atom,
        op,
        k: k - off,
    })
}

/// Applies a bound; returns true when the interval changed.
fn narrow(dom: &mut (i128, i128), b: Bound) -> bool {
    let before = *dom;
    let (lo, hi) = dom;
    match b.op {
        BinOp::Eq => {
            *lo = (*lo).max(b.k);
            *hi = (*hi).min(b.k);
        }
        BinOp::Ne => {
            if *lo == b.k {
                *lo += 1;
            }
            if *hi == b.k {
                *hi -= 1;
            }
        }
        BinOp::Lt => *hi = (*hi).min(b.k - 1),
        BinOp::Le => *hi = (*hi).min(b.k),
        BinOp::Gt => *lo = (*lo).max(b.k + 1),
        BinOp::Ge => *lo = (*lo).max(b.k),
        _ => {}
    }
    *dom != before
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Decides a conjunction of constraints. On `Sat`, returns the
/// lexicographically smallest model with atoms in declaration order.
pub fn solve_path_condition(
    pc: &[Constraint],
    atoms: &[Atom],
    cfg: &SolverConfig,
) -> Result<SolveResult, SolverError> {
    let mut domains: Vec<(i128, i128)> =
        atoms.iter().map(|a| (a.lo as i128, a.hi as i128)).collect();

    // Interval narrowing to a fixed point.
    loop {
        let mut changed = false;
        let snapshot: Vec<(i64, i64)> = domains
            .iter()
            .map(|&(lo, hi)| (lo.max(i64::MIN as i128) as i64, hi.min(i64::MAX as i128) as i64))
            .collect();
        for c in pc.iter().filter(|c| c.atoms.len() == 1) {
            if let Some(b) = unit_bound(&c.expr, true, &snapshot) {
                changed |= narrow(&mut domains[b.atom], b);
                if domains[b.atom].0 > domains[b.atom].1 {
                    return Ok(SolveResult::Unsat);
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut model: Vec<i64> = domains.iter().map(|d| d.0 as i64).collect();
    for c in pc.iter().filter(|c| c.atoms.is_empty()) {
        if !c.holds(&model) {
            return Ok(SolveResult::Unsat);
        }
    }

    let mut uf = UnionFind((0..atoms.len()).collect());
    for c in pc {
        for w in c.atoms.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut root_of = vec![usize::MAX; atoms.len()];
    let constrained: std::collections::BTreeSet<usize> =
        pc.iter().flat_map(|c| c.atoms.iter().copied()).collect();
    for &a in &constrained {
        let r = uf.find(a);
        if root_of[r] == usize::MAX {
            root_of[r] = components.len();
            components.push(Vec::new());
        }
        components[root_of[r]].push(a);
    }

    for comp in &components {
        let free = comp
            .iter()
            .filter(|&&a| domains[a].0 < domains[a].1)
            .count();
        let space = comp
            .iter()
            .map(|&a| (domains[a].1 - domains[a].0 + 1) as u128)
            .try_fold(1u128, |acc, n| acc.checked_mul(n))
            .unwrap_or(u128::MAX);
        if free > cfg.max_atoms || space > cfg.max_assignments {
            return Err(SolverError::SolverBudgetExceeded { atoms: free, space });
        }
        // Constraints checked once their last atom (in component order) is set.
        let position: std::collections::HashMap<usize, usize> =
            comp.iter().enumerate().map(|(i, &a)| (a, i)).collect();
        let mut checks: Vec<Vec<&Constraint>> = vec![Vec::new(); comp.len()];
        for c in pc.iter().filter(|c| !c.atoms.is_empty()) {
            if let Some(&p) = c.atoms.first().and_then(|a| position.get(a)) {
                let last = c.atoms.iter().map(|a| position[a]).max().unwrap_or(p);
                checks[last].push(c);
            }
        }
        if !search(0, comp, &domains, &checks, &mut model) {
            return Ok(SolveResult::Unsat);
        }
    }
    Ok(SolveResult::Sat(model))
}

fn search(
    depth: usize,
    comp: &[usize],
    domains: &[(i128, i128)],
    checks: &[Vec<&Constraint>],
    model: &mut [i64],
) -> bool {
    if depth == comp.len() {
        return true;
    }
    let atom = comp[depth];
    let (lo, hi) = domains[atom];
    let mut v = lo;
    while v <= hi {
        model[atom] = v as i64;
        if checks[depth].iter().all(|c| c.holds(model))
            && search(depth + 1, comp, domains, checks, model)
        {
            return true;
        }
        v += 1;
    }
    model[atom] = lo as i64;
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symex::expr::ExprRef;

    fn x() -> ExprRef {
        SymExpr::atom(0)
    }

    fn c(v: i64) -> ExprRef {
        SymExpr::constant(v)
    }

    fn cons(e: ExprRef) -> Constraint {
        Constraint::new(e)
    }

    #[test]
    fn sat_smallest_model() {
        // x > 5 and x + 1 == 7
        let pc = [
            cons(SymExpr::bin(BinOp::Gt, x(), c(5))),
            cons(SymExpr::bin(
                BinOp::Eq,
                SymExpr::bin(BinOp::Add, x(), c(1)),
                c(7),
            )),
        ];
        let r = solve_path_condition(&pc, &[Atom::byte("x")], &SolverConfig::default()).unwrap();
        assert_eq!(r, SolveResult::Sat(vec![6]));
    }

    #[test]
    fn unsat_interval() {
        let pc = [
            cons(SymExpr::bin(BinOp::Gt, x(), c(5))),
            cons(SymExpr::bin(BinOp::Lt, x(), c(3))),
        ];
        let r = solve_path_condition(&pc, &[Atom::byte("x")], &SolverConfig::default()).unwrap();
        assert_eq!(r, SolveResult::Unsat);
    }

    #[test]
    fn empty_pc_is_lexicographic_minimum() {
        let r = solve_path_condition(&[], &[Atom::byte("x")], &SolverConfig::default()).unwrap();
        assert_eq!(r, SolveResult::Sat(vec![0]));
    }

    #[test]
    fn negated_comparisons_narrow() {
        // not (x > 5) and x != 0  => x = 1
        let pc = [
            cons(SymExpr::negate(SymExpr::bin(BinOp::Gt, x(), c(5)))),
            cons(x()),
        ];
        let r = solve_path_condition(&pc, &[Atom::byte("x")], &SolverConfig::default()).unwrap();
        assert_eq!(r, SolveResult::Sat(vec![1]));
    }

    #[test]
    fn budget_exceeded_on_large_components() {
        let atoms: Vec<Atom> = (0..4).map(|i| Atom::byte(format!("b{i}"))).collect();
        // b0 + b1 + b2 + b3 == 1000 ties all four atoms together: 2^32 space.
        let sum = (1..4).fold(SymExpr::atom(0), |acc, i| {
            SymExpr::bin(BinOp::Add, acc, SymExpr::atom(i))
        });
        let pc = [cons(SymExpr::bin(BinOp::Eq, sum, c(1000)))];
        let err = solve_path_condition(&pc, &atoms, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolverError::SolverBudgetExceeded { atoms: 4, .. }));
    }

    #[test]
    fn independent_components_scale() {
        // Eight independent single-atom constraints solve without hitting the cap.
        let atoms: Vec<Atom> = (0..8).map(|i| Atom::byte(format!("b{i}"))).collect();
        let pc: Vec<_> = (0..8)
            .map(|i| cons(SymExpr::bin(BinOp::Eq, SymExpr::bin(BinOp::Mod, SymExpr::atom(i), c(7)), c(3))))
            .collect();
        let r = solve_path_condition(&pc, &atoms, &SolverConfig::default()).unwrap();
        assert_eq!(r, SolveResult::Sat(vec![3; 8]));
    }

    #[test]
    fn wrapping_offsets_are_not_narrowed_incorrectly() {
        let atoms = [Atom {
            name: "w".into(),
            lo: i64::MAX - 1,
            hi: i64::MAX,
        }];
        // w + 1 wraps for w = MAX; (w + 1) < 0 holds only there.
        let pc = [cons(SymExpr::bin(
            BinOp::Lt,
            SymExpr::bin(BinOp::Add, SymExpr::atom(0), c(1)),
            c(0),
        ))];
        let r = solve_path_condition(&pc, &atoms, &SolverConfig::default()).unwrap();
        assert_eq!(r, SolveResult::Sat(vec![i64::MAX]));
    }
}
