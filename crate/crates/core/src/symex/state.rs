use std::collections::HashMap;

use super::expr::{Atom, Constraint, SymExpr, Value};
use super::solver::{solve_path_condition, SolveResult, SolverConfig, SolverError};
use crate::ir::{BinOp, Expr, Instr, Location, Operand, OutcomeKind, ParamKind, Program, ViolationKind};

/// Loads and stores with a symbolic index are split per slot only up to
/// this buffer length; larger buffers drop the state.
pub const MAX_SYMBOLIC_STORE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymFrame {
    pub fid: usize,
    /// Next instruction; for a suspended caller, the resume point.
    pub pc: usize,
    pub ints: HashMap<String, Value>,
    pub bufs: HashMap<String, usize>,
    pub ret_dst: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Active,
    Terminated(OutcomeKind),
    /// Dropped by the search strategy without executing.
    Pruned,
}

#[derive(Debug, Clone)]
pub struct ExecState {
    pub id: u64,
    pub parent: Option<u64>,
    pub frames: Vec<SymFrame>,
    pub memory: Vec<Vec<Value>>,
    pub path: Vec<Constraint>,
    /// Smallest model of `path`; valid because the path only grows at forks.
    pub model: Vec<i64>,
    pub steps: usize,
    pub status: Status,
}

impl ExecState {
    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }

    pub fn top(&self) -> &SymFrame {
        self.frames.last().expect("active state has a frame")
    }

    /// Location of the next instruction, or of the last frame for a
    /// terminated state.
    pub fn location(&self, p: &Program) -> Option<Location> {
        let f = self.frames.last()?;
        Some(Location::new(p.functions()[f.fid].name.clone(), f.pc))
    }

    /// Call stack, outermost first.
    pub fn stack(&self, p: &Program) -> Vec<Location> {
        self.frames
            .iter()
            .map(|f| Location::new(p.functions()[f.fid].name.clone(), f.pc))
            .collect()
    }

    /// Atoms mentioned by the path condition.
    pub fn constrained_atoms(&self) -> Vec<usize> {
        let set: std::collections::BTreeSet<usize> =
            self.path.iter().flat_map(|c| c.atoms.iter().copied()).collect();
        set.into_iter().collect()
    }

    /// The model as entry-input bytes.
    pub fn input(&self) -> Vec<u8> {
        model_bytes(&self.model)
    }
}

pub fn model_bytes(model: &[i64]) -> Vec<u8> {
    model.iter().map(|&v| v.clamp(0, 255) as u8).collect()
}

#[derive(Debug, Default)]
pub struct Stepped {
    pub children: Vec<ExecState>,
    pub solver_failures: u64,
    /// The state forked: children carry fresh ids.
    pub forked: bool,
}

enum Effect {
    Assign(String, Value),
    Store(usize, usize, Value),
    Jump(usize),
    Next,
    Fail(ViolationKind),
    /// Not explored; counted as a solver failure.
    Drop,
}

struct Branch {
    constraints: Vec<Constraint>,
    effect: Effect,
}

impl Branch {
    fn plain(effect: Effect) -> Self {
        Branch {
            constraints: Vec::new(),
            effect,
        }
    }
}

/// Steps symbolic states of one program. Owns the atom table and the id
/// counter.
pub struct Executor<'p> {
    pub program: &'p Program,
    pub atoms: Vec<Atom>,
    pub solver: SolverConfig,
    pub max_steps: usize,
    next_id: u64,
}

impl<'p> Executor<'p> {
    pub fn new(program: &'p Program, solver: SolverConfig, max_steps: usize) -> Self {
        let entry = program.entry_function();
        let atoms = match entry.params.first() {
            Some(param) => (0..program.entry_input_len())
                .map(|i| Atom::byte(format!("{}[{i}]", param.name)))
                .collect(),
            None => Vec::new(),
        };
        Executor {
            program,
            atoms,
            solver,
            max_steps,
            next_id: 0,
        }
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn initial_state(&mut self) -> ExecState {
        let p = self.program;
        let fid = p.function_id(p.entry()).expect("validated entry");
        let mut memory = Vec::new();
        let mut bufs = HashMap::new();
        if let Some(param) = p.entry_function().params.first() {
            memory.push(
                (0..self.atoms.len())
                    .map(|i| Value::Symbolic(SymExpr::atom(i)))
                    .collect(),
            );
            bufs.insert(param.name.clone(), 0);
        }
        let frame = self.new_frame(&mut memory, fid, HashMap::new(), bufs, None);
        let id = self.fresh_id();
        ExecState {
            id,
            parent: None,
            frames: vec![frame],
            memory,
            path: Vec::new(),
            model: self.atoms.iter().map(|a| a.lo).collect(),
            steps: 0,
            status: Status::Active,
        }
    }

    fn new_frame(
        &self,
        memory: &mut Vec<Vec<Value>>,
        fid: usize,
        ints: HashMap<String, Value>,
        mut bufs: HashMap<String, usize>,
        ret_dst: Option<String>,
    ) -> SymFrame {
        for (name, len) in &self.program.functions()[fid].buffers {
            memory.push(vec![Value::Concrete(0); *len]);
            bufs.insert(name.clone(), memory.len() - 1);
        }
        SymFrame {
            fid,
            pc: 0,
            ints,
            bufs,
            ret_dst,
        }
    }

    pub fn solve(&self, path: &[Constraint]) -> Result<SolveResult, SolverError> {
        solve_path_condition(path, &self.atoms, &self.solver)
    }

    /// Executes the next instruction of an active state.
    pub fn step_state(&mut self, mut s: ExecState) -> Stepped {
        debug_assert!(s.is_active());
        if s.steps >= self.max_steps {
            s.status = Status::Terminated(OutcomeKind::BudgetExhausted);
            return Stepped {
                children: vec![s],
                ..Stepped::default()
            };
        }
        let p = self.program;
        s.steps += 1;
        let frame = s.top();
        let func = &p.functions()[frame.fid];
        let idx = frame.pc;
        let instr = func.instr(idx);

        let branches: Vec<Branch> = match instr {
            Instr::Const { dst, value } => {
                vec![Branch::plain(Effect::Assign(dst.clone(), Value::Concrete(*value)))]
            }
            Instr::Bin { dst, op, lhs, rhs } => {
                let (a, b) = (operand(frame, lhs), operand(frame, rhs));
                binary(*op, &a, &b)
                    .into_iter()
                    .map(|(constraints, r)| Branch {
                        constraints,
                        effect: match r {
                            Ok(v) => Effect::Assign(dst.clone(), v),
                            Err(k) => Effect::Fail(k),
                        },
                    })
                    .collect()
            }
            Instr::Load { dst, buf, index } => {
                let b = frame.bufs[buf.as_str()];
                let data = &s.memory[b];
                match operand(frame, index) {
                    Value::Concrete(i) => match slot(i, data.len()) {
                        Some(i) => vec![Branch::plain(Effect::Assign(dst.clone(), data[i].clone()))],
                        None => vec![Branch::plain(Effect::Fail(ViolationKind::OutOfBounds))],
                    },
                    Value::Symbolic(ix) => {
                        let n = data.len() as i64;
                        let mut value = SymExpr::constant(0);
                        for (i, v) in data.iter().enumerate().rev() {
                            let hit = SymExpr::bin(BinOp::Eq, ix.clone(), SymExpr::constant(i as i64));
                            value = SymExpr::ite(hit, v.expr(), value);
                        }
                        vec![
                            Branch {
                                constraints: in_bounds(&ix, n),
                                effect: Effect::Assign(dst.clone(), Value::from_expr(value)),
                            },
                            Branch {
                                constraints: vec![out_of_bounds(&ix, n)],
                                effect: Effect::Fail(ViolationKind::OutOfBounds),
                            },
                        ]
                    }
                }
            }
            Instr::Store { buf, index, value } => {
                let b = frame.bufs[buf.as_str()];
                let len = s.memory[b].len();
                let v = operand(frame, value);
                match operand(frame, index) {
                    Value::Concrete(i) => match slot(i, len) {
                        Some(i) => vec![Branch::plain(Effect::Store(b, i, v))],
                        None => vec![Branch::plain(Effect::Fail(ViolationKind::OutOfBounds))],
                    },
                    Value::Symbolic(ix) => {
                        let mut out = vec![Branch {
                            constraints: vec![out_of_bounds(&ix, len as i64)],
                            effect: Effect::Fail(ViolationKind::OutOfBounds),
                        }];
                        if len > MAX_SYMBOLIC_STORE_LEN {
                            out.push(Branch::plain(Effect::Drop));
                        } else {
                            for i in 0..len {
                                out.push(Branch {
                                    constraints: vec![Constraint::new(SymExpr::bin(
                                        BinOp::Eq,
                                        ix.clone(),
                                        SymExpr::constant(i as i64),
                                    ))],
                                    effect: Effect::Store(b, i, v.clone()),
                                });
                            }
                        }
                        out
                    }
                }
            }
            Instr::Br {
                cond,
                then_label,
                else_label,
            } => {
                let t = func.block_start(then_label).expect("validated label");
                let e = func.block_start(else_label).expect("validated label");
                let mut out = Vec::new();
                for (mut constraints, r) in condition(frame, cond) {
                    match r {
                        Err(k) => out.push(Branch {
                            constraints,
                            effect: Effect::Fail(k),
                        }),
                        Ok(Value::Concrete(c)) => out.push(Branch {
                            constraints,
                            effect: Effect::Jump(if c != 0 { t } else { e }),
                        }),
                        Ok(Value::Symbolic(c)) => {
                            let mut other = constraints.clone();
                            constraints.push(Constraint::new(c.clone()));
                            other.push(Constraint::new(SymExpr::negate(c)));
                            out.push(Branch {
                                constraints,
                                effect: Effect::Jump(t),
                            });
                            out.push(Branch {
                                constraints: other,
                                effect: Effect::Jump(e),
                            });
                        }
                    }
                }
                out
            }
            Instr::Jmp { label } => {
                vec![Branch::plain(Effect::Jump(
                    func.block_start(label).expect("validated label"),
                ))]
            }
            Instr::Assert { cond } => {
                let mut out = Vec::new();
                for (mut constraints, r) in condition(frame, cond) {
                    match r {
                        Err(k) => out.push(Branch {
                            constraints,
                            effect: Effect::Fail(k),
                        }),
                        Ok(Value::Concrete(c)) => out.push(Branch {
                            constraints,
                            effect: if c != 0 {
                                Effect::Next
                            } else {
                                Effect::Fail(ViolationKind::AssertFail)
                            },
                        }),
                        Ok(Value::Symbolic(c)) => {
                            let mut fail = constraints.clone();
                            constraints.push(Constraint::new(c.clone()));
                            fail.push(Constraint::new(SymExpr::negate(c)));
                            out.push(Branch {
                                constraints,
                                effect: Effect::Next,
                            });
                            out.push(Branch {
                                constraints: fail,
                                effect: Effect::Fail(ViolationKind::AssertFail),
                            });
                        }
                    }
                }
                out
            }
            Instr::Call { callee, args, dst } => {
                let cid = p.function_id(callee).expect("validated callee");
                let target = &p.functions()[cid];
                let mut ints = HashMap::new();
                let mut bufs = HashMap::new();
                for (param, a) in target.params.iter().zip(args) {
                    match (param.kind, a) {
                        (ParamKind::Int, a) => {
                            ints.insert(param.name.clone(), operand(frame, a));
                        }
                        (ParamKind::Buf(_), Operand::Var(v)) => {
                            bufs.insert(param.name.clone(), frame.bufs[v.as_str()]);
                        }
                        (ParamKind::Buf(_), Operand::Const(_)) => unreachable!("validated"),
                    }
                }
                let dst = dst.clone();
                s.frames.last_mut().expect("frame").pc = idx + 1;
                let callee_frame = self.new_frame(&mut s.memory, cid, ints, bufs, dst);
                s.frames.push(callee_frame);
                return Stepped {
                    children: vec![s],
                    ..Stepped::default()
                };
            }
            Instr::Ret { value } => {
                let v = value
                    .as_ref()
                    .map(|o| operand(frame, o))
                    .unwrap_or(Value::Concrete(0));
                let done = s.frames.pop().expect("frame");
                match s.frames.last_mut() {
                    None => {
                        s.frames.push(done);
                        s.status = Status::Terminated(OutcomeKind::NormalExit);
                    }
                    Some(caller) => {
                        if let Some(d) = done.ret_dst {
                            caller.ints.insert(d, v);
                        }
                    }
                }
                return Stepped {
                    children: vec![s],
                    ..Stepped::default()
                };
            }
        };

        let location = Location::new(func.name.clone(), idx);
        self.realise(s, branches, location)
    }

    fn realise(&mut self, s: ExecState, branches: Vec<Branch>, location: Location) -> Stepped {
        let mut out = Stepped::default();
        let mut feasible = Vec::new();
        for branch in branches {
            if matches!(branch.effect, Effect::Drop) {
                out.solver_failures += 1;
                continue;
            }
            if branch.constraints.is_empty() {
                feasible.push((branch, None));
                continue;
            }
            let mut path = s.path.clone();
            path.extend(branch.constraints.iter().cloned());
            match self.solve(&path) {
                Ok(SolveResult::Sat(model)) => feasible.push((branch, Some((path, model)))),
                Ok(SolveResult::Unsat) => {}
                Err(_) => out.solver_failures += 1,
            }
        }
        out.forked = feasible.len() > 1;
        let parent_id = s.id;
        for (branch, solved) in feasible {
            let mut child = s.clone();
            if let Some((path, model)) = solved {
                child.path = path;
                child.model = model;
            }
            if out.forked {
                child.id = self.fresh_id();
                child.parent = Some(parent_id);
            }
            let frame = child.frames.last_mut().expect("frame");
            match branch.effect {
                Effect::Assign(dst, v) => {
                    frame.ints.insert(dst, v);
                    frame.pc += 1;
                }
                Effect::Store(b, i, v) => {
                    child.memory[b][i] = v;
                    frame.pc += 1;
                }
                Effect::Jump(t) => frame.pc = t,
                Effect::Next => frame.pc += 1,
                Effect::Drop => unreachable!("dropped before solving"),
                Effect::Fail(kind) => {
                    child.status = Status::Terminated(OutcomeKind::Violation {
                        violation: kind,
                        location: location.clone(),
                    });
                }
            }
            out.children.push(child);
        }
        out
    }
}

fn operand(frame: &SymFrame, o: &Operand) -> Value {
    match o {
        Operand::Const(c) => Value::Concrete(*c),
        Operand::Var(v) => frame.ints.get(v).cloned().unwrap_or(Value::Concrete(0)),
    }
}

fn slot(i: i64, len: usize) -> Option<usize> {
    (i >= 0 && (i as u64) < len as u64).then_some(i as usize)
}

fn in_bounds(ix: &super::expr::ExprRef, len: i64) -> Vec<Constraint> {
    vec![
        Constraint::new(SymExpr::bin(BinOp::Ge, ix.clone(), SymExpr::constant(0))),
        Constraint::new(SymExpr::bin(BinOp::Lt, ix.clone(), SymExpr::constant(len))),
    ]
}

fn out_of_bounds(ix: &super::expr::ExprRef, len: i64) -> Constraint {
    Constraint::new(SymExpr::ite(
        SymExpr::bin(BinOp::Lt, ix.clone(), SymExpr::constant(0)),
        SymExpr::constant(1),
        SymExpr::bin(BinOp::Ge, ix.clone(), SymExpr::constant(len)),
    ))
}

type Outcomes = Vec<(Vec<Constraint>, Result<Value, ViolationKind>)>;

/// All outcomes of `a op b`, split on a symbolic divisor.
fn binary(op: BinOp, a: &Value, b: &Value) -> Outcomes {
    if !op.is_division() {
        return vec![(Vec::new(), Ok(Value::bin(op, a, b)))];
    }
    match b {
        Value::Concrete(0) => vec![(Vec::new(), Err(ViolationKind::DivByZero))],
        Value::Concrete(_) => vec![(Vec::new(), Ok(Value::bin(op, a, b)))],
        Value::Symbolic(d) => vec![
            (
                vec![Constraint::new(d.clone())],
                Ok(Value::bin(op, a, b)),
            ),
            (
                vec![Constraint::new(SymExpr::negate(d.clone()))],
                Err(ViolationKind::DivByZero),
            ),
        ],
    }
}

fn condition(frame: &SymFrame, e: &Expr) -> Outcomes {
    match e {
        Expr::Operand(o) => vec![(Vec::new(), Ok(operand(frame, o)))],
        Expr::Binary(op, a, b) => binary(*op, &operand(frame, a), &operand(frame, b)),
    }
}
