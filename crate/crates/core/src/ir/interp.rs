//! Concrete interpreter: wrapping 64-bit integers, bounds-checked buffers.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Expr, Function, Instr, Location, Operand, ParamKind, Program};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    AssertFail,
    OutOfBounds,
    DivByZero,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum OutcomeKind {
    NormalExit,
    Violation {
        violation: ViolationKind,
        location: Location,
    },
    BudgetExhausted,
}

impl OutcomeKind {
    pub fn violation(&self) -> Option<(ViolationKind, &Location)> {
        match self {
            OutcomeKind::Violation {
                violation,
                location,
            } => Some((*violation, location)),
            _ => None,
        }
    }
}

/// Intra-function control transfer between blocks. `from` is `None` for the
/// transfer into the entry block when the function is called.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockEdge {
    pub function: String,
    pub from: Option<String>,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub kind: OutcomeKind,
    /// Executed instructions in order; empty unless tracing was requested.
    pub trace: Vec<Location>,
    pub steps: usize,
    pub covered_functions: BTreeSet<String>,
    pub edges: BTreeSet<BlockEdge>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub step_budget: usize,
    pub record_trace: bool,
}

struct Frame<'p> {
    fid: usize,
    func: &'p Function,
    pc: usize,
    ints: HashMap<&'p str, i64>,
    bufs: HashMap<&'p str, usize>,
    ret_dst: Option<&'p str>,
}

impl<'p> Frame<'p> {
    fn operand(&self, o: &Operand) -> i64 {
        match o {
            Operand::Const(c) => *c,
            Operand::Var(v) => self.ints.get(v.as_str()).copied().unwrap_or(0),
        }
    }

    /// `None` signals division by zero.
    fn expr(&self, e: &Expr) -> Option<i64> {
        match e {
            Expr::Operand(o) => Some(self.operand(o)),
            Expr::Binary(op, a, b) => op.eval(self.operand(a), self.operand(b)),
        }
    }
}

fn new_frame<'p>(
    program: &'p Program,
    memory: &mut Vec<Vec<i64>>,
    fid: usize,
    ints: impl IntoIterator<Item = (&'p str, i64)>,
    bufs: impl IntoIterator<Item = (&'p str, usize)>,
    ret_dst: Option<&'p str>,
) -> Frame<'p> {
    let func = &program.functions()[fid];
    let mut bufs: HashMap<&'p str, usize> = bufs.into_iter().collect();
    for (name, len) in &func.buffers {
        memory.push(vec![0; *len]);
        bufs.insert(name.as_str(), memory.len() - 1);
    }
    Frame {
        fid,
        func,
        pc: 0,
        ints: ints.into_iter().collect(),
        bufs,
        ret_dst,
    }
}

/// Runs the program's entry on `input` for at most `step_budget`
/// instruction executions, recording the full trace.
pub fn run_concrete(program: &Program, input: &[u8], step_budget: usize) -> Outcome {
    run_concrete_with(
        program,
        input,
        RunOptions {
            step_budget,
            record_trace: true,
        },
    )
}

pub fn run_concrete_with(program: &Program, input: &[u8], opts: RunOptions) -> Outcome {
    let mut memory: Vec<Vec<i64>> = Vec::new();
    let entry_id = program.function_id(program.entry()).expect("validated entry");
    let entry = &program.functions()[entry_id];
    let mut entry_bufs = Vec::new();
    if let Some(p) = entry.params.first() {
        debug_assert!(matches!(p.kind, ParamKind::Buf(_)));
        let len = program.entry_input_len();
        let mut data = vec![0i64; len];
        for (slot, b) in data.iter_mut().zip(input) {
            *slot = *b as i64;
        }
        memory.push(data);
        entry_bufs.push((p.name.as_str(), 0));
    }

    let mut trace = Vec::new();
    let mut covered = BTreeSet::new();
    let mut edges = BTreeSet::new();
    let mut raw_edges: BTreeSet<(usize, Option<usize>, usize)> = BTreeSet::new();
    raw_edges.insert((entry_id, None, 0));

    let mut stack = vec![new_frame(
        program,
        &mut memory,
        entry_id,
        [],
        entry_bufs,
        None,
    )];
    let mut steps = 0usize;

    let kind = loop {
        if steps >= opts.step_budget {
            break OutcomeKind::BudgetExhausted;
        }
        let frame = stack.last_mut().expect("active frame");
        let func = frame.func;
        let idx = frame.pc;
        let instr = func.instr(idx);
        steps += 1;
        covered.insert(frame.fid);
        if opts.record_trace {
            trace.push(Location::new(func.name.clone(), idx));
        }
        let violation = |kind| OutcomeKind::Violation {
            violation: kind,
            location: Location::new(func.name.clone(), idx),
        };

        let mut jump_to: Option<usize> = None;
        match instr {
            Instr::Const { dst, value } => {
                frame.ints.insert(dst.as_str(), *value);
            }
            Instr::Bin { dst, op, lhs, rhs } => {
                match op.eval(frame.operand(lhs), frame.operand(rhs)) {
                    Some(v) => {
                        frame.ints.insert(dst.as_str(), v);
                    }
                    None => break violation(ViolationKind::DivByZero),
                }
            }
            Instr::Load { dst, buf, index } => {
                let b = frame.bufs[buf.as_str()];
                let i = frame.operand(index);
                if i < 0 || i as usize >= memory[b].len() {
                    break violation(ViolationKind::OutOfBounds);
                }
                let v = memory[b][i as usize];
                frame.ints.insert(dst.as_str(), v);
            }
            Instr::Store { buf, index, value } => {
                let b = frame.bufs[buf.as_str()];
                let i = frame.operand(index);
                if i < 0 || i as usize >= memory[b].len() {
                    break violation(ViolationKind::OutOfBounds);
                }
                memory[b][i as usize] = frame.operand(value);
            }
            Instr::Br {
                cond,
                then_label,
                else_label,
            } => {
                let Some(c) = frame.expr(cond) else {
                    break violation(ViolationKind::DivByZero);
                };
                let label = if c != 0 { then_label } else { else_label };
                jump_to = Some(func.block_start(label).expect("validated label"));
            }
            Instr::Jmp { label } => {
                jump_to = Some(func.block_start(label).expect("validated label"));
            }
            Instr::Assert { cond } => match frame.expr(cond) {
                None => break violation(ViolationKind::DivByZero),
                Some(0) => break violation(ViolationKind::AssertFail),
                Some(_) => {}
            },
            Instr::Call { callee, args, dst } => {
                let cid = program.function_id(callee).expect("validated callee");
                let target = &program.functions()[cid];
                let mut ints = Vec::new();
                let mut bufs = Vec::new();
                for (p, a) in target.params.iter().zip(args) {
                    match (p.kind, a) {
                        (ParamKind::Int, a) => ints.push((p.name.as_str(), frame.operand(a))),
                        (ParamKind::Buf(_), Operand::Var(v)) => {
                            bufs.push((p.name.as_str(), frame.bufs[v.as_str()]))
                        }
                        (ParamKind::Buf(_), Operand::Const(_)) => unreachable!("validated"),
                    }
                }
                let next = idx + 1;
                record_fallthrough(&mut raw_edges, frame.fid, func, idx, next);
                frame.pc = next;
                let callee_frame =
                    new_frame(program, &mut memory, cid, ints, bufs, dst.as_deref());
                raw_edges.insert((cid, None, 0));
                stack.push(callee_frame);
                continue;
            }
            Instr::Ret { value } => {
                let v = value.as_ref().map(|o| frame.operand(o)).unwrap_or(0);
                let done = stack.pop().expect("active frame");
                match stack.last_mut() {
                    None => break OutcomeKind::NormalExit,
                    Some(caller) => {
                        if let Some(d) = done.ret_dst {
                            caller.ints.insert(d, v);
                        }
                    }
                }
                continue;
            }
        }

        let frame = stack.last_mut().expect("active frame");
        match jump_to {
            Some(target) => {
                raw_edges.insert((
                    frame.fid,
                    Some(func.block_index_of(idx)),
                    func.block_index_of(target),
                ));
                frame.pc = target;
            }
            None => {
                record_fallthrough(&mut raw_edges, frame.fid, func, idx, idx + 1);
                frame.pc = idx + 1;
            }
        }
    };

    let names = |fid: usize| program.functions()[fid].name.clone();
    for (fid, from, to) in raw_edges {
        let f = &program.functions()[fid];
        edges.insert(BlockEdge {
            function: f.name.clone(),
            from: from.map(|b| f.blocks()[b].label.clone()),
            to: f.blocks()[to].label.clone(),
        });
    }
    Outcome {
        kind,
        trace,
        steps,
        covered_functions: covered.into_iter().map(names).collect(),
        edges,
    }
}

fn record_fallthrough(
    edges: &mut BTreeSet<(usize, Option<usize>, usize)>,
    fid: usize,
    func: &Function,
    from: usize,
    to: usize,
) {
    if to < func.instr_count() {
        let (a, b) = (func.block_index_of(from), func.block_index_of(to));
        if a != b {
            edges.insert((fid, Some(a), b));
        }
    }
}
