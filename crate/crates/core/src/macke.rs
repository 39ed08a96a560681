//! Compositional analysis: every function is explored in isolation, then
//! findings are propagated caller by caller over bodies summarised as
//! exploit checks.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::graphs::build_call_graph;
use crate::ir::{
    run_concrete, BinOp, Block, Expr, Function, Instr, IrError, Location, Operand, Param, ParamKind,
    Program, ViolationKind, DEFAULT_BUF_LEN,
};
use crate::sonar::{sonar_explore, Combiner};
use crate::symex::{explore, Budget, ExploreOptions, Strategy, SymexError, Witness};

pub const HARNESS_PREFIX: &str = "__isolate_";
const INPUT: &str = "__input";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MackeError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("exploit for `{function}` does not match its parameters: {message}")]
    ArityMismatch { function: String, message: String },
    #[error("no exploits given for `{0}`")]
    NoExploits(String),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Symex(#[from] SymexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MackeConfig {
    /// Length used for buffer parameters without a declared length.
    pub buf_len: usize,
    /// Exploration budget per isolated function and per phase-2 link.
    pub budget: Budget,
    /// Exploits kept per violation.
    pub exploits_per_violation: usize,
    /// Step budget for concrete confirmation replays.
    pub replay_steps: usize,
}

impl Default for MackeConfig {
    fn default() -> Self {
        MackeConfig {
            buf_len: DEFAULT_BUF_LEN,
            budget: Budget::states(200),
            exploits_per_violation: 8,
            replay_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase", tag = "type", content = "len")]
pub enum SlotKind {
    Int,
    Buf(usize),
}

/// Where one parameter lives in the harness input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Slot {
    pub name: String,
    pub kind: SlotKind,
    pub offset: usize,
}

/// Concrete parameter values triggering a violation. Components listed in
/// `free` were unconstrained on the triggering path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Exploit {
    pub values: BTreeMap<String, ExploitValue>,
    pub free: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(untagged)]
pub enum ExploitValue {
    Int(i64),
    Buf(Vec<i64>),
}

impl Exploit {
    pub fn int(name: &str, v: i64) -> Exploit {
        Exploit {
            values: BTreeMap::from([(name.to_string(), ExploitValue::Int(v))]),
            free: BTreeSet::new(),
        }
    }
}

fn element(name: &str, i: usize) -> String {
    format!("{name}[{i}]")
}

/// A synthetic entry that feeds one function unconstrained arguments.
#[derive(Debug, Clone)]
pub struct Harness {
    pub function: String,
    pub program: Program,
    pub slots: Vec<Slot>,
    pub input_len: usize,
}

impl Harness {
    pub fn entry_name(&self) -> &str {
        self.program.entry()
    }

    pub fn decode(&self, w: &Witness) -> Exploit {
        let constrained: BTreeSet<usize> = w.constrained.iter().copied().collect();
        let byte = |i: usize| w.input.get(i).copied().unwrap_or(0) as i64;
        let mut values = BTreeMap::new();
        let mut free = BTreeSet::new();
        for s in &self.slots {
            match s.kind {
                SlotKind::Int => {
                    values.insert(s.name.clone(), ExploitValue::Int(byte(s.offset)));
                    if !constrained.contains(&s.offset) {
                        free.insert(s.name.clone());
                    }
                }
                SlotKind::Buf(n) => {
                    values.insert(
                        s.name.clone(),
                        ExploitValue::Buf((0..n).map(|i| byte(s.offset + i)).collect()),
                    );
                    for i in 0..n {
                        if !constrained.contains(&(s.offset + i)) {
                            free.insert(element(&s.name, i));
                        }
                    }
                }
            }
        }
        Exploit { values, free }
    }

    /// Harness input for an exploit; free and out-of-range components are 0.
    pub fn encode(&self, e: &Exploit) -> Vec<u8> {
        let mut input = vec![0u8; self.input_len];
        let clamp = |v: i64| v.clamp(0, 255) as u8;
        for s in &self.slots {
            match (s.kind, e.values.get(&s.name)) {
                (SlotKind::Int, Some(ExploitValue::Int(v))) if !e.free.contains(&s.name) => {
                    input[s.offset] = clamp(*v);
                }
                (SlotKind::Buf(n), Some(ExploitValue::Buf(vs))) => {
                    for (i, v) in vs.iter().enumerate().take(n) {
                        if !e.free.contains(&element(&s.name, i)) {
                            input[s.offset + i] = clamp(*v);
                        }
                    }
                }
                _ => {}
            }
        }
        input
    }
}

/// Builds the isolation harness of `f`: each int parameter reads one input
/// byte and each buffer parameter gets a private copy of an input slice.
pub fn isolate_function(p: &Program, f: &str, buf_len: usize) -> Result<Harness, MackeError> {
    let func = p
        .function(f)
        .ok_or_else(|| MackeError::UnknownFunction(f.to_string()))?;
    let mut slots = Vec::new();
    let mut buffers = Vec::new();
    let mut instrs = Vec::new();
    let mut args = Vec::new();
    let mut offset = 0usize;
    for (i, param) in func.params.iter().enumerate() {
        match param.kind {
            ParamKind::Int => {
                let v = format!("__p{i}");
                instrs.push(Instr::Load {
                    dst: v.clone(),
                    buf: INPUT.into(),
                    index: Operand::Const(offset as i64),
                });
                args.push(Operand::var(v));
                slots.push(Slot {
                    name: param.name.clone(),
                    kind: SlotKind::Int,
                    offset,
                });
                offset += 1;
            }
            ParamKind::Buf(declared) => {
                let n = declared.unwrap_or(buf_len);
                let b = format!("__b{i}");
                for j in 0..n {
                    instrs.push(Instr::Load {
                        dst: "__t".into(),
                        buf: INPUT.into(),
                        index: Operand::Const((offset + j) as i64),
                    });
                    instrs.push(Instr::Store {
                        buf: b.clone(),
                        index: Operand::Const(j as i64),
                        value: Operand::var("__t"),
                    });
                }
                buffers.push((b.clone(), n));
                args.push(Operand::var(b));
                slots.push(Slot {
                    name: param.name.clone(),
                    kind: SlotKind::Buf(n),
                    offset,
                });
                offset += n;
            }
        }
    }
    instrs.push(Instr::Call {
        callee: f.to_string(),
        args,
        dst: None,
    });
    instrs.push(Instr::Ret { value: None });
    let params = if offset > 0 {
        vec![Param {
            name: INPUT.into(),
            kind: ParamKind::Buf(Some(offset)),
        }]
    } else {
        Vec::new()
    };
    let entry = Function::new(
        format!("{HARNESS_PREFIX}{f}"),
        params,
        buffers,
        vec![Block {
            label: "entry".into(),
            instrs,
        }],
    );
    Ok(Harness {
        function: f.to_string(),
        program: p.with_entry(entry)?,
        slots,
        input_len: offset,
    })
}

/// Replaces the body of `v` with assertions that fail exactly when the
/// incoming parameters match one of the exploits on its constrained
/// components.
pub fn replace_with_exploit_check(
    p: &Program,
    v: &str,
    exploits: &[Exploit],
) -> Result<Program, MackeError> {
    let func = p
        .function(v)
        .ok_or_else(|| MackeError::UnknownFunction(v.to_string()))?;
    if exploits.is_empty() {
        return Err(MackeError::NoExploits(v.to_string()));
    }
    let mismatch = |message: String| MackeError::ArityMismatch {
        function: v.to_string(),
        message,
    };
    let mut instrs = Vec::new();
    for (k, e) in exploits.iter().enumerate() {
        let names: BTreeSet<&str> = e.values.keys().map(String::as_str).collect();
        let params: BTreeSet<&str> = func.params.iter().map(|p| p.name.as_str()).collect();
        if names != params {
            return Err(mismatch(format!(
                "expected {:?}, found {:?}",
                params, names
            )));
        }
        let mut comparisons: Vec<(Operand, i64)> = Vec::new();
        for param in &func.params {
            match (param.kind, &e.values[&param.name]) {
                (ParamKind::Int, ExploitValue::Int(x)) => {
                    if !e.free.contains(&param.name) {
                        comparisons.push((Operand::var(param.name.clone()), *x));
                    }
                }
                (ParamKind::Buf(_), ExploitValue::Buf(xs)) => {
                    for (j, x) in xs.iter().enumerate() {
                        if e.free.contains(&element(&param.name, j)) {
                            continue;
                        }
                        let t = format!("__x{k}_{}_{j}", param.name);
                        instrs.push(Instr::Load {
                            dst: t.clone(),
                            buf: param.name.clone(),
                            index: Operand::Const(j as i64),
                        });
                        comparisons.push((Operand::var(t), *x));
                    }
                }
                _ => return Err(mismatch(format!("kind of `{}` differs", param.name))),
            }
        }
        let cond = match comparisons.as_slice() {
            [] => Expr::Operand(Operand::Const(0)),
            [(x, c)] => Expr::Binary(BinOp::Ne, x.clone(), Operand::Const(*c)),
            many => {
                let all = format!("__all{k}");
                for (i, (x, c)) in many.iter().enumerate() {
                    let flag = format!("__eq{k}_{i}");
                    instrs.push(Instr::Bin {
                        dst: flag.clone(),
                        op: BinOp::Eq,
                        lhs: x.clone(),
                        rhs: Operand::Const(*c),
                    });
                    let acc = if i == 0 {
                        Operand::Const(1)
                    } else {
                        Operand::var(all.clone())
                    };
                    instrs.push(Instr::Bin {
                        dst: all.clone(),
                        op: BinOp::Mul,
                        lhs: acc,
                        rhs: Operand::var(flag),
                    });
                }
                Expr::Binary(BinOp::Eq, Operand::var(all), Operand::Const(0))
            }
        };
        instrs.push(Instr::Assert { cond });
    }
    instrs.push(Instr::Ret {
        value: func.returns_value().then_some(Operand::Const(0)),
    });
    let replaced = Function::new(
        v.to_string(),
        func.params.clone(),
        Vec::new(),
        vec![Block {
            label: "entry".into(),
            instrs,
        }],
    );
    Ok(p.with_function(replaced)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct VulnRecord {
    pub id: String,
    pub kind: ViolationKind,
    pub root_location: Location,
    /// Function whose harness exposed the violation.
    pub found_in: String,
    /// Parameter assignments of `found_in`.
    pub exploits: Vec<Exploit>,
    pub confirmed_from_entry: bool,
    /// Entry input whose concrete replay triggers the violation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entry_input: Option<Vec<u8>>,
}

/// Callers through which one root violation stays triggerable, outermost
/// first; the last function holds the root location.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ErrorChain {
    pub root_location: Location,
    pub functions: Vec<String>,
}

impl ErrorChain {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

/// Explores every function in isolation. Results are sorted by
/// (root location, finding function), so the schedule does not matter.
pub fn run_phase1(p: &Program, cfg: &MackeConfig) -> Result<Vec<VulnRecord>, MackeError> {
    let names: Vec<String> = p
        .function_names()
        .filter(|n| !n.starts_with("__"))
        .map(str::to_string)
        .collect();
    let opts = ExploreOptions {
        witnesses_per_violation: cfg.exploits_per_violation,
        ..ExploreOptions::default()
    };
    let per_fn: Vec<Result<Vec<VulnRecord>, MackeError>> = names
        .par_iter()
        .map(|f| {
            let h = isolate_function(p, f, cfg.buf_len)?;
            let report = explore(&h.program, &Strategy::Coverage, &cfg.budget, &opts)?;
            Ok(report
                .violations
                .iter()
                .map(|v| VulnRecord {
                    id: String::new(),
                    kind: v.kind,
                    root_location: v.location.clone(),
                    found_in: f.clone(),
                    exploits: v.witnesses.iter().map(|w| h.decode(w)).collect(),
                    confirmed_from_entry: false,
                    entry_input: None,
                })
                .collect())
        })
        .collect();
    let mut records = Vec::new();
    for r in per_fn {
        records.extend(r?);
    }
    sort_and_number(&mut records);
    Ok(records)
}

fn sort_and_number(records: &mut [VulnRecord]) {
    records.sort_by(|a, b| {
        (&a.root_location, &a.found_in, a.kind).cmp(&(&b.root_location, &b.found_in, b.kind))
    });
    for r in records.iter_mut() {
        r.id = format!("{}/{}", r.root_location, r.found_in);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Phase2Result {
    pub records: Vec<VulnRecord>,
    /// Longest chain per root location.
    pub chains: Vec<ErrorChain>,
}

impl Phase2Result {
    pub fn chain_for(&self, root: &Location) -> Option<&ErrorChain> {
        self.chains.iter().find(|c| &c.root_location == root)
    }
}

struct Link {
    root: Location,
    kind: ViolationKind,
    /// Outermost first; the first function is the one `exploits` describe.
    chain: Vec<String>,
    exploits: Vec<Exploit>,
}

/// Propagates phase-1 findings up the call graph and confirms them from the
/// program entry by concrete replay.
pub fn run_phase2(
    p: &Program,
    phase1: &[VulnRecord],
    cfg: &MackeConfig,
) -> Result<Phase2Result, MackeError> {
    let cg = build_call_graph(p);
    let entry = p.entry().to_string();
    let opts = ExploreOptions {
        witnesses_per_violation: cfg.exploits_per_violation,
        ..ExploreOptions::default()
    };
    let mut confirmed: BTreeMap<Location, Vec<u8>> = BTreeMap::new();
    let mut chains: BTreeMap<Location, ErrorChain> = BTreeMap::new();

    let mut try_confirm = |root: &Location, kind: ViolationKind, input: Vec<u8>| {
        if confirmed.contains_key(root) {
            return;
        }
        let out = run_concrete(p, &input, cfg.replay_steps);
        if out.kind.violation() == Some((kind, root)) {
            confirmed.insert(root.clone(), input);
        }
    };
    let entry_harness = isolate_function(p, &entry, cfg.buf_len)?;

    let mut frontier: Vec<Link> = Vec::new();
    for r in phase1 {
        if r.found_in == entry {
            for e in &r.exploits {
                try_confirm(&r.root_location, r.kind, entry_harness.encode(e));
            }
        }
        if r.found_in == r.root_location.function {
            frontier.push(Link {
                root: r.root_location.clone(),
                kind: r.kind,
                chain: vec![r.found_in.clone()],
                exploits: r.exploits.clone(),
            });
        }
    }

    let offer = |chains: &mut BTreeMap<Location, ErrorChain>, root: &Location, chain: &[String]| {
        let candidate = ErrorChain {
            root_location: root.clone(),
            functions: chain.to_vec(),
        };
        match chains.get(root) {
            Some(best)
                if best.len() > candidate.len()
                    || (best.len() == candidate.len() && best.functions <= candidate.functions) => {}
            _ => {
                chains.insert(root.clone(), candidate);
            }
        }
    };
    for link in &frontier {
        offer(&mut chains, &link.root, &link.chain);
    }

    while !frontier.is_empty() {
        let tasks: Vec<(usize, String)> = frontier
            .iter()
            .enumerate()
            .flat_map(|(i, link)| {
                let head = &link.chain[0];
                cg.callers(head)
                    .into_iter()
                    .filter(|f| !link.chain.iter().any(|c| c == f) && !f.starts_with("__"))
                    .map(move |f| (i, f.to_string()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let results: Vec<Result<Option<Link>, MackeError>> = tasks
            .par_iter()
            .map(|(i, caller)| {
                let link = &frontier[*i];
                let head = &link.chain[0];
                let summarised = replace_with_exploit_check(p, head, &link.exploits)?;
                let h = isolate_function(&summarised, caller, cfg.buf_len)?;
                let run = match sonar_explore(&h.program, head, Combiner::Min, &cfg.budget, &opts) {
                    Ok(run) => run,
                    Err(SymexError::TargetUnreachable(_)) => return Ok(None),
                    Err(e) => return Err(e.into()),
                };
                let mut derived: Vec<Exploit> = run
                    .report
                    .violations
                    .iter()
                    .filter(|v| v.kind == ViolationKind::AssertFail && &v.location.function == head)
                    .flat_map(|v| v.witnesses.iter().map(|w| h.decode(w)))
                    .collect();
                derived.sort();
                derived.dedup();
                derived.truncate(cfg.exploits_per_violation.max(1));
                if derived.is_empty() {
                    return Ok(None);
                }
                let mut chain = vec![caller.clone()];
                chain.extend(link.chain.iter().cloned());
                Ok(Some(Link {
                    root: link.root.clone(),
                    kind: link.kind,
                    chain,
                    exploits: derived,
                }))
            })
            .collect();
        let mut next = Vec::new();
        for r in results {
            if let Some(link) = r? {
                offer(&mut chains, &link.root, &link.chain);
                if link.chain[0] == entry {
                    for e in &link.exploits {
                        try_confirm(&link.root, link.kind, entry_harness.encode(e));
                    }
                }
                next.push(link);
            }
        }
        frontier = next;
    }

    let mut records = phase1.to_vec();
    for r in &mut records {
        if let Some(input) = confirmed.get(&r.root_location) {
            r.confirmed_from_entry = true;
            r.entry_input = Some(input.clone());
        }
    }
    Ok(Phase2Result {
        records,
        chains: chains.into_values().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MackeReport {
    pub config: MackeConfig,
    pub records: Vec<VulnRecord>,
    pub chains: Vec<ErrorChain>,
}

/// Both phases.
pub fn run_macke(p: &Program, cfg: &MackeConfig) -> Result<MackeReport, MackeError> {
    let phase1 = run_phase1(p, cfg)?;
    let phase2 = run_phase2(p, &phase1, cfg)?;
    Ok(MackeReport {
        config: *cfg,
        records: phase2.records,
        chains: phase2.chains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, run_concrete, OutcomeKind};

    fn p1() -> Program {
        parse_program(include_str!("../fixtures/p1.ir")).unwrap()
    }

    #[test]
    fn harness_shapes() {
        let p = p1();
        let h = isolate_function(&p, "mid", 8).unwrap();
        assert_eq!(h.input_len, 1);
        assert_eq!(h.entry_name(), "__isolate_mid");
        let h = isolate_function(&p, "main", 8).unwrap();
        assert_eq!(h.slots[0].kind, SlotKind::Buf(2));
        let p2 = parse_program(include_str!("../fixtures/p2.ir")).unwrap();
        let h = isolate_function(&p2, "util", 8).unwrap();
        assert_eq!(h.input_len, 0);
        assert_eq!(h.program.entry_function().instr_count(), 2);
        assert!(matches!(
            isolate_function(&p, "nope", 8),
            Err(MackeError::UnknownFunction(_))
        ));
    }

    #[test]
    fn harness_replays_callee_violation() {
        let h = isolate_function(&p1(), "mid", 8).unwrap();
        let out = run_concrete(&h.program, &[6], 100);
        assert_eq!(
            out.kind.violation(),
            Some((ViolationKind::AssertFail, &Location::new("target", 0)))
        );
    }

    #[test]
    fn exploit_check_single_and_multiple() {
        let p = p1();
        let one = replace_with_exploit_check(&p, "target", &[Exploit::int("c", 7)]).unwrap();
        assert_eq!(
            one.function("target").unwrap().instr(0),
            &Instr::Assert {
                cond: Expr::Binary(BinOp::Ne, Operand::var("c"), Operand::Const(7))
            }
        );
        let two = replace_with_exploit_check(
            &p,
            "target",
            &[Exploit::int("c", 7), Exploit::int("c", 9)],
        )
        .unwrap();
        let h = isolate_function(&two, "target", 8).unwrap();
        for c in 0..=255u8 {
            let violated = run_concrete(&h.program, &[c], 100).kind != OutcomeKind::NormalExit;
            assert_eq!(violated, c == 7 || c == 9, "c = {c}");
        }
    }

    #[test]
    fn exploit_check_buffer_elementwise() {
        let p = parse_program("fn main(input: buf[2])\n  call v(input)\n  ret\n\nfn v(b: buf[2])\n  ret\n").unwrap();
        let e = Exploit {
            values: BTreeMap::from([("b".to_string(), ExploitValue::Buf(vec![3, 4]))]),
            free: BTreeSet::new(),
        };
        let q = replace_with_exploit_check(&p, "v", &[e]).unwrap();
        let loads = q
            .function("v")
            .unwrap()
            .instrs()
            .filter(|(_, i)| matches!(i, Instr::Load { .. }))
            .count();
        assert_eq!(loads, 2);
        for a in 0..=255u8 {
            for b in [0u8, 4, 5] {
                let hit = run_concrete(&q, &[a, b], 100).kind != OutcomeKind::NormalExit;
                assert_eq!(hit, a == 3 && b == 4);
            }
        }
    }

    #[test]
    fn exploit_arity_mismatch() {
        let err = replace_with_exploit_check(&p1(), "target", &[Exploit::int("z", 1)]).unwrap_err();
        assert!(matches!(err, MackeError::ArityMismatch { .. }));
    }

    #[test]
    fn p1_phase1_records() {
        let recs = run_phase1(&p1(), &MackeConfig::default()).unwrap();
        let found: Vec<_> = recs
            .iter()
            .map(|r| (r.root_location.to_string(), r.found_in.as_str()))
            .collect();
        assert_eq!(
            found,
            [
                ("target@0".to_string(), "main"),
                ("target@0".to_string(), "mid"),
                ("target@0".to_string(), "target")
            ]
        );
        assert_eq!(recs[2].exploits[0], Exploit::int("c", 7));
        assert_eq!(recs[1].exploits[0], Exploit::int("a", 6));
        assert_eq!(recs[2].exploits.len(), 1);
    }

    #[test]
    fn p1_chain_reaches_entry() {
        let p = p1();
        let r = run_macke(&p, &MackeConfig::default()).unwrap();
        assert_eq!(r.chains.len(), 1);
        assert_eq!(r.chains[0].functions, ["main", "mid", "target"]);
        assert!(r.records.iter().all(|r| r.confirmed_from_entry));
        assert_eq!(r.records[0].entry_input.as_deref(), Some(&[6u8, 0][..]));
    }

    #[test]
    fn empty_phase1_gives_no_chains() {
        let p = parse_program(include_str!("../fixtures/p2.ir")).unwrap();
        let r = run_macke(&p, &MackeConfig::default()).unwrap();
        assert!(r.records.is_empty());
        assert!(r.chains.is_empty());
    }
}
