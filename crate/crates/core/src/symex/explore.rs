use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use super::expr::{Constraint, SymExpr};
use super::search::{BfsSearcher, CoverageSearcher, DfsSearcher, RandomSearcher, SearchView, Searcher};
use super::solver::{SolveResult, SolverConfig};
use super::state::{model_bytes, ExecState, Executor, Status};
use crate::graphs::GraphError;
use crate::ir::{BinOp, Location, OutcomeKind, Program, ViolationKind};
use crate::munch::{detect_saturation, TimelineEntry};
use crate::sonar::{sonar_explore, Combiner};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SymexError {
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("unknown target function `{0}`")]
    UnknownTarget(String),
    #[error("target `{0}` is unreachable from the initial state")]
    TargetUnreachable(String),
}

impl From<GraphError> for SymexError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::UnknownTarget(t) => SymexError::UnknownTarget(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    Dfs,
    Bfs,
    Random { seed: u64 },
    Coverage,
    Sonar { target: String, combiner: Combiner },
}

impl Strategy {
    /// Parses a strategy name; `sonar` needs a target and `random` uses `seed`.
    pub fn parse(name: &str, target: Option<&str>, seed: u64) -> Result<Strategy, SymexError> {
        match name {
            "dfs" => Ok(Strategy::Dfs),
            "bfs" => Ok(Strategy::Bfs),
            "random" => Ok(Strategy::Random { seed }),
            "coverage" => Ok(Strategy::Coverage),
            "sonar" => match target {
                Some(t) => Ok(Strategy::Sonar {
                    target: t.to_string(),
                    combiner: Combiner::Min,
                }),
                None => Err(SymexError::UnknownTarget(String::new())),
            },
            other => Err(SymexError::UnknownStrategy(other.to_string())),
        }
    }
}

impl FromStr for Strategy {
    type Err = SymexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::parse(s, None, 0)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Dfs => write!(f, "dfs"),
            Strategy::Bfs => write!(f, "bfs"),
            Strategy::Random { seed } => write!(f, "random({seed})"),
            Strategy::Coverage => write!(f, "coverage"),
            Strategy::Sonar { target, .. } => write!(f, "sonar({target})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Budget {
    /// State selections (one instruction each).
    pub max_states: u64,
    /// Instructions along any single path.
    pub max_steps: usize,
    /// 0 disables the wall-clock limit.
    pub wall_millis: u64,
}

impl Budget {
    pub fn states(max_states: u64) -> Self {
        Budget {
            max_states,
            ..Budget::default()
        }
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_states: 10_000,
            max_steps: 10_000,
            wall_millis: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExploreOptions {
    pub solver: SolverConfig,
    /// Distinct models collected per violation.
    pub witnesses_per_violation: usize,
    /// Stop once no new function was covered within this many states.
    pub saturation_window: Option<u64>,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        ExploreOptions {
            solver: SolverConfig::default(),
            witnesses_per_violation: 1,
            saturation_window: None,
        }
    }
}

/// A concrete input reaching a violation, with the input positions the path
/// condition actually constrains.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Witness {
    pub input: Vec<u8>,
    pub constrained: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ViolationRecord {
    pub kind: ViolationKind,
    pub location: Location,
    /// Function names, outermost first, at the faulting instruction.
    pub call_stack: Vec<String>,
    pub witnesses: Vec<Witness>,
    /// States executed when the violation was first found.
    pub found_after_states: u64,
}

impl ViolationRecord {
    pub fn input(&self) -> &[u8] {
        &self.witnesses[0].input
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExplorationReport {
    pub strategy: String,
    pub budget: Budget,
    pub states_explored: u64,
    pub states_pruned: u64,
    pub solver_failures: u64,
    pub budget_exhausted: bool,
    pub saturated: bool,
    pub violations: Vec<ViolationRecord>,
    pub covered_functions: BTreeSet<String>,
    pub test_inputs: Vec<Vec<u8>>,
    pub timeline: Vec<TimelineEntry>,
}

impl ExplorationReport {
    pub fn violation_keys(&self) -> BTreeSet<(ViolationKind, Location)> {
        self.violations
            .iter()
            .map(|v| (v.kind, v.location.clone()))
            .collect()
    }
}

/// Bookkeeping that stays out of the serialized report.
#[derive(Debug, Clone, Default)]
pub struct ExplorationTrace {
    /// Call stacks (outermost first) of pruned states.
    pub pruned_stacks: Vec<Vec<Location>>,
    /// States executed before control first sat at each function's entry.
    pub arrivals: BTreeMap<String, u64>,
    /// Whether the very first state was pruned.
    pub initial_pruned: bool,
}

#[derive(Debug, Clone)]
pub struct Exploration {
    pub report: ExplorationReport,
    pub trace: ExplorationTrace,
}

/// Explores `p` from its entry under one of the built-in strategies.
pub fn explore(
    p: &Program,
    strategy: &Strategy,
    budget: &Budget,
    opts: &ExploreOptions,
) -> Result<ExplorationReport, SymexError> {
    let mut searcher: Box<dyn Searcher> = match strategy {
        Strategy::Dfs => Box::new(DfsSearcher::default()),
        Strategy::Bfs => Box::new(BfsSearcher::default()),
        Strategy::Random { seed } => Box::new(RandomSearcher::new(*seed)),
        Strategy::Coverage => Box::new(CoverageSearcher::default()),
        Strategy::Sonar { target, combiner } => {
            return sonar_explore(p, target, *combiner, budget, opts).map(|e| e.report)
        }
    };
    Ok(explore_with(p, searcher.as_mut(), budget, opts).report)
}

/// Runs the exploration loop with a caller-supplied searcher.
pub fn explore_with(
    p: &Program,
    searcher: &mut dyn Searcher,
    budget: &Budget,
    opts: &ExploreOptions,
) -> Exploration {
    let started = Instant::now();
    let mut ex = Executor::new(p, opts.solver, budget.max_steps);
    let mut covered_instrs: HashSet<(usize, usize)> = HashSet::new();
    let mut covered_fns: BTreeSet<usize> = BTreeSet::new();
    let mut timeline: Vec<TimelineEntry> = Vec::new();
    let mut trace = ExplorationTrace::default();
    let mut violations: BTreeMap<(Location, ViolationKind), ViolationRecord> = BTreeMap::new();
    let mut test_inputs: Vec<Vec<u8>> = Vec::new();
    let mut seen_inputs: HashSet<Vec<u8>> = HashSet::new();
    let mut executed = 0u64;
    let mut pruned = 0u64;
    let mut solver_failures = 0u64;
    let mut path_budget_hit = false;
    let mut saturated = false;

    let init = ex.initial_state();
    note_arrival(p, &init, executed, &mut trace.arrivals);
    let view = SearchView {
        program: p,
        covered: &covered_instrs,
    };
    if let Some(s) = searcher.push(init, &view) {
        pruned += 1;
        trace.initial_pruned = true;
        trace.pruned_stacks.push(s.stack(p));
    }

    let mut stopped_early = false;
    loop {
        if executed >= budget.max_states {
            stopped_early = !searcher.is_empty();
            break;
        }
        if budget.wall_millis > 0 && started.elapsed().as_millis() as u64 >= budget.wall_millis {
            stopped_early = !searcher.is_empty();
            break;
        }
        if let Some(window) = opts.saturation_window {
            if executed >= window && detect_saturation(&timeline, executed, window) {
                saturated = !searcher.is_empty();
                break;
            }
        }
        let view = SearchView {
            program: p,
            covered: &covered_instrs,
        };
        let Some(s) = searcher.pop(&view) else {
            break;
        };
        let top = s.top();
        covered_instrs.insert((top.fid, top.pc));
        if covered_fns.insert(top.fid) {
            timeline.push(TimelineEntry {
                index: executed,
                functions: vec![p.functions()[top.fid].name.clone()],
            });
        }
        executed += 1;

        let stepped = ex.step_state(s);
        solver_failures += stepped.solver_failures;
        let mut active = Vec::new();
        for child in stepped.children {
            match &child.status {
                Status::Active => {
                    note_arrival(p, &child, executed, &mut trace.arrivals);
                    active.push(child);
                }
                Status::Pruned => {}
                Status::Terminated(kind) => {
                    if *kind == OutcomeKind::BudgetExhausted {
                        path_budget_hit = true;
                    }
                    let input = child.input();
                    if seen_inputs.insert(input.clone()) {
                        test_inputs.push(input);
                    }
                    if let Some((vk, loc)) = kind.violation() {
                        record_violation(
                            &ex,
                            &child,
                            vk,
                            loc.clone(),
                            executed,
                            opts.witnesses_per_violation,
                            &mut violations,
                        );
                    }
                }
            }
        }
        let view = SearchView {
            program: p,
            covered: &covered_instrs,
        };
        for s in searcher.push_children(active, &view) {
            pruned += 1;
            trace.pruned_stacks.push(s.stack(p));
        }
    }

    let report = ExplorationReport {
        strategy: searcher.label(),
        budget: *budget,
        states_explored: executed,
        states_pruned: pruned,
        solver_failures,
        budget_exhausted: stopped_early || path_budget_hit,
        saturated,
        violations: violations.into_values().collect(),
        covered_functions: covered_fns
            .into_iter()
            .map(|f| p.functions()[f].name.clone())
            .filter(|n| !n.starts_with("__"))
            .collect(),
        test_inputs,
        timeline,
    };
    Exploration { report, trace }
}

fn note_arrival(p: &Program, s: &ExecState, executed: u64, arrivals: &mut BTreeMap<String, u64>) {
    let top = s.top();
    if top.pc == 0 {
        arrivals
            .entry(p.functions()[top.fid].name.clone())
            .or_insert(executed);
    }
}

/// Blocks one model over the given atoms.
fn blocking_clause(model: &[i64], atoms: &[usize]) -> Constraint {
    let conj = atoms
        .iter()
        .map(|&a| {
            SymExpr::bin(
                BinOp::Eq,
                SymExpr::atom(a),
                SymExpr::constant(model[a]),
            )
        })
        .reduce(|acc, e| SymExpr::bin(BinOp::Mul, acc, e))
        .unwrap_or_else(|| SymExpr::constant(1));
    Constraint::new(SymExpr::negate(conj))
}

fn record_violation(
    ex: &Executor,
    s: &ExecState,
    kind: ViolationKind,
    location: Location,
    executed: u64,
    cap: usize,
    records: &mut BTreeMap<(Location, ViolationKind), ViolationRecord>,
) {
    let p = ex.program;
    let record = records
        .entry((location.clone(), kind))
        .or_insert_with(|| ViolationRecord {
            kind,
            location,
            call_stack: s
                .frames
                .iter()
                .map(|f| p.functions()[f.fid].name.clone())
                .collect(),
            witnesses: Vec::new(),
            found_after_states: executed,
        });
    let constrained = s.constrained_atoms();
    let mut path = s.path.clone();
    let mut model = s.model.clone();
    while record.witnesses.len() < cap.max(1) {
        let w = Witness {
            input: model_bytes(&model),
            constrained: constrained.clone(),
        };
        if !record.witnesses.contains(&w) {
            record.witnesses.push(w);
        }
        if record.witnesses.len() >= cap || constrained.is_empty() {
            break;
        }
        path.push(blocking_clause(&model, &constrained));
        match ex.solve(&path) {
            Ok(SolveResult::Sat(m)) => model = m,
            _ => break,
        }
    }
}
