//! Hybrid scheduling of fuzzing and symbolic execution, switching tools when
//! function coverage stops growing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::fuzz::{fuzz_loop, FuzzConfig, FuzzError};
use crate::graphs::build_call_graph;
use crate::ir::{Location, Program, ViolationKind};
use crate::sonar::{sonar_explore, Combiner};
use crate::symex::{explore, Budget, ExploreOptions, Strategy, SymexError};

/// Seeds handed from symbolic execution to the fuzzer in SF mode.
pub const MAX_SF_SEEDS: usize = 64;

/// Functions first covered at one execution (fuzz) or state (symex) index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TimelineEntry {
    pub index: u64,
    pub functions: Vec<String>,
}

/// True iff no new function was covered at an index in `(now - window, now]`.
pub fn detect_saturation(timeline: &[TimelineEntry], now: u64, window: u64) -> bool {
    !timeline
        .iter()
        .any(|e| e.index <= now && e.index + window > now)
}

/// Uncovered functions by call-graph depth from the entry, then name;
/// functions the entry never reaches come last.
pub fn order_targets(p: &Program, covered: &BTreeSet<String>) -> Vec<String> {
    let depths = build_call_graph(p).depths_from(p.entry());
    let mut targets: Vec<(usize, &str)> = p
        .function_names()
        .filter(|f| !covered.contains(*f))
        .map(|f| (depths.get(f).copied().unwrap_or(usize::MAX), f))
        .collect();
    targets.sort();
    targets.into_iter().map(|(_, f)| f.to_string()).collect()
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MunchError {
    #[error("unknown mode `{0}` (expected fs or sf)")]
    UnknownMode(String),
    #[error("FS mode needs at least one seed")]
    NoSeeds,
    #[error(transparent)]
    Symex(#[from] SymexError),
    #[error(transparent)]
    Fuzz(#[from] FuzzError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    /// Fuzzing first, then targeted symbolic execution.
    #[serde(rename = "FS")]
    Fs,
    /// Symbolic execution first, its models seeding the fuzzer.
    #[serde(rename = "SF")]
    Sf,
}

impl FromStr for Mode {
    type Err = MunchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fs" => Ok(Mode::Fs),
            "sf" => Ok(Mode::Sf),
            _ => Err(MunchError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fs => "FS",
            Mode::Sf => "SF",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct HybridBudget {
    pub fuzz_execs: u64,
    /// Total states over all symbolic phases.
    pub symex_states: u64,
    pub per_target_states: u64,
    /// Saturation window in executions or states.
    pub window: u64,
    pub havoc_seed: u64,
    /// Step bound of each concrete run and each symbolic path.
    pub max_steps: usize,
}

impl Default for HybridBudget {
    fn default() -> Self {
        HybridBudget {
            fuzz_execs: 10_000,
            symex_states: 2_000,
            per_target_states: 500,
            window: 1_000,
            havoc_seed: 0,
            max_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tool {
    Fuzz,
    Symex,
    Sonar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PhaseReport {
    pub tool: Tool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub budget: u64,
    pub budget_used: u64,
    pub saturated: bool,
    pub coverage_delta: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DepthCoverage {
    /// `None` collects functions the entry never reaches.
    pub depth: Option<usize>,
    pub covered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Finding {
    pub kind: ViolationKind,
    pub location: Location,
    pub input: Vec<u8>,
    pub tool: Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct HybridReport {
    pub mode: Mode,
    pub budget: HybridBudget,
    pub phases: Vec<PhaseReport>,
    pub final_covered_functions: BTreeSet<String>,
    pub coverage_by_depth: Vec<DepthCoverage>,
    pub violations: Vec<Finding>,
}

#[derive(Default)]
struct Accumulator {
    covered: BTreeSet<String>,
    phases: Vec<PhaseReport>,
    findings: BTreeMap<(Location, ViolationKind), Finding>,
}

impl Accumulator {
    fn phase(
        &mut self,
        tool: Tool,
        target: Option<String>,
        budget: u64,
        budget_used: u64,
        saturated: bool,
        covered: &BTreeSet<String>,
    ) {
        let delta: BTreeSet<String> = covered.difference(&self.covered).cloned().collect();
        self.covered.extend(delta.iter().cloned());
        self.phases.push(PhaseReport {
            tool,
            target,
            budget,
            budget_used,
            saturated,
            coverage_delta: delta,
        });
    }

    fn finding(&mut self, kind: ViolationKind, location: &Location, input: &[u8], tool: Tool) {
        self.findings
            .entry((location.clone(), kind))
            .or_insert_with(|| Finding {
                kind,
                location: location.clone(),
                input: input.to_vec(),
                tool,
            });
    }
}

fn fuzz_phase(
    p: &Program,
    acc: &mut Accumulator,
    seeds: &[Vec<u8>],
    b: &HybridBudget,
) -> Result<(), MunchError> {
    let cfg = FuzzConfig {
        max_execs: b.fuzz_execs,
        havoc_seed: b.havoc_seed,
        step_budget: b.max_steps,
        saturation_window: Some(b.window),
        ..FuzzConfig::default()
    };
    let r = fuzz_loop(p, seeds, &cfg)?;
    for c in &r.crashes {
        if let Some((k, loc)) = c.outcome.violation() {
            acc.finding(k, loc, &c.input, Tool::Fuzz);
        }
    }
    acc.phase(
        Tool::Fuzz,
        None,
        b.fuzz_execs,
        r.execs,
        r.saturated,
        &r.coverage.covered_functions,
    );
    Ok(())
}

/// Runs the two phases of `mode` under the given budgets.
pub fn run_hybrid(
    p: &Program,
    mode: Mode,
    b: &HybridBudget,
    seeds: &[Vec<u8>],
) -> Result<HybridReport, MunchError> {
    let mut acc = Accumulator::default();
    match mode {
        Mode::Fs => {
            if seeds.is_empty() {
                return Err(MunchError::NoSeeds);
            }
            fuzz_phase(p, &mut acc, seeds, b)?;
            let mut remaining = b.symex_states;
            for target in order_targets(p, &acc.covered) {
                if remaining == 0 {
                    break;
                }
                if acc.covered.contains(&target) {
                    continue;
                }
                let states = b.per_target_states.min(remaining);
                let budget = Budget {
                    max_states: states,
                    max_steps: b.max_steps,
                    wall_millis: 0,
                };
                let run = match sonar_explore(p, &target, Combiner::Min, &budget, &ExploreOptions::default()) {
                    Ok(run) => run,
                    Err(SymexError::TargetUnreachable(_)) => continue,
                    Err(e) => return Err(e.into()),
                };
                remaining -= run.report.states_explored;
                for v in &run.report.violations {
                    acc.finding(v.kind, &v.location, v.input(), Tool::Sonar);
                }
                acc.phase(
                    Tool::Sonar,
                    Some(target),
                    states,
                    run.report.states_explored,
                    false,
                    &run.report.covered_functions,
                );
            }
        }
        Mode::Sf => {
            let budget = Budget {
                max_states: b.symex_states,
                max_steps: b.max_steps,
                wall_millis: 0,
            };
            let opts = ExploreOptions {
                saturation_window: Some(b.window),
                ..ExploreOptions::default()
            };
            let r = explore(p, &Strategy::Coverage, &budget, &opts)?;
            for v in &r.violations {
                acc.finding(v.kind, &v.location, v.input(), Tool::Symex);
            }
            acc.phase(
                Tool::Symex,
                None,
                b.symex_states,
                r.states_explored,
                r.saturated,
                &r.covered_functions,
            );
            let mut sf_seeds = r.test_inputs.clone();
            sf_seeds.sort();
            sf_seeds.dedup();
            sf_seeds.truncate(MAX_SF_SEEDS);
            if sf_seeds.is_empty() {
                sf_seeds = seeds.to_vec();
            }
            if sf_seeds.is_empty() {
                sf_seeds.push(vec![0; p.entry_input_len()]);
            }
            fuzz_phase(p, &mut acc, &sf_seeds, b)?;
        }
    }
    Ok(HybridReport {
        mode,
        budget: *b,
        coverage_by_depth: coverage_by_depth(p, &acc.covered),
        phases: acc.phases,
        final_covered_functions: acc.covered,
        violations: acc.findings.into_values().collect(),
    })
}

/// Covered and total function counts per call-graph depth from the entry.
pub fn coverage_by_depth(p: &Program, covered: &BTreeSet<String>) -> Vec<DepthCoverage> {
    let depths = build_call_graph(p).depths_from(p.entry());
    let mut buckets: BTreeMap<(bool, usize), (usize, usize)> = BTreeMap::new();
    for f in p.function_names() {
        let key = match depths.get(f) {
            Some(d) => (false, *d),
            None => (true, 0),
        };
        let slot = buckets.entry(key).or_default();
        slot.1 += 1;
        if covered.contains(f) {
            slot.0 += 1;
        }
    }
    buckets
        .into_iter()
        .map(|((unreachable, d), (covered, total))| DepthCoverage {
            depth: (!unreachable).then_some(d),
            covered,
            total,
        })
        .collect()
}
