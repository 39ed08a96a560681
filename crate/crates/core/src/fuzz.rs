//! Deterministic greybox fuzzing over the concrete interpreter.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ir::{run_concrete_with, BlockEdge, Location, OutcomeKind, Program, RunOptions, ViolationKind};
use crate::munch::{detect_saturation, TimelineEntry};

/// Arithmetic deltas per byte: +1..=+35 then -1..=-35.
pub const ARITH_MAX: u8 = 35;
pub const ARITH_VARIANTS: usize = 2 * ARITH_MAX as usize;
pub const HAVOC_MAX_LEN: usize = 64;
/// Havoc mutations tried per corpus entry on each visit.
pub const HAVOC_PER_VISIT: u64 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FuzzError {
    #[error("cannot mutate an empty input")]
    EmptyInput,
    #[error("no seed inputs")]
    NoSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase", tag = "stage")]
pub enum Stage {
    Bitflip,
    Arith,
    Havoc { seed: u64 },
}

impl Stage {
    /// Number of deterministic variants for an input of `len` bytes.
    pub fn variants(self, len: usize) -> usize {
        match self {
            Stage::Bitflip => len * 8,
            Stage::Arith => len * ARITH_VARIANTS,
            Stage::Havoc { .. } => usize::MAX,
        }
    }
}

/// Produces the `index`-th mutation of `input` for a stage. Deterministic
/// indices wrap around the stage's variant count.
pub fn mutate_input(input: &[u8], stage: Stage, index: usize) -> Result<Vec<u8>, FuzzError> {
    let mut out = input.to_vec();
    match stage {
        Stage::Bitflip => {
            if input.is_empty() {
                return Err(FuzzError::EmptyInput);
            }
            let i = index % stage.variants(input.len());
            out[i / 8] ^= 1 << (i % 8);
        }
        Stage::Arith => {
            if input.is_empty() {
                return Err(FuzzError::EmptyInput);
            }
            let i = index % stage.variants(input.len());
            let r = (i % ARITH_VARIANTS) as u8;
            let b = &mut out[i / ARITH_VARIANTS];
            *b = if r < ARITH_MAX {
                b.wrapping_add(r + 1)
            } else {
                b.wrapping_sub(r - ARITH_MAX + 1)
            };
        }
        Stage::Havoc { seed } => {
            let mix = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(mix);
            if out.is_empty() {
                out.push(0);
            }
            for _ in 0..rng.random_range(1..=8) {
                havoc_op(&mut out, &mut rng);
            }
        }
    }
    Ok(out)
}

fn havoc_op(buf: &mut Vec<u8>, rng: &mut ChaCha8Rng) {
    let len = buf.len();
    match rng.random_range(0..5) {
        0 => {
            let bit = rng.random_range(0..len * 8);
            buf[bit / 8] ^= 1 << (bit % 8);
        }
        1 => {
            let i = rng.random_range(0..len);
            let d = rng.random_range(1..=ARITH_MAX);
            buf[i] = if rng.random_bool(0.5) {
                buf[i].wrapping_add(d)
            } else {
                buf[i].wrapping_sub(d)
            };
        }
        2 => {
            let i = rng.random_range(0..len);
            buf[i] = rng.random();
        }
        3 => {
            if len < HAVOC_MAX_LEN {
                let start = rng.random_range(0..len);
                let n = rng.random_range(1..=len - start).min(HAVOC_MAX_LEN - len);
                let chunk = buf[start..start + n].to_vec();
                buf.extend_from_slice(&chunk);
            }
        }
        _ => {
            if len > 1 {
                let keep = rng.random_range(1..len);
                buf.truncate(keep);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FuzzConfig {
    pub max_execs: u64,
    /// 0 disables the wall-clock limit.
    pub wall_millis: u64,
    pub havoc_seed: u64,
    /// Step budget of each concrete run.
    pub step_budget: usize,
    /// Stop once no new function was covered within this many executions.
    pub saturation_window: Option<u64>,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            max_execs: 10_000,
            wall_millis: 0,
            havoc_seed: 0,
            step_budget: 10_000,
            saturation_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CorpusEntry {
    pub input: Vec<u8>,
    pub discovered_at: u64,
    pub new_coverage: BTreeSet<BlockEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CoverageMap {
    pub covered_functions: BTreeSet<String>,
    pub covered_edges: BTreeSet<BlockEdge>,
    pub timeline: Vec<TimelineEntry>,
}

impl CoverageMap {
    /// Merges one run's coverage; returns the edges that were new.
    fn absorb(
        &mut self,
        exec: u64,
        functions: &BTreeSet<String>,
        edges: &BTreeSet<BlockEdge>,
    ) -> BTreeSet<BlockEdge> {
        let new_fns: Vec<String> = functions
            .iter()
            .filter(|f| self.covered_functions.insert((*f).clone()))
            .cloned()
            .collect();
        if !new_fns.is_empty() {
            self.timeline.push(TimelineEntry {
                index: exec,
                functions: new_fns,
            });
        }
        edges
            .iter()
            .filter(|e| self.covered_edges.insert((*e).clone()))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Crash {
    pub input: Vec<u8>,
    pub outcome: OutcomeKind,
    pub exec_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FuzzReport {
    pub config: FuzzConfig,
    pub execs: u64,
    pub saturated: bool,
    pub corpus: Vec<CorpusEntry>,
    pub coverage: CoverageMap,
    pub crashes: Vec<Crash>,
}

struct Fuzzer<'p> {
    program: &'p Program,
    cfg: FuzzConfig,
    started: Instant,
    execs: u64,
    saturated: bool,
    corpus: Vec<CorpusEntry>,
    coverage: CoverageMap,
    crashes: BTreeMap<(Location, ViolationKind), Crash>,
}

impl Fuzzer<'_> {
    fn exhausted(&mut self) -> bool {
        if self.execs >= self.cfg.max_execs {
            return true;
        }
        if self.cfg.wall_millis > 0
            && self.started.elapsed().as_millis() as u64 >= self.cfg.wall_millis
        {
            return true;
        }
        if let Some(w) = self.cfg.saturation_window {
            if self.execs >= w && detect_saturation(&self.coverage.timeline, self.execs, w) {
                self.saturated = true;
                return true;
            }
        }
        false
    }

    /// Runs one input; returns false once the budget is spent.
    fn run(&mut self, input: Vec<u8>) -> bool {
        if self.exhausted() {
            return false;
        }
        let exec = self.execs;
        self.execs += 1;
        let out = run_concrete_with(
            self.program,
            &input,
            RunOptions {
                step_budget: self.cfg.step_budget,
                record_trace: false,
            },
        );
        let new_edges = self.coverage.absorb(exec, &out.covered_functions, &out.edges);
        if let Some((kind, loc)) = out.kind.violation() {
            self.crashes
                .entry((loc.clone(), kind))
                .or_insert_with(|| Crash {
                    input,
                    outcome: out.kind.clone(),
                    exec_index: exec,
                });
        } else if !new_edges.is_empty() {
            self.corpus.push(CorpusEntry {
                input,
                discovered_at: exec,
                new_coverage: new_edges,
            });
        }
        true
    }
}

/// Fuzzes from `seeds`: every seed runs once, then the corpus is visited
/// round-robin, giving each entry its deterministic stages on the first
/// visit and a batch of havoc mutations on every visit.
pub fn fuzz_loop(p: &Program, seeds: &[Vec<u8>], cfg: &FuzzConfig) -> Result<FuzzReport, FuzzError> {
    if seeds.is_empty() {
        return Err(FuzzError::NoSeeds);
    }
    let mut fz = Fuzzer {
        program: p,
        cfg: *cfg,
        started: Instant::now(),
        execs: 0,
        saturated: false,
        corpus: Vec::new(),
        coverage: CoverageMap::default(),
        crashes: BTreeMap::new(),
    };
    let mut live = true;
    for s in seeds {
        live = live && fz.run(s.clone());
    }
    let mut havoc_index = 0usize;
    let mut visit = 0usize;
    let mut deterministic_done = 0usize;
    while live && !fz.corpus.is_empty() {
        let slot = visit % fz.corpus.len();
        visit += 1;
        let base = fz.corpus[slot].input.clone();
        if slot >= deterministic_done && !base.is_empty() {
            deterministic_done = slot + 1;
            for stage in [Stage::Bitflip, Stage::Arith] {
                for i in 0..stage.variants(base.len()) {
                    let m = mutate_input(&base, stage, i)?;
                    live = live && fz.run(m);
                }
            }
        }
        for _ in 0..HAVOC_PER_VISIT {
            let m = mutate_input(&base, Stage::Havoc { seed: cfg.havoc_seed }, havoc_index)?;
            havoc_index += 1;
            live = live && fz.run(m);
        }
    }
    Ok(FuzzReport {
        config: *cfg,
        execs: fz.execs,
        saturated: fz.saturated,
        corpus: fz.corpus,
        coverage: fz.coverage,
        crashes: fz.crashes.into_values().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, run_concrete};

    fn p1() -> Program {
        parse_program(include_str!("../fixtures/p1.ir")).unwrap()
    }

    #[test]
    fn bitflip_and_arith_variants() {
        assert_eq!(mutate_input(&[0x00], Stage::Bitflip, 0).unwrap(), [0x01]);
        assert_eq!(mutate_input(&[0x00], Stage::Bitflip, 3).unwrap(), [0x08]);
        assert_eq!(mutate_input(&[0, 0], Stage::Bitflip, 9).unwrap(), [0, 0x02]);
        assert_eq!(mutate_input(&[5], Stage::Arith, 0).unwrap(), [6]);
        assert_eq!(mutate_input(&[5], Stage::Arith, 34).unwrap(), [40]);
        assert_eq!(mutate_input(&[5], Stage::Arith, 35).unwrap(), [4]);
        assert_eq!(mutate_input(&[5], Stage::Arith, 69).unwrap(), [226]);
        assert_eq!(mutate_input(&[], Stage::Arith, 0), Err(FuzzError::EmptyInput));
    }

    #[test]
    fn havoc_is_deterministic_and_bounded() {
        let h = Stage::Havoc { seed: 42 };
        for i in 0..200 {
            let a = mutate_input(&[1, 2, 3], h, i).unwrap();
            assert_eq!(a, mutate_input(&[1, 2, 3], h, i).unwrap());
            assert!((1..=HAVOC_MAX_LEN).contains(&a.len()));
        }
    }

    #[test]
    fn p1_crash_from_zero_seed() {
        let p = p1();
        let r = fuzz_loop(&p, &[vec![0, 0]], &FuzzConfig::default()).unwrap();
        assert_eq!(r.crashes.len(), 1);
        assert_eq!(r.crashes[0].input[0], 6);
        let names: Vec<_> = r.coverage.covered_functions.iter().map(String::as_str).collect();
        assert_eq!(names, ["main", "mid", "target"]);
        for c in &r.crashes {
            assert_eq!(run_concrete(&p, &c.input, 10_000).kind, c.outcome);
        }
    }

    #[test]
    fn zero_budget_does_nothing() {
        let cfg = FuzzConfig {
            max_execs: 0,
            ..FuzzConfig::default()
        };
        let r = fuzz_loop(&p1(), &[vec![0, 0]], &cfg).unwrap();
        assert_eq!(r.execs, 0);
        assert!(r.coverage.covered_functions.is_empty());
        assert!(r.crashes.is_empty());
    }

    #[test]
    fn no_seeds_rejected() {
        assert_eq!(
            fuzz_loop(&p1(), &[], &FuzzConfig::default()),
            Err(FuzzError::NoSeeds)
        );
    }

    #[test]
    fn saturation_stops_within_window() {
        let cfg = FuzzConfig {
            saturation_window: Some(100),
            ..FuzzConfig::default()
        };
        let p = parse_program(include_str!("../fixtures/p2.ir")).unwrap();
        let r = fuzz_loop(&p, &[vec![]], &cfg).unwrap();
        assert!(r.saturated);
        assert_eq!(r.execs, 100);
    }

    #[test]
    fn timeline_strictly_increases() {
        let r = fuzz_loop(&p1(), &[vec![0, 0]], &FuzzConfig::default()).unwrap();
        assert!(r.coverage.timeline.windows(2).all(|w| w[0].index < w[1].index));
    }
}
