//! Distance-guided search toward one target function's entry.
//!
//! States are ranked by the fewest instructions still needed before control
//! sits at the target entry, either directly from the current frame or by
//! returning into an ancestor frame. States that can never get there are
//! pruned, and once a state has reached the target it and its descendants
//! are handed to the coverage strategy.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::graphs::{target_distances, Distance, DistanceTables};
use crate::ir::{Location, Program};
use crate::symex::{
    explore_with, Budget, CoverageSearcher, ExecState, Exploration, ExploreOptions, SearchView,
    Searcher, Status, SymexError,
};

/// How the direct and the via-ancestor routes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    #[default]
    Min,
    Max,
}

impl Combiner {
    /// An infinite operand defers to the other one.
    pub fn combine(self, direct: Distance, via: Distance) -> Distance {
        match (direct, via) {
            (Distance::Infinite, x) | (x, Distance::Infinite) => x,
            (a, b) => match self {
                Combiner::Min => a.min(b),
                Combiner::Max => a.max(b),
            },
        }
    }
}

impl FromStr for Combiner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(Combiner::Min),
            "max" => Ok(Combiner::Max),
            other => Err(format!("unknown combiner `{other}`")),
        }
    }
}

impl fmt::Display for Combiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combiner::Min => "min",
            Combiner::Max => "max",
        })
    }
}

/// Future distance of a call stack given outermost first, each frame at its
/// next (or resume) instruction.
pub fn stack_future_distance(stack: &[Location], t: &DistanceTables, c: Combiner) -> Distance {
    stack.iter().fold(Distance::Infinite, |ancestor, loc| {
        let direct = t.to_target_at(&loc.function, loc.instr_index);
        let via = t.to_return_at(&loc.function, loc.instr_index) + ancestor;
        c.combine(direct, via)
    })
}

pub fn min_future_distance(
    s: &ExecState,
    p: &Program,
    t: &DistanceTables,
    c: Combiner,
) -> Distance {
    stack_future_distance(&s.stack(p), t, c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Seeking,
    Reached,
}

/// One selection decision, kept when logging is enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub pool: Pool,
    pub chosen: u64,
    /// Reached-pool candidates in FIFO order with their uncovered flag.
    pub candidates: Vec<(u64, bool)>,
}

pub struct SonarSearcher {
    target: String,
    target_fid: usize,
    combiner: Combiner,
    to_target: Vec<Vec<Distance>>,
    to_return: Vec<Vec<Distance>>,
    seeking: BTreeMap<(Distance, u64), ExecState>,
    reached: CoverageSearcher,
    reached_ids: HashSet<u64>,
    seq: u64,
    prefer_reached: bool,
    log: Option<Vec<Selection>>,
}

impl SonarSearcher {
    pub fn new(p: &Program, target: &str, combiner: Combiner) -> Result<Self, SymexError> {
        let tables = target_distances(p, target)?;
        Ok(Self::with_tables(p, &tables, combiner))
    }

    pub fn with_tables(p: &Program, t: &DistanceTables, combiner: Combiner) -> Self {
        let per_fn = |f: &crate::ir::Function, at: &dyn Fn(&str, usize) -> Distance| {
            (0..f.instr_count()).map(|i| at(&f.name, i)).collect()
        };
        SonarSearcher {
            target: t.target.clone(),
            target_fid: p.function_id(&t.target).expect("tables built for this program"),
            combiner,
            to_target: p
                .functions()
                .iter()
                .map(|f| per_fn(f, &|n, i| t.to_target_at(n, i)))
                .collect(),
            to_return: p
                .functions()
                .iter()
                .map(|f| per_fn(f, &|n, i| t.to_return_at(n, i)))
                .collect(),
            seeking: BTreeMap::new(),
            reached: CoverageSearcher::default(),
            reached_ids: HashSet::new(),
            seq: 0,
            prefer_reached: true,
            log: None,
        }
    }

    pub fn with_selection_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn selections(&self) -> &[Selection] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn distance(&self, s: &ExecState) -> Distance {
        s.frames.iter().fold(Distance::Infinite, |ancestor, f| {
            let direct = self.to_target[f.fid][f.pc];
            let via = self.to_return[f.fid][f.pc] + ancestor;
            self.combiner.combine(direct, via)
        })
    }

    fn has_reached(&mut self, s: &ExecState) -> bool {
        let top = s.top();
        let reached = self.reached_ids.contains(&s.id)
            || s.parent.is_some_and(|p| self.reached_ids.contains(&p))
            || (top.fid == self.target_fid && top.pc == 0);
        if reached {
            self.reached_ids.insert(s.id);
        }
        reached
    }
}

impl Searcher for SonarSearcher {
    fn label(&self) -> String {
        format!("sonar({})", self.target)
    }

    fn push(&mut self, mut s: ExecState, view: &SearchView) -> Option<ExecState> {
        if self.has_reached(&s) {
            return self.reached.push(s, view);
        }
        let d = self.distance(&s);
        if !d.is_finite() {
            s.status = Status::Pruned;
            return Some(s);
        }
        self.seeking.insert((d, self.seq), s);
        self.seq += 1;
        None
    }

    fn pop(&mut self, view: &SearchView) -> Option<ExecState> {
        let use_reached = match (self.seeking.is_empty(), self.reached.is_empty()) {
            (true, true) => return None,
            (false, true) => false,
            (true, false) => true,
            (false, false) => {
                self.prefer_reached = !self.prefer_reached;
                !self.prefer_reached
            }
        };
        if use_reached {
            let candidates = match self.log {
                Some(_) => self.reached.candidates(view),
                None => Vec::new(),
            };
            let s = self.reached.pop(view)?;
            if let Some(log) = &mut self.log {
                log.push(Selection {
                    pool: Pool::Reached,
                    chosen: s.id,
                    candidates,
                });
            }
            Some(s)
        } else {
            let (_, s) = self.seeking.pop_first()?;
            if let Some(log) = &mut self.log {
                log.push(Selection {
                    pool: Pool::Seeking,
                    chosen: s.id,
                    candidates: Vec::new(),
                });
            }
            Some(s)
        }
    }

    fn len(&self) -> usize {
        self.seeking.len() + self.reached.len()
    }
}

/// Targeted exploration; fails when the initial state cannot reach `target`.
pub fn sonar_explore(
    p: &Program,
    target: &str,
    combiner: Combiner,
    budget: &Budget,
    opts: &ExploreOptions,
) -> Result<Exploration, SymexError> {
    let mut searcher = SonarSearcher::new(p, target, combiner)?;
    let run = explore_with(p, &mut searcher, budget, opts);
    if run.trace.initial_pruned {
        return Err(SymexError::TargetUnreachable(target.to_string()));
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_program, ViolationKind};
    use crate::symex::{explore, Strategy};

    fn p1() -> Program {
        parse_program(include_str!("../fixtures/p1.ir")).unwrap()
    }

    #[test]
    fn p1_entry_distance() {
        let p = p1();
        let t = target_distances(&p, "target").unwrap();
        let d = stack_future_distance(&[Location::new("main", 0)], &t, Combiner::Min);
        assert_eq!(d, Distance::Finite(5));
        let at_target = [
            Location::new("main", 3),
            Location::new("mid", 2),
            Location::new("target", 0),
        ];
        assert_eq!(stack_future_distance(&at_target, &t, Combiner::Min), Distance::ZERO);
    }

    #[test]
    fn p2_via_ancestor() {
        let p = parse_program(include_str!("../fixtures/p2.ir")).unwrap();
        let t = target_distances(&p, "target").unwrap();
        let stack = [Location::new("main", 1), Location::new("util", 0)];
        assert_eq!(stack_future_distance(&stack, &t, Combiner::Min), Distance::Finite(2));
        // Direct is infinite, so the maximum still defers to the ancestor route.
        assert_eq!(stack_future_distance(&stack, &t, Combiner::Max), Distance::Finite(2));
    }

    #[test]
    fn combiner_semantics() {
        let (a, b) = (Distance::Finite(3), Distance::Finite(7));
        assert_eq!(Combiner::Min.combine(a, b), a);
        assert_eq!(Combiner::Max.combine(a, b), b);
        assert_eq!(Combiner::Max.combine(Distance::Infinite, b), b);
        assert_eq!(
            Combiner::Min.combine(Distance::Infinite, Distance::Infinite),
            Distance::Infinite
        );
    }

    #[test]
    fn p1_sonar_prunes_l2_and_finds_violation() {
        let p = p1();
        let run = sonar_explore(
            &p,
            "target",
            Combiner::Min,
            &Budget::states(1000),
            &ExploreOptions::default(),
        )
        .unwrap();
        assert_eq!(run.report.violations.len(), 1);
        assert_eq!(run.report.violations[0].kind, ViolationKind::AssertFail);
        assert_eq!(run.report.states_pruned, 1);
        assert_eq!(run.trace.pruned_stacks, vec![vec![Location::new("main", 4)]]);
        assert!(run.trace.arrivals.contains_key("target"));
        let bfs = explore(&p, &Strategy::Bfs, &Budget::states(1000), &ExploreOptions::default())
            .unwrap();
        assert_eq!(run.report.violation_keys(), bfs.violation_keys());
    }

    #[test]
    fn target_is_entry_behaves_like_coverage() {
        let p = p1();
        let mut s = SonarSearcher::new(&p, "main", Combiner::Min)
            .unwrap()
            .with_selection_log();
        let run = explore_with(&p, &mut s, &Budget::states(1000), &ExploreOptions::default());
        assert_eq!(run.report.states_pruned, 0);
        assert!(s.selections().iter().all(|x| x.pool == Pool::Reached));
        let cov = explore(&p, &Strategy::Coverage, &Budget::states(1000), &ExploreOptions::default())
            .unwrap();
        assert_eq!(run.report.states_explored, cov.states_explored);
        assert_eq!(run.report.test_inputs, cov.test_inputs);
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let src = include_str!("../fixtures/p1.ir").replace("  call mid(x)\n", "");
        let p = parse_program(&src).unwrap();
        let err = sonar_explore(
            &p,
            "target",
            Combiner::Min,
            &Budget::states(100),
            &ExploreOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err, SymexError::TargetUnreachable("target".into()));
    }
}
