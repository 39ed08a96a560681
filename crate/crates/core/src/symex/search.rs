use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::state::ExecState;
use crate::ir::Program;

/// What the explorer knows that a strategy may consult.
pub struct SearchView<'a> {
    pub program: &'a Program,
    /// Executed instructions as (function id, index).
    pub covered: &'a HashSet<(usize, usize)>,
}

impl SearchView<'_> {
    pub fn is_uncovered(&self, s: &ExecState) -> bool {
        let f = s.top();
        !self.covered.contains(&(f.fid, f.pc))
    }
}

/// A state-selection strategy over active states.
pub trait Searcher {
    fn label(&self) -> String;

    /// Enqueues a state, handing it back if the strategy prunes it.
    fn push(&mut self, s: ExecState, view: &SearchView) -> Option<ExecState>;

    /// Enqueues the children of one step, in branch order. Returns the
    /// pruned ones.
    fn push_children(&mut self, children: Vec<ExecState>, view: &SearchView) -> Vec<ExecState> {
        children
            .into_iter()
            .filter_map(|c| self.push(c, view))
            .collect()
    }

    fn pop(&mut self, view: &SearchView) -> Option<ExecState>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Depth-first: the most recent fork's first branch runs next.
#[derive(Default)]
pub struct DfsSearcher {
    stack: Vec<ExecState>,
}

impl Searcher for DfsSearcher {
    fn label(&self) -> String {
        "dfs".into()
    }

    fn push(&mut self, s: ExecState, _: &SearchView) -> Option<ExecState> {
        self.stack.push(s);
        None
    }

    fn push_children(&mut self, children: Vec<ExecState>, _: &SearchView) -> Vec<ExecState> {
        self.stack.extend(children.into_iter().rev());
        Vec::new()
    }

    fn pop(&mut self, _: &SearchView) -> Option<ExecState> {
        self.stack.pop()
    }

    fn len(&self) -> usize {
        self.stack.len()
    }
}

#[derive(Default)]
pub struct BfsSearcher {
    queue: VecDeque<ExecState>,
}

impl Searcher for BfsSearcher {
    fn label(&self) -> String {
        "bfs".into()
    }

    fn push(&mut self, s: ExecState, _: &SearchView) -> Option<ExecState> {
        self.queue.push_back(s);
        None
    }

    fn pop(&mut self, _: &SearchView) -> Option<ExecState> {
        self.queue.pop_front()
    }

    fn len(&self) -> usize {
        self.queue.len()
    }
}

pub struct RandomSearcher {
    seed: u64,
    rng: ChaCha8Rng,
    states: Vec<ExecState>,
}

impl RandomSearcher {
    pub fn new(seed: u64) -> Self {
        RandomSearcher {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            states: Vec::new(),
        }
    }
}

impl Searcher for RandomSearcher {
    fn label(&self) -> String {
        format!("random({})", self.seed)
    }

    fn push(&mut self, s: ExecState, _: &SearchView) -> Option<ExecState> {
        self.states.push(s);
        None
    }

    fn pop(&mut self, _: &SearchView) -> Option<ExecState> {
        if self.states.is_empty() {
            return None;
        }
        let i = self.rng.random_range(0..self.states.len());
        Some(self.states.remove(i))
    }

    fn len(&self) -> usize {
        self.states.len()
    }
}

/// Prefers the oldest state whose next instruction has never executed,
/// falling back to plain FIFO order.
#[derive(Default)]
pub struct CoverageSearcher {
    queue: VecDeque<ExecState>,
}

impl CoverageSearcher {
    /// Queued state ids in FIFO order with their uncovered flag.
    pub fn candidates(&self, view: &SearchView) -> Vec<(u64, bool)> {
        self.queue
            .iter()
            .map(|s| (s.id, view.is_uncovered(s)))
            .collect()
    }
}

impl Searcher for CoverageSearcher {
    fn label(&self) -> String {
        "coverage".into()
    }

    fn push(&mut self, s: ExecState, _: &SearchView) -> Option<ExecState> {
        self.queue.push_back(s);
        None
    }

    fn pop(&mut self, view: &SearchView) -> Option<ExecState> {
        let i = self
            .queue
            .iter()
            .position(|s| view.is_uncovered(s))
            .unwrap_or(0);
        self.queue.remove(i)
    }

    fn len(&self) -> usize {
        self.queue.len()
    }
}
