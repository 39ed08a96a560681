//! Control-flow graphs, the call graph, and the interprocedural distance
//! tables consumed by the targeted searcher.
//!
//! Distances count single instruction executions. Both tables are least
//! fixed points computed by iterating from "unreachable" downwards, which
//! handles loops and (mutual) recursion uniformly.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::ops::Add;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::ir::{Function, Instr, Location, Program};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown target function `{0}`")]
    UnknownTarget(String),
}

/// A natural number or infinity. `Finite` orders below `Infinite`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Distance {
    Finite(u64),
    Infinite,
}

impl Distance {
    pub const ZERO: Distance = Distance::Finite(0);

    pub fn is_finite(self) -> bool {
        matches!(self, Distance::Finite(_))
    }

    pub fn finite(self) -> Option<u64> {
        match self {
            Distance::Finite(d) => Some(d),
            Distance::Infinite => None,
        }
    }
}

impl Add for Distance {
    type Output = Distance;

    fn add(self, rhs: Distance) -> Distance {
        match (self, rhs) {
            (Distance::Finite(a), Distance::Finite(b)) => Distance::Finite(a.saturating_add(b)),
            _ => Distance::Infinite,
        }
    }
}

impl Add<u64> for Distance {
    type Output = Distance;

    fn add(self, rhs: u64) -> Distance {
        self + Distance::Finite(rhs)
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Distance::Finite(d) => write!(f, "{d}"),
            Distance::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Distance {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Distance::Finite(d) => s.serialize_u64(*d),
            Distance::Infinite => s.serialize_str("inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Cfg {
    pub function: String,
    pub nodes: Vec<String>,
    pub edges: BTreeSet<(String, String)>,
}

/// One node per block; edges induced by `br`, `jmp` and fallthrough.
pub fn build_cfg(f: &Function) -> Cfg {
    let blocks = f.blocks();
    let mut edges = BTreeSet::new();
    for (bi, block) in blocks.iter().enumerate() {
        let last = block.instrs.last().expect("validated nonempty block");
        let targets: Vec<&str> = match last {
            Instr::Br {
                then_label,
                else_label,
                ..
            } => vec![then_label, else_label],
            Instr::Jmp { label } => vec![label],
            Instr::Ret { .. } => vec![],
            _ => blocks
                .get(bi + 1)
                .map(|b| vec![b.label.as_str()])
                .unwrap_or_default(),
        };
        for t in targets {
            edges.insert((block.label.clone(), t.to_string()));
        }
    }
    Cfg {
        function: f.name.clone(),
        nodes: blocks.iter().map(|b| b.label.clone()).collect(),
        edges,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallGraph {
    pub nodes: Vec<String>,
    /// caller → callee → call sites in the caller.
    pub edges: BTreeMap<String, BTreeMap<String, BTreeSet<Location>>>,
}

impl CallGraph {
    pub fn callees(&self, f: &str) -> impl Iterator<Item = &str> + '_ {
        self.edges
            .get(f)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }

    pub fn callers(&self, f: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, callees)| callees.contains_key(f))
            .map(|(caller, _)| caller.as_str())
            .collect()
    }

    pub fn has_edge(&self, caller: &str, callee: &str) -> bool {
        self.edges
            .get(caller)
            .is_some_and(|m| m.contains_key(callee))
    }

    pub fn edge_pairs(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges
            .iter()
            .flat_map(|(a, m)| m.keys().map(move |b| (a.as_str(), b.as_str())))
    }

    /// BFS hop count from `root` along call edges; unreachable nodes absent.
    pub fn depths_from(&self, root: &str) -> BTreeMap<String, usize> {
        let mut depth = BTreeMap::new();
        let mut queue = VecDeque::new();
        depth.insert(root.to_string(), 0);
        queue.push_back(root.to_string());
        while let Some(f) = queue.pop_front() {
            let d = depth[&f];
            for g in self.callees(&f) {
                if !depth.contains_key(g) {
                    depth.insert(g.to_string(), d + 1);
                    queue.push_back(g.to_string());
                }
            }
        }
        depth
    }

    /// Functions from which `target` is reachable along call edges,
    /// including `target` itself.
    pub fn can_reach(&self, target: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        seen.insert(target.to_string());
        let mut queue = VecDeque::from([target.to_string()]);
        while let Some(g) = queue.pop_front() {
            for f in self.callers(&g) {
                if seen.insert(f.to_string()) {
                    queue.push_back(f.to_string());
                }
            }
        }
        seen
    }
}

pub fn build_call_graph(p: &Program) -> CallGraph {
    let mut edges: BTreeMap<String, BTreeMap<String, BTreeSet<Location>>> = BTreeMap::new();
    for f in p.functions() {
        for (idx, instr) in f.instrs() {
            if let Instr::Call { callee, .. } = instr {
                edges
                    .entry(f.name.clone())
                    .or_default()
                    .entry(callee.clone())
                    .or_default()
                    .insert(Location::new(f.name.clone(), idx));
            }
        }
    }
    CallGraph {
        nodes: p.function_names().map(str::to_string).collect(),
        edges,
    }
}

/// Per-instruction distance to completing the current frame, and the
/// minimal cost of a full call per function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ReturnDistances {
    pub to_return: BTreeMap<String, Vec<Distance>>,
    pub complete: BTreeMap<String, Distance>,
}

impl ReturnDistances {
    pub fn at(&self, function: &str, index: usize) -> Distance {
        self.to_return[function][index]
    }
}

/// Relaxes one function's table against its own successors until stable.
/// `cost(i, table)` gives the candidate value of instruction `i`.
fn relax_function<F>(f: &Function, table: &mut [Distance], mut cost: F) -> bool
where
    F: FnMut(usize, &[Distance]) -> Distance,
{
    let mut changed_any = false;
    loop {
        let mut changed = false;
        for i in (0..f.instr_count()).rev() {
            let v = cost(i, table);
            if v < table[i] {
                table[i] = v;
                changed = true;
            }
        }
        if !changed {
            return changed_any;
        }
        changed_any = true;
    }
}

fn min_successor(f: &Function, i: usize, table: &[Distance]) -> Distance {
    f.successors(i)
        .into_iter()
        .map(|s| table[s])
        .min()
        .unwrap_or(Distance::Infinite)
}

pub fn distance_to_return(p: &Program) -> ReturnDistances {
    let mut complete: BTreeMap<String, Distance> = p
        .function_names()
        .map(|n| (n.to_string(), Distance::Infinite))
        .collect();
    let mut to_return: BTreeMap<String, Vec<Distance>> = p
        .functions()
        .iter()
        .map(|f| (f.name.clone(), vec![Distance::Infinite; f.instr_count()]))
        .collect();

    loop {
        let mut changed = false;
        for f in p.functions() {
            let table = to_return.get_mut(&f.name).expect("table per function");
            relax_function(f, table, |i, t| match f.instr(i) {
                Instr::Ret { .. } => Distance::Finite(1),
                Instr::Call { callee, .. } => complete[callee] + t[i + 1] + 1,
                _ => min_successor(f, i, t) + 1,
            });
            let c = table[0];
            if c < complete[&f.name] {
                complete.insert(f.name.clone(), c);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    ReturnDistances {
        to_return,
        complete,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DistanceTables {
    pub target: String,
    pub to_target: BTreeMap<String, Vec<Distance>>,
    pub to_return: BTreeMap<String, Vec<Distance>>,
    pub complete: BTreeMap<String, Distance>,
}

impl DistanceTables {
    pub fn to_target_at(&self, function: &str, index: usize) -> Distance {
        self.to_target[function][index]
    }

    pub fn to_return_at(&self, function: &str, index: usize) -> Distance {
        self.to_return[function][index]
    }
}

/// Direct distance to `target`'s entry from every instruction, never
/// returning out of the current frame. A call either descends into the
/// callee or completes it and continues.
pub fn target_distances(p: &Program, target: &str) -> Result<DistanceTables, GraphError> {
    if p.function(target).is_none() {
        return Err(GraphError::UnknownTarget(target.to_string()));
    }
    let ReturnDistances {
        to_return,
        complete,
    } = distance_to_return(p);
    let mut to_target: BTreeMap<String, Vec<Distance>> = p
        .functions()
        .iter()
        .map(|f| (f.name.clone(), vec![Distance::Infinite; f.instr_count()]))
        .collect();
    to_target.get_mut(target).expect("target exists")[0] = Distance::ZERO;

    loop {
        let mut changed = false;
        for f in p.functions() {
            let entries: BTreeMap<String, Distance> = to_target
                .iter()
                .map(|(name, t)| (name.clone(), t[0]))
                .collect();
            let table = to_target.get_mut(&f.name).expect("table per function");
            let is_target = f.name == target;
            changed |= relax_function(f, table, |i, t| {
                if is_target && i == 0 {
                    return Distance::ZERO;
                }
                match f.instr(i) {
                    Instr::Ret { .. } => Distance::Infinite,
                    Instr::Call { callee, .. } => {
                        let descend = entries[callee];
                        let skip = complete[callee] + t[i + 1];
                        descend.min(skip) + 1
                    }
                    _ => min_successor(f, i, t) + 1,
                }
            });
        }
        if !changed {
            break;
        }
    }
    Ok(DistanceTables {
        target: target.to_string(),
        to_target,
        to_return,
        complete,
    })
}
