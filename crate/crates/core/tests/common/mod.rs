//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::path::PathBuf;

use vulnkit::graphs::CallGraph;
use vulnkit::ir::{parse_program, run_concrete, Instr, Location, Program, ViolationKind};
use vulnkit::symex::{Constraint, Executor, SolverConfig, Status};

/// Programs used for the distance, pruning and solver checks.
pub const ALL_FIXTURES: [&str; 13] = [
    "p1",
    "p1g",
    "p2",
    "chain4",
    "guarded-deep-a",
    "guarded-deep-b",
    "oob",
    "recursion",
    "loop",
    "deep10",
    "shallow-branchy",
    "deep-loop-parse",
    "mutual",
];

/// Compositional-analysis corpus; every entry takes at most two input bytes.
pub const MACKE_CORPUS: [&str; 7] = [
    "p1",
    "p1g",
    "chain4",
    "guarded-deep-a",
    "guarded-deep-b",
    "oob",
    "recursion",
];

pub const MUNCH_CORPUS: [&str; 2] = ["shallow-branchy", "deep-loop-parse"];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(format!("{name}.ir"))
}

pub fn fixture(name: &str) -> Program {
    let text = std::fs::read_to_string(fixture_path(name)).expect("fixture exists");
    parse_program(&text).expect("fixture parses")
}

/// An interprocedural state: frames outermost first, callers parked at
/// their continuation index.
pub type Stack = Vec<(usize, usize)>;

/// One-instruction successors in the fully expanded graph. A call pushes
/// the callee; a return pops to the caller's continuation.
pub fn expand(p: &Program, stack: &Stack) -> Vec<Stack> {
    let &(fid, pc) = stack.last().expect("non-empty stack");
    let f = &p.functions()[fid];
    match f.instr(pc) {
        Instr::Call { callee, .. } => {
            let mut s = stack.clone();
            s.last_mut().unwrap().1 = pc + 1;
            s.push((p.function_id(callee).unwrap(), 0));
            vec![s]
        }
        Instr::Ret { .. } => {
            if stack.len() == 1 {
                return Vec::new();
            }
            vec![stack[..stack.len() - 1].to_vec()]
        }
        Instr::Br {
            then_label,
            else_label,
            ..
        } => [then_label, else_label]
            .into_iter()
            .map(|l| f.block_start(l).unwrap())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|n| with_top(stack, n))
            .collect(),
        Instr::Jmp { label } => vec![with_top(stack, f.block_start(label).unwrap())],
        _ => vec![with_top(stack, pc + 1)],
    }
}

fn with_top(stack: &Stack, pc: usize) -> Stack {
    let mut s = stack.clone();
    s.last_mut().unwrap().1 = pc;
    s
}

/// Breadth-first instruction count from `start` to any state whose top
/// frame sits at the target's entry, exploring stacks up to `max_depth`.
pub fn bfs_distance(p: &Program, start: &Stack, target: usize, max_depth: usize) -> Option<u64> {
    let mut seen: HashSet<Stack> = HashSet::from([start.clone()]);
    let mut queue = VecDeque::from([(start.clone(), 0u64)]);
    while let Some((s, d)) = queue.pop_front() {
        if *s.last().unwrap() == (target, 0) {
            return Some(d);
        }
        for n in expand(p, &s) {
            if n.len() <= max_depth && seen.insert(n.clone()) {
                queue.push_back((n, d + 1));
            }
        }
    }
    None
}

/// Every stack of depth at most `max_depth` reachable from the entry.
pub fn reachable_stacks(p: &Program, max_depth: usize) -> Vec<Stack> {
    let start = vec![(p.function_id(p.entry()).unwrap(), 0)];
    let mut seen: HashSet<Stack> = HashSet::from([start.clone()]);
    let mut order = vec![start.clone()];
    let mut queue = VecDeque::from([start]);
    while let Some(s) = queue.pop_front() {
        for n in expand(p, &s) {
            if n.len() <= max_depth && seen.insert(n.clone()) {
                order.push(n.clone());
                queue.push_back(n);
            }
        }
    }
    order
}

pub fn to_locations(p: &Program, stack: &Stack) -> Vec<Location> {
    stack
        .iter()
        .map(|&(fid, pc)| Location::new(p.functions()[fid].name.clone(), pc))
        .collect()
}

pub fn from_locations(p: &Program, stack: &[Location]) -> Stack {
    stack
        .iter()
        .map(|l| (p.function_id(&l.function).unwrap(), l.instr_index))
        .collect()
}

/// Depth headroom that lets any descent or call completion finish without
/// repeating a frame.
pub fn depth_headroom(p: &Program) -> usize {
    2 * p.functions().len() + 2
}

/// Violations reached by concrete execution of every entry input of the
/// entry buffer's declared length.
pub fn brute_force_violations(p: &Program) -> BTreeMap<(ViolationKind, Location), Vec<u8>> {
    let len = p.entry_input_len();
    assert!(len <= 2, "brute force limited to two bytes");
    let mut found = BTreeMap::new();
    let total = 1usize << (8 * len);
    for n in 0..total {
        let input: Vec<u8> = (0..len).map(|i| (n >> (8 * i)) as u8).collect();
        let out = run_concrete(p, &input, 100_000);
        if let Some((kind, loc)) = out.kind.violation() {
            found.entry((kind, loc.clone())).or_insert(input);
        }
    }
    found
}

/// Every path condition seen while stepping the program breadth-first,
/// up to `max_states` steps.
pub fn path_conditions(p: &Program, max_states: usize) -> (Executor<'_>, Vec<Vec<Constraint>>) {
    let mut ex = Executor::new(p, SolverConfig::default(), 10_000);
    let mut queue = VecDeque::from([ex.initial_state()]);
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    let mut steps = 0;
    while let Some(s) = queue.pop_front() {
        if steps == max_states {
            break;
        }
        steps += 1;
        for c in ex.step_state(s).children {
            let key = format!("{:?}", c.path);
            if seen.insert(key) {
                out.push(c.path.clone());
            }
            if c.status == Status::Active {
                queue.push_back(c);
            }
        }
    }
    (ex, out)
}

/// Brute-force shortest-path betweenness: enumerate all simple paths,
/// keep the shortest ones per ordered pair, count how many pass through
/// each node. Normalized by (n-1)(n-2).
pub fn brute_betweenness(cg: &CallGraph) -> BTreeMap<String, f64> {
    let names: Vec<String> = cg.nodes.to_vec();
    let n = names.len();
    let idx: HashMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut adj = vec![BTreeSet::new(); n];
    for (a, b) in cg.edge_pairs() {
        if a != b {
            adj[idx[a]].insert(idx[b]);
            adj[idx[b]].insert(idx[a]);
        }
    }
    let mut score = vec![0.0; n];
    for s in 0..n {
        for t in 0..n {
            if s == t {
                continue;
            }
            let mut paths: Vec<Vec<usize>> = Vec::new();
            let mut cur = vec![s];
            simple_paths(&adj, t, &mut cur, &mut paths);
            let Some(best) = paths.iter().map(Vec::len).min() else {
                continue;
            };
            let shortest: Vec<&Vec<usize>> = paths.iter().filter(|p| p.len() == best).collect();
            for (v, sc) in score.iter_mut().enumerate() {
                if v == s || v == t {
                    continue;
                }
                let through = shortest.iter().filter(|p| p.contains(&v)).count();
                *sc += through as f64 / shortest.len() as f64;
            }
        }
    }
    let norm = if n < 3 { 0.0 } else { ((n - 1) * (n - 2)) as f64 };
    names
        .into_iter()
        .zip(score)
        .map(|(k, v)| (k, if norm == 0.0 { 0.0 } else { v / norm }))
        .collect()
}

fn simple_paths(adj: &[BTreeSet<usize>], t: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    let last = *cur.last().unwrap();
    if last == t {
        out.push(cur.clone());
        return;
    }
    for &n in &adj[last] {
        if !cur.contains(&n) {
            cur.push(n);
            simple_paths(adj, t, cur, out);
            cur.pop();
        }
    }
}
