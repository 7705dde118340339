//! Pointed DAGs over which everything else operates.
//!
//! A `StateGraph` is a finite DAG with a designated initial state and a set
//! of terminal (childless) states. Complete trajectories run from the
//! initial state to a terminal. The graph is immutable after construction
//! and safe to share across threads; derived quantities (reachable terminal
//! sets) are memoized behind `OnceLock`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateId = usize;

/// Default enumeration guard: builders refuse graphs whose state count
/// exceeds this unless an explicit larger guard is passed.
pub const DEFAULT_CAPACITY: u64 = 1_000_000;

/// Reads the `GFNLAB_CAPACITY` override, falling back to the default guard.
pub fn capacity_from_env() -> u64 {
    std::env::var("GFNLAB_CAPACITY")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_CAPACITY)
}

#[derive(Debug)]
pub struct StateGraph {
    initial: StateId,
    terminal: Vec<bool>,
    labels: Vec<Option<String>>,
    children: Vec<Vec<StateId>>, // sorted
    parents: Vec<Vec<StateId>>,  // sorted
    terminals: Vec<StateId>,     // sorted
    term_index: Vec<Option<usize>>,
    topo: Vec<StateId>,
    depth: Vec<usize>, // geodesic depth from the initial state
    max_depth: usize,
    max_traj_len: usize,
    reach: Vec<OnceLock<Arc<[StateId]>>>,
}

impl StateGraph {
    /// Validates and freezes a graph. `edges` may arrive in any order;
    /// duplicates are rejected. Every invariant a caller could break is
    /// checked here so downstream code can assume a well-formed DAG.
    pub fn new(
        initial: StateId,
        terminal: Vec<bool>,
        labels: Vec<Option<String>>,
        edges: &[(StateId, StateId)],
        guard: u64,
    ) -> Result<Self> {
        let n = terminal.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no states".into()));
        }
        if labels.len() != n {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {} states",
                labels.len(),
                n
            )));
        }
        if n as u128 > guard as u128 {
            return Err(Error::Capacity {
                what: "state graph".into(),
                needed: n as u128,
                guard,
            });
        }
        if initial >= n {
            return Err(Error::UnknownState(initial));
        }

        let mut children: Vec<Vec<StateId>> = vec![Vec::new(); n];
        let mut parents: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n {
                return Err(Error::UnknownState(u));
            }
            if v >= n {
                return Err(Error::UnknownState(v));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at state {u}")));
            }
            children[u].push(v);
            parents[v].push(u);
        }
        for v in 0..n {
            children[v].sort_unstable();
            if children[v].windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge out of state {v}"
                )));
            }
            parents[v].sort_unstable();
        }

        if !parents[initial].is_empty() {
            return Err(Error::InvalidGraph(format!(
                "initial state {initial} has incoming edges"
            )));
        }
        for v in 0..n {
            if terminal[v] && !children[v].is_empty() {
                return Err(Error::InvalidGraph(format!(
                    "terminal state {v} has outgoing edges"
                )));
            }
            if !terminal[v] && children[v].is_empty() {
                return Err(Error::InvalidGraph(format!(
                    "childless state {v} is not declared terminal"
                )));
            }
        }

        // Kahn with smallest-id-first pop: rejects cycles and fixes a
        // deterministic topological order.
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<StateId>> = indeg
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(v, _)| std::cmp::Reverse(v))
            .collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(std::cmp::Reverse(v)) = heap.pop() {
            topo.push(v);
            for &c in &children[v] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    heap.push(std::cmp::Reverse(c));
                }
            }
        }
        if topo.len() != n {
            return Err(Error::InvalidGraph("graph contains a cycle".into()));
        }

        // Reachability from the initial state, with geodesic depths.
        let mut depth = vec![usize::MAX; n];
        depth[initial] = 0;
        let mut q = VecDeque::from([initial]);
        while let Some(u) = q.pop_front() {
            for &c in &children[u] {
                if depth[c] == usize::MAX {
                    depth[c] = depth[u] + 1;
                    q.push_back(c);
                }
            }
        }
        if let Some(v) = (0..n).find(|&v| depth[v] == usize::MAX) {
            return Err(Error::InvalidGraph(format!(
                "state {v} is unreachable from the initial state {initial}"
            )));
        }

        let terminals: Vec<StateId> = (0..n).filter(|&v| terminal[v]).collect();
        if terminals.is_empty() {
            return Err(Error::InvalidGraph("graph has no terminal states".into()));
        }
        let mut term_index = vec![None; n];
        for (i, &x) in terminals.iter().enumerate() {
            term_index[x] = Some(i);
        }

        // Longest trajectory length, via DP along the topological order.
        let mut longest = vec![0usize; n];
        for &v in &topo {
            for &c in &children[v] {
                longest[c] = longest[c].max(longest[v] + 1);
            }
        }
        let max_traj_len = terminals.iter().map(|&x| longest[x]).max().unwrap();
        let max_depth = depth.iter().copied().max().unwrap();

        Ok(StateGraph {
            initial,
            terminal,
            labels,
            children,
            parents,
            terminals,
            term_index,
            topo,
            depth,
            max_depth,
            max_traj_len,
            reach: (0..n).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn num_states(&self) -> usize {
        self.terminal.len()
    }

    pub fn num_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn num_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn is_terminal(&self, v: StateId) -> bool {
        self.terminal[v]
    }

    pub fn children(&self, v: StateId) -> &[StateId] {
        &self.children[v]
    }

    pub fn parents(&self, v: StateId) -> &[StateId] {
        &self.parents[v]
    }

    /// Position of `v` within `children(u)`, if the edge (u, v) exists.
    pub fn child_index(&self, u: StateId, v: StateId) -> Option<usize> {
        self.children[u].binary_search(&v).ok()
    }

    pub fn parent_index(&self, v: StateId, u: StateId) -> Option<usize> {
        self.parents[v].binary_search(&u).ok()
    }

    /// Terminal ids in ascending order; marginals are indexed by position
    /// in this slice.
    pub fn terminals(&self) -> &[StateId] {
        &self.terminals
    }

    pub fn terminal_index(&self, x: StateId) -> Option<usize> {
        self.term_index.get(x).copied().flatten()
    }

    pub fn label(&self, v: StateId) -> Option<&str> {
        self.labels[v].as_deref()
    }

    /// States in a deterministic topological order (parents before children).
    pub fn topo_order(&self) -> &[StateId] {
        &self.topo
    }

    /// Shortest-path distance from the initial state.
    pub fn geodesic_depth(&self, v: StateId) -> usize {
        self.depth[v]
    }

    /// Maximum geodesic depth over all states.
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Length (edge count) of the longest complete trajectory.
    pub fn max_trajectory_len(&self) -> usize {
        self.max_traj_len
    }

    /// Sorted terminal ids reachable from `v` (including `v` itself when
    /// terminal). Computed once per state and cached.
    pub fn reachable_terminals(&self, v: StateId) -> Arc<[StateId]> {
        if v >= self.num_states() {
            panic!("state id {v} out of range");
        }
        self.reach[v]
            .get_or_init(|| {
                let mut seen = vec![false; self.num_states()];
                let mut stack = vec![v];
                seen[v] = true;
                let mut out = Vec::new();
                while let Some(u) = stack.pop() {
                    if self.terminal[u] {
                        out.push(u);
                    }
                    for &c in &self.children[u] {
                        if !seen[c] {
                            seen[c] = true;
                            stack.push(c);
                        }
                    }
                }
                out.sort_unstable();
                out.into()
            })
            .clone()
    }

    /// Number of terminals reachable from `v`.
    pub fn descendant_terminal_count(&self, v: StateId) -> usize {
        self.reachable_terminals(v).len()
    }
}

/// Complete `g`-ary tree of height `h`, BFS-numbered from the root (id 0);
/// the `g^h` leaves are the terminals.
pub fn build_regular_tree(g: u32, h: u32) -> Result<StateGraph> {
    build_regular_tree_capped(g, h, DEFAULT_CAPACITY)
}

pub fn build_regular_tree_capped(g: u32, h: u32, guard: u64) -> Result<StateGraph> {
    if g < 1 || h < 1 {
        return Err(Error::InvalidArg(format!(
            "regular tree needs g >= 1 and h >= 1, got g={g}, h={h}"
        )));
    }
    // total states = (g^(h+1) - 1)/(g - 1), computed overflow-safely
    let mut total: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=h {
        total += level;
        if total > guard as u128 {
            return Err(Error::Capacity {
                what: format!("regular tree g={g} h={h}"),
                needed: total,
                guard,
            });
        }
        level = level
            .checked_mul(g as u128)
            .filter(|&l| l <= u128::from(u64::MAX))
            .ok_or(Error::Capacity {
                what: format!("regular tree g={g} h={h}"),
                needed: u128::MAX,
                guard,
            })?;
    }
    let n = total as usize;

    let mut edges = Vec::with_capacity(n - 1);
    let mut level_start = 0usize;
    let mut level_size = 1usize;
    for _ in 0..h {
        let next_start = level_start + level_size;
        for i in 0..level_size {
            let u = level_start + i;
            for j in 0..g as usize {
                edges.push((u, next_start + i * g as usize + j));
            }
        }
        level_start = next_start;
        level_size *= g as usize;
    }
    let terminal: Vec<bool> = (0..n).map(|v| v >= level_start).collect();
    StateGraph::new(0, terminal, vec![None; n], &edges, guard)
}

/// Binomial coefficient in wide arithmetic (saturating on overflow).
pub fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
    }
    acc
}

/// Subset-construction graph: states are subsets of {1..d} of size <= s,
/// edges insert one element, size-s subsets are terminal. Within each size
/// level, ids follow colexicographic rank, so the id of a subset is
/// independent of insertion order.
pub fn build_set_graph(d: u32, s: u32) -> Result<StateGraph> {
    build_set_graph_capped(d, s, DEFAULT_CAPACITY)
}

pub fn build_set_graph_capped(d: u32, s: u32, guard: u64) -> Result<StateGraph> {
    if d < 1 || s < 1 || s > d {
        return Err(Error::InvalidArg(format!(
            "set graph needs 1 <= s <= d, got d={d}, s={s}"
        )));
    }
    let mut total: u128 = 0;
    for k in 0..=s {
        total += binomial(d as u64, k as u64);
        if total > guard as u128 {
            return Err(Error::Capacity {
                what: format!("set graph d={d} s={s}"),
                needed: total,
                guard,
            });
        }
    }
    let n = total as usize;

    // level_offset[k] = id of the colex-first subset of size k
    let mut level_offset = vec![0usize; s as usize + 2];
    for k in 0..=s as usize {
        level_offset[k + 1] = level_offset[k] + binomial(d as u64, k as u64) as usize;
    }

    // colex rank of a sorted subset over 0-based elements
    let rank = |subset: &[u32]| -> usize {
        subset
            .iter()
            .enumerate()
            .map(|(i, &e)| binomial(e as u64, i as u64 + 1) as usize)
            .sum()
    };

    let mut edges = Vec::new();
    // enumerate subsets of each size k < s and wire single-element insertions;
    // ids come from the colex rank, so enumeration order is irrelevant
    let mut subset: Vec<u32> = Vec::new();
    for k in 0..s as usize {
        subset.clear();
        subset.extend(0..k as u32);
        loop {
            let u = level_offset[k] + rank(&subset);
            for e in 0..d {
                if subset.binary_search(&e).is_err() {
                    let mut next = subset.clone();
                    let pos = next.partition_point(|&x| x < e);
                    next.insert(pos, e);
                    let v = level_offset[k + 1] + rank(&next);
                    edges.push((u, v));
                }
            }
            // lexicographic successor of `subset` among size-k subsets
            let mut i = k as i64 - 1;
            while i >= 0 && subset[i as usize] == d - k as u32 + i as u32 {
                i -= 1;
            }
            if i < 0 {
                break;
            }
            let i = i as usize;
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
        }
    }
    let terminal: Vec<bool> = (0..n).map(|v| v >= level_offset[s as usize]).collect();
    StateGraph::new(0, terminal, vec![None; n], &edges, guard)
}

/// Maps a sorted 1-based element set to its state id in `build_set_graph(d, s)`.
pub fn set_state_id(d: u32, elements: &[u32]) -> Result<StateId> {
    let k = elements.len();
    let mut offset = 0usize;
    for j in 0..k {
        offset += binomial(d as u64, j as u64) as usize;
    }
    let mut prev = 0u32;
    let mut r = 0usize;
    for (i, &e) in elements.iter().enumerate() {
        if e < 1 || e > d || (i > 0 && e <= prev) {
            return Err(Error::InvalidArg(format!(
                "elements must be strictly increasing in 1..={d}"
            )));
        }
        prev = e;
        r += binomial((e - 1) as u64, i as u64 + 1) as usize;
    }
    Ok(offset + r)
}

/// Inverse of [`set_state_id`]: recovers the sorted 1-based element set of a
/// state in `build_set_graph(d, s)`.
pub fn set_state_elements(d: u32, s: u32, id: StateId) -> Result<Vec<u32>> {
    let mut offset = 0usize;
    let mut k = None;
    for size in 0..=s {
        let count = binomial(d as u64, size as u64) as usize;
        if id < offset + count {
            k = Some(size as usize);
            break;
        }
        offset += count;
    }
    let k = k.ok_or(Error::UnknownState(id))?;
    let mut r = id - offset;
    let mut elements = vec![0u32; k];
    for i in (1..=k).rev() {
        // largest c with C(c, i) <= r
        let mut c = i as u64 - 1;
        while binomial(c + 1, i as u64) as usize <= r {
            c += 1;
        }
        elements[i - 1] = c as u32 + 1; // back to 1-based
        r -= binomial(c, i as u64) as usize;
    }
    Ok(elements)
}

#[derive(Serialize, Deserialize)]
struct StateRec {
    id: usize,
    terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    initial: usize,
    states: Vec<StateRec>,
    edges: Vec<(usize, usize)>,
}

impl StateGraph {
    pub fn to_json(&self) -> String {
        let file = GraphFile {
            initial: self.initial,
            states: (0..self.num_states())
                .map(|id| StateRec {
                    id,
                    terminal: self.terminal[id],
                    label: self.labels[id].clone(),
                })
                .collect(),
            edges: {
                let mut e: Vec<(usize, usize)> = (0..self.num_states())
                    .flat_map(|u| self.children[u].iter().map(move |&v| (u, v)))
                    .collect();
                e.sort_unstable();
                e
            },
        };
        serde_json::to_string_pretty(&file).expect("graph serialization cannot fail")
    }

    pub fn from_json(text: &str, guard: u64) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<graph json>".into(),
            detail: e.to_string(),
        })?;
        let n = file.states.len();
        let mut terminal = vec![None::<bool>; n];
        let mut labels = vec![None::<String>; n];
        for rec in file.states {
            if rec.id >= n {
                return Err(Error::InvalidGraph(format!(
                    "state id {} out of range for {} states (ids must be 0..{})",
                    rec.id,
                    n,
                    n.saturating_sub(1)
                )));
            }
            if terminal[rec.id].is_some() {
                return Err(Error::InvalidGraph(format!("duplicate state id {}", rec.id)));
            }
            terminal[rec.id] = Some(rec.terminal);
            labels[rec.id] = rec.label;
        }
        let terminal: Vec<bool> = terminal.into_iter().map(|t| t.unwrap()).collect();
        StateGraph::new(file.initial, terminal, labels, &file.edges, guard)
    }
}

/// Writes `contents` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::write(&tmp, contents).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub fn save_graph(graph: &StateGraph, path: &Path) -> Result<()> {
    write_atomic(path, &graph.to_json())
}

pub fn load_graph(path: &Path, guard: u64) -> Result<StateGraph> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    StateGraph::from_json(&text, guard).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::Parse {
            path: path.display().to_string(),
            detail,
        },
        other => other,
    })
}

/// Graphviz rendering; terminals drawn as double circles.
pub fn export_dot(graph: &StateGraph) -> String {
    let mut out = String::from("digraph state_graph {\n  rankdir=LR;\n");
    let _ = writeln!(out, "  {} [style=bold];", graph.initial());
    for v in 0..graph.num_states() {
        if graph.is_terminal(v) {
            let _ = writeln!(out, "  {v} [shape=doublecircle];");
        }
    }
    for u in 0..graph.num_states() {
        for &v in graph.children(u) {
            let _ = writeln!(out, "  {u} -> {v};");
        }
    }
    out.push_str("}\n");
    out
}
