//! Color-refinement expressiveness limits: states labeled with undirected
//! graphs, 1-WL (Weisfeiler-Lehman) color classes, and policies whose logit
//! rows are tied within a class.
//!
//! Tying emulates exactly what a message-passing network bounded by the 1-WL
//! test can express: such a network's output is a function of the stable
//! color, so forcing equal rows on same-color states is the tightest
//! constraint it imposes. The counterexample instance built here has two
//! middle states labeled by the classic indistinguishable pair (a 6-cycle vs
//! two triangles); any tied policy factors the four leaf probabilities as
//! `(ab, a(1-b), (1-a)b, (1-a)(1-b))`, which keeps some targets a positive
//! total-variation distance away no matter the parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flows::{exact_marginal, total_variation};
use crate::grad::{Adam, ParamGrad};
use crate::graph::{StateGraph, StateId};
use crate::parallel::map_indexed;
use crate::policy::TabularPolicy;
use crate::target::TargetDistribution;
use crate::train::{loss_and_gradient, sample_trajectory, trace_fcs, LossKind, TraceRow, TrainConfig};
use rand::SeedableRng;

/// An undirected simple graph used as an opaque state label. All nodes carry
/// the same feature, so refinement starts from a single color.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphState {
    adj: Vec<Vec<bool>>,
}

impl GraphState {
    /// Edgeless graph on `n` nodes.
    pub fn new(n: usize) -> Self {
        Self {
            adj: vec![vec![false; n]; n],
        }
    }

    pub fn single() -> Self {
        Self::new(1)
    }

    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<()> {
        let n = self.n();
        if u >= n || v >= n {
            return Err(Error::InvalidArg(format!(
                "edge ({u}, {v}) out of range for {n} nodes"
            )));
        }
        if u == v {
            return Err(Error::InvalidArg(format!("self-loop at node {u}")));
        }
        self.adj[u][v] = true;
        self.adj[v][u] = true;
        Ok(())
    }

    /// Cycle on `n >= 3` nodes.
    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArg(format!("cycle needs >= 3 nodes, got {n}")));
        }
        let mut g = Self::new(n);
        for i in 0..n {
            g.add_edge(i, (i + 1) % n)?;
        }
        Ok(g)
    }

    /// Disjoint union of `k >= 1` triangles.
    pub fn triangles(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArg("need at least one triangle".into()));
        }
        let mut g = Self::cycle(3)?;
        for _ in 1..k {
            g = g.disjoint_union(&Self::cycle(3)?);
        }
        Ok(g)
    }

    pub fn disjoint_union(&self, other: &Self) -> Self {
        let (a, b) = (self.n(), other.n());
        let mut g = Self::new(a + b);
        for u in 0..a {
            for v in 0..a {
                g.adj[u][v] = self.adj[u][v];
            }
        }
        for u in 0..b {
            for v in 0..b {
                g.adj[a + u][a + v] = other.adj[u][v];
            }
        }
        g
    }

    /// Copy with one new degree-1 node attached to `attach`.
    pub fn with_pendant(&self, attach: usize) -> Result<Self> {
        let n = self.n();
        if attach >= n {
            return Err(Error::InvalidArg(format!(
                "pendant anchor {attach} out of range for {n} nodes"
            )));
        }
        let mut g = Self::new(n + 1);
        for u in 0..n {
            for v in 0..n {
                g.adj[u][v] = self.adj[u][v];
            }
        }
        g.add_edge(attach, n)?;
        Ok(g)
    }

    pub fn with_pendants(&self, attaches: &[usize]) -> Result<Self> {
        let mut g = self.clone();
        for &a in attaches {
            g = g.with_pendant(a)?;
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u][v]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.adj[u].iter().filter(|&&b| b).count()
    }

    fn neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[u]
            .iter()
            .enumerate()
            .filter_map(|(v, &b)| b.then_some(v))
    }

    /// Compact text form `n:u-v,u-v,...` used as an opaque state label.
    pub fn encode(&self) -> String {
        let n = self.n();
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if self.adj[u][v] {
                    edges.push(format!("{u}-{v}"));
                }
            }
        }
        format!("{n}:{}", edges.join(","))
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = || Error::InvalidArg(format!("malformed graph label {text:?}"));
        let (n_str, edges) = text.split_once(':').ok_or_else(bad)?;
        let n: usize = n_str.parse().map_err(|_| bad())?;
        let mut g = Self::new(n);
        if !edges.is_empty() {
            for pair in edges.split(',') {
                let (u, v) = pair.split_once('-').ok_or_else(bad)?;
                let u: usize = u.parse().map_err(|_| bad())?;
                let v: usize = v.parse().map_err(|_| bad())?;
                g.add_edge(u, v)?;
            }
        }
        Ok(g)
    }
}

/// Stable 1-WL coloring of a family of graph-labeled states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WlPartition {
    color_of: Vec<usize>,
    rounds: usize,
    histograms: Vec<Vec<usize>>,
}

impl WlPartition {
    /// Color id of the i-th input state (equal ids mean 1-WL cannot tell the
    /// labels apart).
    pub fn color_of(&self, i: usize) -> usize {
        self.color_of[i]
    }

    pub fn same_color(&self, i: usize, j: usize) -> bool {
        self.color_of[i] == self.color_of[j]
    }

    pub fn num_colors(&self) -> usize {
        self.color_of.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Refinement rounds actually run before stability.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Sorted stable node colors of the i-th state's label; the canonical
    /// certificate two states are compared by.
    pub fn histogram(&self, i: usize) -> &[usize] {
        &self.histograms[i]
    }

    /// State indices grouped by color, in color order.
    pub fn classes(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_colors()];
        for (i, &c) in self.color_of.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

/// Classic 1-WL color refinement run jointly on all labels (as one disjoint
/// union, so graphs of different sizes are comparable): every node starts
/// with one color, and each round re-colors by the pair (own color, sorted
/// neighbor colors) until the partition stops changing or `rounds` is hit.
/// Two states get the same color exactly when their stable node-color
/// histograms are equal.
pub fn wl_colors(states: &[GraphState], rounds: Option<usize>) -> WlPartition {
    let offsets: Vec<usize> = states
        .iter()
        .scan(0, |acc, g| {
            let o = *acc;
            *acc += g.n();
            Some(o)
        })
        .collect();
    let total: usize = states.iter().map(|g| g.n()).sum();
    let cap = rounds.unwrap_or(total.max(1));
    let mut colors = vec![0usize; total];
    let mut num_colors = 1usize;
    let mut used = 0;
    for _ in 0..cap {
        let mut signatures: Vec<(usize, Vec<usize>)> = Vec::with_capacity(total);
        for (s, g) in states.iter().enumerate() {
            let base = offsets[s];
            for u in 0..g.n() {
                let mut nb: Vec<usize> = g.neighbors(u).map(|v| colors[base + v]).collect();
                nb.sort_unstable();
                signatures.push((colors[base + u], nb));
            }
        }
        let mut table: BTreeMap<&(usize, Vec<usize>), usize> = BTreeMap::new();
        for sig in &signatures {
            let next = table.len();
            table.entry(sig).or_insert(next);
        }
        // refinement never merges classes, so an unchanged count means the
        // partition is stable
        if table.len() == num_colors {
            break;
        }
        num_colors = table.len();
        colors = signatures.iter().map(|s| table[s]).collect();
        used += 1;
    }
    let mut histograms = Vec::with_capacity(states.len());
    for (s, g) in states.iter().enumerate() {
        let mut h: Vec<usize> = (0..g.n()).map(|u| colors[offsets[s] + u]).collect();
        h.sort_unstable();
        histograms.push(h);
    }
    let mut seen: BTreeMap<&[usize], usize> = BTreeMap::new();
    let mut color_of = Vec::with_capacity(states.len());
    for h in &histograms {
        let next = seen.len();
        color_of.push(*seen.entry(h.as_slice()).or_insert(next));
    }
    WlPartition {
        color_of,
        rounds: used,
        histograms,
    }
}

/// Slot correspondence for tied rows: which states share a row, and how each
/// state's children map onto the class's canonical slots.
///
/// Children are ordered by (label size, stable color histogram, state id):
/// comparing sizes first keeps slots aligned even when two tied states'
/// children are themselves distinguishable, and the id breaks exact ties
/// deterministically.
#[derive(Debug, Clone)]
pub struct Tying {
    class_of: Vec<usize>,
    members: Vec<Vec<StateId>>,
    /// per state: canonical slot -> index into `graph.children(v)`
    slot_to_child: Vec<Vec<usize>>,
}

impl Tying {
    /// Builds the correspondence for a graph whose state `v` is labeled
    /// `labels[v]` and colored by `partition`. Errors when two same-color
    /// states have different out-degrees (a shared row is then ill-posed).
    pub fn new(
        graph: &StateGraph,
        labels: &[GraphState],
        partition: &WlPartition,
    ) -> Result<Self> {
        if labels.len() != graph.num_states() {
            return Err(Error::InvalidArg(format!(
                "{} labels for {} states",
                labels.len(),
                graph.num_states()
            )));
        }
        let class_of: Vec<usize> = (0..graph.num_states())
            .map(|v| partition.color_of(v))
            .collect();
        let mut members = vec![Vec::new(); partition.num_colors()];
        for (v, &c) in class_of.iter().enumerate() {
            members[c].push(v);
        }
        for class in &members {
            for pair in class.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if graph.children(a).len() != graph.children(b).len() {
                    return Err(Error::InvalidArg(format!(
                        "tied states {a} and {b} have out-degrees {} and {}",
                        graph.children(a).len(),
                        graph.children(b).len()
                    )));
                }
            }
        }
        let mut slot_to_child = Vec::with_capacity(graph.num_states());
        for v in 0..graph.num_states() {
            let children = graph.children(v);
            let mut order: Vec<usize> = (0..children.len()).collect();
            order.sort_by(|&i, &j| {
                let (ci, cj) = (children[i], children[j]);
                let (hi, hj) = (partition.histogram(ci), partition.histogram(cj));
                hi.len()
                    .cmp(&hj.len())
                    .then_with(|| hi.cmp(hj))
                    .then_with(|| ci.cmp(&cj))
            });
            slot_to_child.push(order);
        }
        Ok(Self {
            class_of,
            members,
            slot_to_child,
        })
    }

    pub fn class_of(&self, v: StateId) -> usize {
        self.class_of[v]
    }

    pub fn members(&self, class: usize) -> &[StateId] {
        &self.members[class]
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// Child position (into `graph.children(v)`) sitting at `slot` of `v`'s
    /// canonical row.
    pub fn child_at_slot(&self, v: StateId, slot: usize) -> usize {
        self.slot_to_child[v][slot]
    }

    /// Projects a gradient onto the tied subspace: class totals are gathered
    /// slot-wise across members, and every member's row is replaced by its
    /// class total. Rows that start equal stay equal under any elementwise
    /// optimizer fed the projected gradient.
    pub fn project_grad(&self, grad: &mut ParamGrad) {
        for class in &self.members {
            let Some(&first) = class.first() else {
                continue;
            };
            let slots = self.slot_to_child[first].len();
            let mut total = vec![0.0; slots];
            for &v in class {
                for (slot, sum) in total.iter_mut().enumerate() {
                    *sum += grad.forward_logits[v][self.slot_to_child[v][slot]];
                }
            }
            for &v in class {
                for (slot, &sum) in total.iter().enumerate() {
                    grad.forward_logits[v][self.slot_to_child[v][slot]] = sum;
                }
            }
        }
    }
}

/// Uniform-logit policy whose rows respect the tying (trivially, since all
/// rows are zero), paired with the correspondence that keeps them tied.
pub fn tied_policy(
    graph: &Arc<StateGraph>,
    labels: &[GraphState],
    partition: &WlPartition,
) -> Result<(TabularPolicy, Tying)> {
    let tying = Tying::new(graph, labels, partition)?;
    let policy = TabularPolicy::new_uniform(graph.clone()).with_log_z(0.0);
    Ok((policy, tying))
}

/// A graph-labeled instance: the DAG, its target, the per-state labels, the
/// 1-WL partition of those labels, and the induced tying.
#[derive(Debug, Clone)]
pub struct WlInstance {
    pub target: TargetDistribution,
    pub labels: Vec<GraphState>,
    pub partition: WlPartition,
    pub tying: Tying,
}

impl WlInstance {
    pub fn graph(&self) -> &Arc<StateGraph> {
        self.target.graph()
    }
}

fn counterexample_with_rewards(rewards: [f64; 4]) -> WlInstance {
    let hexagon = GraphState::cycle(6).expect("cycle(6)");
    let two_triangles = GraphState::triangles(2).expect("triangles(2)");
    // one pendant / two pendants on the same component break the cycles'
    // regularity, so the four leaves are pairwise distinguishable while the
    // two middle states stay tied
    let labels = vec![
        GraphState::single(),
        hexagon.clone(),
        two_triangles.clone(),
        hexagon.with_pendant(0).expect("pendant"),
        hexagon.with_pendants(&[0, 1]).expect("pendants"),
        two_triangles.with_pendant(0).expect("pendant"),
        two_triangles.with_pendants(&[0, 1]).expect("pendants"),
    ];
    let edges = [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)];
    let terminal = vec![false, false, false, true, true, true, true];
    let label_strings = labels.iter().map(|g| Some(g.encode())).collect();
    let graph = Arc::new(
        StateGraph::new(0, terminal, label_strings, &edges, 100).expect("counterexample graph"),
    );
    let target = TargetDistribution::from_rewards(graph.clone(), &rewards).expect("target");
    let partition = wl_colors(&labels, None);
    let tying = Tying::new(&graph, &labels, &partition).expect("tying");
    WlInstance {
        target,
        labels,
        partition,
        tying,
    }
}

/// The unlearnable instance: leaf targets `(1/6, 1/6, 1/6, 1/2)` over the
/// 7-state DAG whose middle states carry the 6-cycle / two-triangles pair.
/// No tied policy reaches this target: the reachable set is
/// `(ab, a(1-b), (1-a)b, (1-a)(1-b))`, which stays at least
/// `sqrt(2) - 4/3 ~ 0.0809` away in total variation.
pub fn wl_counterexample() -> WlInstance {
    counterexample_with_rewards([1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 2.0])
}

/// Same instance with the learnable target `(1/6, 1/3, 1/6, 1/3)`: constant
/// across tied siblings' slot-aligned descendants, so tying costs nothing.
pub fn wl_homogeneous() -> WlInstance {
    counterexample_with_rewards([1.0 / 6.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0])
}

/// Best total variation any tied policy can reach on a two-level instance,
/// with the achieving branch probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinTvReport {
    pub tv: f64,
    /// Root probability of its first canonical child.
    pub a: f64,
    /// Tied states' shared probability of their first canonical slot.
    pub b: f64,
}

/// Minimum of `TV((ab, a(1-b), (1-a)b, (1-a)(1-b)), target)` over the unit
/// square, by a dense grid pass plus two local zooms. Requires the two-level
/// shape: a root with two tied children, each with two terminal children.
/// The returned floor certifies what tied training can never beat.
pub fn min_tv_under_tying(instance: &WlInstance, threads: usize) -> Result<MinTvReport> {
    let graph = instance.graph();
    let root = graph.initial();
    let mids = graph.children(root);
    if mids.len() != 2 {
        return Err(Error::InvalidArg(
            "two-level instance needs exactly two root children".into(),
        ));
    }
    if !instance.tying.same_class(mids[0], mids[1]) {
        return Err(Error::InvalidArg(
            "the two root children must be tied".into(),
        ));
    }
    let probabilities = instance.target.probabilities();
    // leaf target probabilities in (root slot, mid slot) order
    let mut pi = [0.0f64; 4];
    for (i, &mid_pos) in instance.tying.slot_to_child[root].iter().enumerate() {
        let mid = graph.children(root)[mid_pos];
        let leaves = graph.children(mid);
        if leaves.len() != 2 {
            return Err(Error::InvalidArg(
                "two-level instance needs two children per middle state".into(),
            ));
        }
        for (j, &leaf_pos) in instance.tying.slot_to_child[mid].iter().enumerate() {
            let leaf = leaves[leaf_pos];
            let pos = graph
                .terminal_index(leaf)
                .ok_or_else(|| Error::InvalidArg(format!("leaf {leaf} is not terminal")))?;
            pi[2 * i + j] = probabilities[pos];
        }
    }
    let tv_at = |a: f64, b: f64| -> f64 {
        0.5 * ((a * b - pi[0]).abs()
            + (a * (1.0 - b) - pi[1]).abs()
            + ((1.0 - a) * b - pi[2]).abs()
            + ((1.0 - a) * (1.0 - b) - pi[3]).abs())
    };
    let scan = |a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64, step: f64| -> (f64, f64, f64) {
        let na = ((a_hi - a_lo) / step).round() as usize + 1;
        let nb = ((b_hi - b_lo) / step).round() as usize + 1;
        let rows = map_indexed(na, threads, |ia| {
            let a = (a_lo + ia as f64 * step).clamp(0.0, 1.0);
            let mut best = (f64::INFINITY, a, 0.0);
            for ib in 0..nb {
                let b = (b_lo + ib as f64 * step).clamp(0.0, 1.0);
                let tv = tv_at(a, b);
                if tv < best.0 {
                    best = (tv, a, b);
                }
            }
            best
        });
        rows.into_iter()
            .min_by(|x, y| x.partial_cmp(y).expect("finite total variation"))
            .expect("nonempty grid")
    };
    let (_, a1, b1) = scan(0.0, 1.0, 0.0, 1.0, 1e-3);
    let (_, a2, b2) = scan(
        (a1 - 2e-3).max(0.0),
        (a1 + 2e-3).min(1.0),
        (b1 - 2e-3).max(0.0),
        (b1 + 2e-3).min(1.0),
        1e-5,
    );
    let (tv, a, b) = scan(
        (a2 - 2e-5).max(0.0),
        (a2 + 2e-5).min(1.0),
        (b2 - 2e-5).max(0.0),
        (b2 + 2e-5).min(1.0),
        1e-7,
    );
    Ok(MinTvReport { tv, a, b })
}

impl Tying {
    pub fn same_class(&self, a: StateId, b: StateId) -> bool {
        self.class_of[a] == self.class_of[b]
    }
}

/// Full-trajectory balance training with rows tied per color class: the
/// per-state gradient is projected (class-summed) before each optimizer
/// step, which keeps same-class rows exactly equal throughout.
pub fn train_tied(
    target: &TargetDistribution,
    tying: &Tying,
    config: &TrainConfig,
) -> Result<(TabularPolicy, Vec<TraceRow>)> {
    config.validate()?;
    let mut policy = TabularPolicy::new_uniform(target.graph().clone()).with_log_z(0.0);
    let mut adam = Adam::new(&policy, config.adam.clone())?;
    let mut trace = Vec::new();
    for epoch in 0..config.epochs {
        let sampler = &policy;
        let batch = map_indexed(config.batch_size, config.threads, |slot| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(((epoch as u64) << 32) | slot as u64);
            sample_trajectory(sampler, config.exploration, &mut rng)
        });
        let (loss, mut grad) = loss_and_gradient(&policy, target, &batch, &LossKind::Tb, epoch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: "non-finite tied training step".into(),
            });
        }
        tying.project_grad(&mut grad);
        adam.step(&mut policy, &grad)?;
        if epoch % config.eval_every == 0 || epoch + 1 == config.epochs {
            let marginal = exact_marginal(&policy);
            let tv = total_variation(&marginal, &target.probabilities());
            let fcs_mean = trace_fcs(&marginal, target, config.seed ^ epoch as u64)?;
            trace.push(TraceRow {
                epoch,
                loss,
                tv,
                fcs_mean,
            });
        }
    }
    Ok((policy, trace))
}

/// Number of labeled simple graphs on `n` nodes, `2^binom(n,2)`.
pub fn labeled_graph_count(n: u32) -> Result<u128> {
    let pairs = n as u64 * (n as u64 - 1) / 2;
    if pairs >= 128 {
        return Err(Error::Capacity {
            what: "labeled graph count bits".into(),
            needed: pairs as u128,
            guard: 127,
        });
    }
    Ok(1u128 << pairs)
}

/// Number of isomorphism classes of simple graphs on `n` unlabeled nodes,
/// by Burnside's lemma over the node-permutation action on node pairs:
/// `(1/n!) * sum over cycle types of class_size * 2^(pair orbits)` where a
/// cycle type with parts `l_i` induces `sum_i floor(l_i/2) + sum_{i<j}
/// gcd(l_i, l_j)` orbits on pairs.
pub fn unlabeled_graph_count(n: u32) -> Result<u128> {
    if n == 0 || n > 16 {
        return Err(Error::InvalidArg(format!(
            "unlabeled graph count supported for 1..=16 nodes, got {n}"
        )));
    }
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    fn factorial(n: u64) -> u128 {
        (1..=n as u128).product()
    }
    // enumerate integer partitions of n as sorted part lists
    fn partitions(n: u64, max: u64, prefix: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if n == 0 {
            out.push(prefix.clone());
            return;
        }
        for part in (1..=max.min(n)).rev() {
            prefix.push(part);
            partitions(n - part, part, prefix, out);
            prefix.pop();
        }
    }
    let mut parts = Vec::new();
    partitions(n as u64, n as u64, &mut Vec::new(), &mut parts);
    let mut total: u128 = 0;
    for p in &parts {
        // permutations with this cycle type: n! / (prod l_i * prod m_l!)
        let mut denom: u128 = 1;
        let mut mult: BTreeMap<u64, u64> = BTreeMap::new();
        for &l in p {
            denom *= l as u128;
            *mult.entry(l).or_insert(0) += 1;
        }
        for (_, m) in mult {
            denom *= factorial(m);
        }
        let class_size = factorial(n as u64) / denom;
        let mut orbits: u64 = p.iter().map(|&l| l / 2).sum();
        for i in 0..p.len() {
            for j in (i + 1)..p.len() {
                orbits += gcd(p[i], p[j]);
            }
        }
        total += class_size * (1u128 << orbits);
    }
    Ok(total / factorial(n as u64))
}

/// How many times smaller the isomorphism-reduced space of `n`-node graphs
/// is than the labeled one.
pub fn graph_space_reduction(n: u32) -> Result<f64> {
    Ok(labeled_graph_count(n)? as f64 / unlabeled_graph_count(n)? as f64)
}
