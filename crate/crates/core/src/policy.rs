//! Tabular forward/backward policies and explicit flow assignments.
//!
//! Forward probabilities are softmaxes of per-state logit rows aligned with
//! `graph.children(v)`. The backward policy is either fixed-uniform over
//! parents or its own learnable logit table. Optional extras carried for the
//! balance losses: a scalar log-partition estimate and per-state log flows.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{write_atomic, StateGraph, StateId};
use crate::target::{log_sum_exp, TargetDistribution};

#[derive(Debug, Clone)]
pub enum Backward {
    Uniform,
    /// Logit rows aligned with `graph.parents(v)`; the initial state's row
    /// is empty.
    Learnable(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct TabularPolicy {
    graph: Arc<StateGraph>,
    forward_logits: Vec<Vec<f64>>,
    backward: Backward,
    log_state_flow: Option<Vec<f64>>,
    log_z: Option<f64>,
}

impl TabularPolicy {
    /// Zero logits everywhere: uniform forward and backward transitions.
    pub fn new_uniform(graph: Arc<StateGraph>) -> Self {
        let forward_logits = (0..graph.num_states())
            .map(|v| vec![0.0; graph.children(v).len()])
            .collect();
        TabularPolicy {
            graph,
            forward_logits,
            backward: Backward::Uniform,
            log_state_flow: None,
            log_z: None,
        }
    }

    pub fn with_log_z(mut self, log_z: f64) -> Self {
        self.log_z = Some(log_z);
        self
    }

    /// Drops the log-partition head (updates that never read or learn it
    /// should not carry a stale estimate around).
    pub fn without_log_z(mut self) -> Self {
        self.log_z = None;
        self
    }

    /// Attaches per-state log flows (one entry per state; only nonterminal
    /// entries are ever read).
    pub fn with_state_flows(mut self, log_state_flow: Vec<f64>) -> Result<Self> {
        if log_state_flow.len() != self.graph.num_states() {
            return Err(Error::InvalidArg(format!(
                "{} state flows for {} states",
                log_state_flow.len(),
                self.graph.num_states()
            )));
        }
        self.log_state_flow = Some(log_state_flow);
        Ok(self)
    }

    pub fn with_learnable_backward(mut self) -> Self {
        let rows = (0..self.graph.num_states())
            .map(|v| vec![0.0; self.graph.parents(v).len()])
            .collect();
        self.backward = Backward::Learnable(rows);
        self
    }

    pub fn graph(&self) -> &Arc<StateGraph> {
        &self.graph
    }

    pub fn log_z(&self) -> Option<f64> {
        self.log_z
    }

    pub fn set_log_z(&mut self, v: f64) {
        self.log_z = Some(v);
    }

    pub fn log_state_flow(&self) -> Option<&[f64]> {
        self.log_state_flow.as_deref()
    }

    pub fn log_state_flow_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.log_state_flow.as_mut()
    }

    pub fn backward(&self) -> &Backward {
        &self.backward
    }

    pub fn backward_mut(&mut self) -> &mut Backward {
        &mut self.backward
    }

    pub fn forward_logits(&self) -> &[Vec<f64>] {
        &self.forward_logits
    }

    pub fn forward_logits_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.forward_logits
    }

    pub fn set_forward_logits(&mut self, v: StateId, row: &[f64]) -> Result<()> {
        if row.len() != self.graph.children(v).len() {
            return Err(Error::InvalidArg(format!(
                "state {v} has {} children, got {} logits",
                self.graph.children(v).len(),
                row.len()
            )));
        }
        self.forward_logits[v].copy_from_slice(row);
        Ok(())
    }

    /// Log-softmax over the children of `v`. Logits saturate at
    /// [`LOGIT_CLAMP`] before the softmax (the clamp is not differentiated
    /// through); values inside the range are used exactly.
    pub fn log_forward_row(&self, v: StateId) -> Vec<f64> {
        log_softmax_clamped(&self.forward_logits[v])
    }

    pub fn forward_probs(&self, v: StateId) -> Vec<f64> {
        self.log_forward_row(v).iter().map(|l| l.exp()).collect()
    }

    /// log p_F(u -> children(u)[child_idx])
    pub fn log_pf(&self, u: StateId, child_idx: usize) -> f64 {
        self.log_forward_row(u)[child_idx]
    }

    /// Log backward probabilities over `parents(v)`.
    pub fn log_backward_row(&self, v: StateId) -> Vec<f64> {
        let np = self.graph.parents(v).len();
        match &self.backward {
            Backward::Uniform => vec![-(np as f64).ln(); np],
            Backward::Learnable(rows) => log_softmax_clamped(&rows[v]),
        }
    }

    pub fn log_pb(&self, v: StateId, parent_idx: usize) -> f64 {
        self.log_backward_row(v)[parent_idx]
    }

    /// Full forward probability table, one row per state.
    pub fn forward_prob_table(&self) -> Vec<Vec<f64>> {
        (0..self.graph.num_states())
            .map(|v| self.forward_probs(v))
            .collect()
    }
}

/// Saturation range for logit parameters, applied before every softmax so
/// overflow is impossible no matter what the optimizer writes.
pub const LOGIT_CLAMP: f64 = 30.0;

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

fn log_softmax_clamped(logits: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = logits
        .iter()
        .map(|l| l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        .collect();
    log_softmax(&clamped)
}

/// Edge and node flows on a graph. `edge_flow[v]` is aligned with
/// `children(v)`; `node_flow[v]` is the total flow through `v` (out-flow at
/// nonterminals, sink in-flow at terminals).
#[derive(Debug, Clone)]
pub struct FlowAssignment {
    graph: Arc<StateGraph>,
    edge_flow: Vec<Vec<f64>>,
    node_flow: Vec<f64>,
}

impl FlowAssignment {
    pub fn graph(&self) -> &Arc<StateGraph> {
        &self.graph
    }

    pub fn edge_flow(&self, u: StateId, child_idx: usize) -> f64 {
        self.edge_flow[u][child_idx]
    }

    pub fn edge_flow_between(&self, u: StateId, v: StateId) -> Result<f64> {
        let idx = self
            .graph
            .child_index(u, v)
            .ok_or(Error::InvalidArg(format!("no edge {u} -> {v}")))?;
        Ok(self.edge_flow[u][idx])
    }

    pub fn node_flow(&self, v: StateId) -> f64 {
        self.node_flow[v]
    }

    /// Total flow leaving the initial state.
    pub fn total_flow(&self) -> f64 {
        self.node_flow[self.graph.initial()]
    }

    pub fn scale(&mut self, factor: f64) {
        for row in &mut self.edge_flow {
            for f in row {
                *f *= factor;
            }
        }
        for f in &mut self.node_flow {
            *f *= factor;
        }
    }
}

/// Builds the flow network obtained by fixing terminal flows to the target
/// rewards and pulling flow backwards through the backward policy of
/// `policy`. The result is balanced by construction: in-flow equals
/// out-flow at every interior state, and the forward policy it induces
/// samples exactly the target.
pub fn flow_from_policy(policy: &TabularPolicy, target: &TargetDistribution) -> FlowAssignment {
    let graph = policy.graph().clone();
    let mut edge_flow: Vec<Vec<f64>> = (0..graph.num_states())
        .map(|v| vec![0.0; graph.children(v).len()])
        .collect();
    let mut node_flow = vec![0.0; graph.num_states()];

    // children first, so a state's out-flow is complete before its in-flow
    // is distributed to parents
    for &v in graph.topo_order().iter().rev() {
        let need = if graph.is_terminal(v) {
            let pos = graph.terminal_index(v).unwrap();
            target.log_reward(pos).exp()
        } else {
            edge_flow[v].iter().sum()
        };
        node_flow[v] = need;
        if v == graph.initial() {
            continue;
        }
        let back = policy.log_backward_row(v);
        for (j, &u) in graph.parents(v).iter().enumerate() {
            let idx = graph.child_index(u, v).unwrap();
            edge_flow[u][idx] += need * back[j].exp();
        }
    }

    FlowAssignment {
        graph,
        edge_flow,
        node_flow,
    }
}

/// Forward policy induced by a flow assignment: p_F(u, v) proportional to
/// the edge flow. Also installs the matching log state flows and total-flow
/// log Z, so the result is ready for any balance loss.
pub fn policy_from_flow(flow: &FlowAssignment) -> Result<TabularPolicy> {
    let graph = flow.graph().clone();
    let mut policy = TabularPolicy::new_uniform(graph.clone());
    for v in 0..graph.num_states() {
        if graph.is_terminal(v) {
            continue;
        }
        let out: f64 = flow.edge_flow[v].iter().sum();
        if !(out > 0.0) {
            return Err(Error::InvalidArg(format!(
                "state {v} has zero out-flow; its forward policy is undefined"
            )));
        }
        let row: Vec<f64> = flow.edge_flow[v].iter().map(|f| f.ln()).collect();
        policy.forward_logits[v] = row;
    }
    let log_flows: Vec<f64> = (0..graph.num_states())
        .map(|v| flow.node_flow[v].ln())
        .collect();
    let total = flow.total_flow();
    policy = policy.with_state_flows(log_flows)?;
    Ok(policy.with_log_z(total.ln()))
}

/// Exactly balanced policy for a target: uniform backward, forward induced
/// by the backward-propagated flows, log Z = log of the target partition.
pub fn balanced_policy(target: &TargetDistribution) -> Result<TabularPolicy> {
    let uniform = TabularPolicy::new_uniform(target.graph().clone());
    policy_from_flow(&flow_from_policy(&uniform, target))
}

/// A complete trajectory: states from the initial state to a terminal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub states: Vec<StateId>,
}

impl Trajectory {
    pub fn new(graph: &StateGraph, states: Vec<StateId>) -> Result<Self> {
        if states.first() != Some(&graph.initial()) {
            return Err(Error::InvalidArg(
                "trajectory must start at the initial state".into(),
            ));
        }
        let last = *states.last().unwrap();
        if !graph.is_terminal(last) {
            return Err(Error::InvalidArg(format!(
                "trajectory must end at a terminal, got state {last}"
            )));
        }
        for w in states.windows(2) {
            if graph.child_index(w[0], w[1]).is_none() {
                return Err(Error::InvalidArg(format!(
                    "no edge {} -> {} on trajectory",
                    w[0], w[1]
                )));
            }
        }
        Ok(Trajectory { states })
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn terminal(&self) -> StateId {
        *self.states.last().unwrap()
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_z: Option<f64>,
    forward_logits: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backward_logits: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_state_flow: Option<BTreeMap<String, f64>>,
}

impl TabularPolicy {
    pub fn to_json(&self) -> String {
        let file = PolicyFile {
            log_z: self.log_z,
            forward_logits: self
                .forward_logits
                .iter()
                .enumerate()
                .filter(|(_, row)| !row.is_empty())
                .map(|(v, row)| (v.to_string(), row.clone()))
                .collect(),
            backward_logits: match &self.backward {
                Backward::Uniform => None,
                Backward::Learnable(rows) => Some(
                    rows.iter()
                        .enumerate()
                        .filter(|(_, row)| !row.is_empty())
                        .map(|(v, row)| (v.to_string(), row.clone()))
                        .collect(),
                ),
            },
            log_state_flow: self.log_state_flow.as_ref().map(|flows| {
                flows
                    .iter()
                    .enumerate()
                    .filter(|(v, _)| !self.graph.is_terminal(*v))
                    .map(|(v, f)| (v.to_string(), *f))
                    .collect()
            }),
        };
        serde_json::to_string_pretty(&file).expect("policy serialization cannot fail")
    }

    pub fn from_json(graph: Arc<StateGraph>, text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<policy json>".into(),
            detail: e.to_string(),
        })?;
        let mut policy = TabularPolicy::new_uniform(graph.clone());
        let parse_id = |key: &String| -> Result<StateId> {
            key.parse::<StateId>().map_err(|_| Error::Parse {
                path: "<policy json>".into(),
                detail: format!("bad state id key {key:?}"),
            })
        };
        for (key, row) in &file.forward_logits {
            let v = parse_id(key)?;
            if v >= graph.num_states() {
                return Err(Error::UnknownState(v));
            }
            policy.set_forward_logits(v, row)?;
        }
        if let Some(back) = &file.backward_logits {
            policy = policy.with_learnable_backward();
            let Backward::Learnable(rows) = &mut policy.backward else {
                unreachable!()
            };
            for (key, row) in back {
                let v = parse_id(key)?;
                if v >= graph.num_states() {
                    return Err(Error::UnknownState(v));
                }
                if row.len() != graph.parents(v).len() {
                    return Err(Error::InvalidArg(format!(
                        "state {v} has {} parents, got {} backward logits",
                        graph.parents(v).len(),
                        row.len()
                    )));
                }
                rows[v].copy_from_slice(row);
            }
        }
        if let Some(flows) = &file.log_state_flow {
            let mut table = vec![0.0; graph.num_states()];
            for (key, f) in flows {
                let v = parse_id(key)?;
                if v >= graph.num_states() {
                    return Err(Error::UnknownState(v));
                }
                table[v] = *f;
            }
            policy = policy.with_state_flows(table)?;
        }
        if let Some(z) = file.log_z {
            policy = policy.with_log_z(z);
        }
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json())
    }

    pub fn load(graph: Arc<StateGraph>, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(graph, &text)
    }
}
