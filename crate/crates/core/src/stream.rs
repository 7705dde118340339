//! Streaming posterior updates: adapt a trained sampler to a reweighted
//! target using only the newest evidence chunk.
//!
//! A chunk carries one log-likelihood per terminal state. Multiplying the
//! current target by the chunk's likelihoods yields the next target, and the
//! previous policy is frozen as a reference while a warm-started copy is
//! trained against it. Two update rules are provided:
//!
//! * **balance stream** ([`UpdateKind::Sb`]): minimize the squared residual
//!   of `log Z' + log pf'(tau) - log pb'(tau|x)` against
//!   `log Z + log pf(tau) - log pb(tau|x) + loglik(x)`, which is zero for
//!   every trajectory exactly when the new policy samples the reweighted
//!   target;
//! * **divergence stream** ([`UpdateKind::Kl`]): descend
//!   `E[log pf'(tau) - log pf(tau) - loglik(x)]` under the new policy — a
//!   divergence to the reweighted trajectory distribution, up to an additive
//!   constant — with a leave-one-out-baselined score estimator.
//!
//! [`propagation_audit`] numerically checks the inequalities that bound how
//! sampling error compounds across a sequence of such updates.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{
    delta_ls, enumerate_trajectories, exact_marginal, log_backward_prob, log_forward_prob,
    total_variation,
};
use crate::grad::{Adam, ParamGrad};
use crate::graph::{capacity_from_env, write_atomic, StateGraph, StateId};
use crate::parallel::map_indexed;
use crate::policy::{Backward, TabularPolicy, Trajectory};
use crate::target::TargetDistribution;
use crate::train::{sample_trajectory, train, LossKind, TraceRow, TrainConfig};

/// One evidence chunk: a dense vector of finite log-likelihoods, one per
/// terminal state (indexed like `graph.terminals()`), tagged with its
/// 1-based position in the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamChunk {
    pub t: usize,
    loglik: Vec<f64>,
}

/// Serialized form: terminal state ids (as strings) to log-likelihoods.
#[derive(Serialize, Deserialize)]
struct ChunkFile {
    t: usize,
    loglik: BTreeMap<String, f64>,
}

impl StreamChunk {
    /// Wraps a dense log-likelihood vector; every entry must be finite and
    /// the length must match the graph's terminal count.
    pub fn new(graph: &StateGraph, t: usize, loglik: Vec<f64>) -> Result<Self> {
        if loglik.len() != graph.terminals().len() {
            return Err(Error::InvalidArg(format!(
                "chunk has {} log-likelihoods but the graph has {} terminals",
                loglik.len(),
                graph.terminals().len()
            )));
        }
        if let Some(bad) = loglik.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArg(format!(
                "chunk log-likelihood for terminal {} is not finite",
                graph.terminals()[bad]
            )));
        }
        Ok(Self { t, loglik })
    }

    /// Chunk with the same log-likelihood at every terminal (a constant
    /// reweighting, which leaves the normalized target unchanged).
    pub fn constant(graph: &StateGraph, t: usize, value: f64) -> Result<Self> {
        Self::new(graph, t, vec![value; graph.terminals().len()])
    }

    /// Seeded synthetic chunk: log-likelihoods drawn uniformly from
    /// `[-2, -0.1] * scale`, so likelihood factors stay in (0, 1).
    pub fn synthetic(graph: &StateGraph, t: usize, seed: u64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArg(format!(
                "chunk scale must be positive and finite, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let loglik = (0..graph.terminals().len())
            .map(|_| rng.random_range(-2.0..-0.1) * scale)
            .collect();
        Self::new(graph, t, loglik)
    }

    /// Log-likelihoods in terminal order.
    pub fn loglik(&self) -> &[f64] {
        &self.loglik
    }

    /// Log-likelihood of a terminal state.
    pub fn loglik_of(&self, graph: &StateGraph, x: StateId) -> Result<f64> {
        let pos = graph
            .terminal_index(x)
            .ok_or_else(|| Error::InvalidArg(format!("state {x} is not a terminal")))?;
        Ok(self.loglik[pos])
    }

    pub fn mean_loglik(&self) -> f64 {
        self.loglik.iter().sum::<f64>() / self.loglik.len() as f64
    }

    pub fn to_json(&self, graph: &StateGraph) -> String {
        let loglik = graph
            .terminals()
            .iter()
            .zip(&self.loglik)
            .map(|(&x, &v)| (x.to_string(), v))
            .collect();
        serde_json::to_string_pretty(&ChunkFile { t: self.t, loglik }).expect("chunk serializes")
    }

    /// Parses a chunk and checks it is defined for exactly the graph's
    /// terminals.
    pub fn from_json(graph: &StateGraph, text: &str) -> Result<Self> {
        let file: ChunkFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArg(format!("malformed chunk: {e}")))?;
        if file.loglik.len() != graph.terminals().len() {
            return Err(Error::InvalidArg(format!(
                "chunk lists {} terminals but the graph has {}",
                file.loglik.len(),
                graph.terminals().len()
            )));
        }
        let mut loglik = Vec::with_capacity(graph.terminals().len());
        for &x in graph.terminals() {
            match file.loglik.get(&x.to_string()) {
                Some(&v) => loglik.push(v),
                None => {
                    return Err(Error::InvalidArg(format!(
                        "chunk is missing terminal {x}"
                    )))
                }
            }
        }
        Self::new(graph, file.t, loglik)
    }

    pub fn save(&self, graph: &StateGraph, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json(graph))
    }

    pub fn load(graph: &StateGraph, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(graph, &text)
    }
}

/// Which update rule a stream runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    /// Balance stream: squared balance residual against the frozen previous
    /// policy; learns forward logits (and backward logits when learnable)
    /// plus the log-partition head.
    Sb,
    /// Divergence stream: on-policy score-gradient descent with `k`
    /// leave-one-out-baselined samples per step; no log-partition head.
    Kl { k: usize },
}

impl UpdateKind {
    pub fn validate(&self) -> Result<()> {
        if let UpdateKind::Kl { k } = self {
            if *k < 2 {
                return Err(Error::InvalidArg(
                    "leave-one-out baselines need at least two samples per step".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A stream position: the current policy, the exact reweighted target it
/// should sample (maintained for evaluation only; consumed chunks are never
/// re-read), and how many chunks have been absorbed.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub t: usize,
    pub policy: TabularPolicy,
    pub posterior: TargetDistribution,
}

impl StreamState {
    /// Trains the starting policy on the prior target with the
    /// full-trajectory balance loss. Divergence streams drop the
    /// log-partition head afterwards; balance streams keep it.
    pub fn initial(
        prior: TargetDistribution,
        kind: &UpdateKind,
        config: &TrainConfig,
    ) -> Result<(Self, Vec<TraceRow>)> {
        kind.validate()?;
        let (mut policy, trace) = train(&prior, &LossKind::Tb, config)?;
        if matches!(kind, UpdateKind::Kl { .. }) {
            policy = policy.without_log_z();
        }
        Ok((
            Self {
                t: 0,
                policy,
                posterior: prior,
            },
            trace,
        ))
    }
}

fn require_same_graph(a: &TabularPolicy, b: &TabularPolicy) -> Result<()> {
    if !std::sync::Arc::ptr_eq(a.graph(), b.graph()) {
        return Err(Error::InvalidArg(
            "policies must share one state graph".into(),
        ));
    }
    Ok(())
}

/// Adds `w * d(log pf(tau))/d(forward logits)` into the gradient: for each
/// transition the usual indicator-minus-softmax row.
fn add_forward_score(policy: &TabularPolicy, traj: &Trajectory, w: f64, grad: &mut ParamGrad) {
    let graph = policy.graph();
    for pair in traj.states.windows(2) {
        let (u, v) = (pair[0], pair[1]);
        let ci = graph.child_index(u, v).expect("trajectory follows edges");
        let probs = policy.forward_probs(u);
        let row = &mut grad.forward_logits[u];
        for (j, &p) in probs.iter().enumerate() {
            row[j] += w * (if j == ci { 1.0 } else { 0.0 } - p);
        }
    }
}

/// Adds `w * d(log pb(tau|x))/d(backward logits)` for a learnable backward
/// policy; no-op for the uniform backward.
fn add_backward_score(policy: &TabularPolicy, traj: &Trajectory, w: f64, grad: &mut ParamGrad) {
    if !matches!(policy.backward(), Backward::Learnable(_)) {
        return;
    }
    let graph = policy.graph();
    for pair in traj.states.windows(2) {
        let (u, v) = (pair[0], pair[1]);
        let pi = graph.parent_index(v, u).expect("trajectory follows edges");
        let bwd: Vec<f64> = policy.log_backward_row(v).iter().map(|l| l.exp()).collect();
        let rows = grad.backward_logits.as_mut().expect("learnable backward rows");
        for (j, &p) in bwd.iter().enumerate() {
            rows[v][j] += w * (if j == pi { 1.0 } else { 0.0 } - p);
        }
    }
}

/// Balance residual of one trajectory between the new and frozen policies:
/// `(log Z' + log pf' - log pb') - (log Z + log pf - log pb) - loglik(x)`.
pub fn sb_residual(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
    traj: &Trajectory,
) -> Result<f64> {
    let zn = next.log_z().ok_or(Error::MissingParams("log_z"))?;
    let zp = prev.log_z().ok_or(Error::MissingParams("log_z"))?;
    let ll = chunk.loglik_of(next.graph(), traj.terminal())?;
    Ok(
        (zn + log_forward_prob(next, traj) - log_backward_prob(next, traj))
            - (zp + log_forward_prob(prev, traj) - log_backward_prob(prev, traj))
            - ll,
    )
}

/// Mean squared balance residual over a batch, with its gradient in the new
/// policy's parameters only (the previous policy is a frozen reference).
pub fn sb_loss_and_gradient(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
    batch: &[Trajectory],
) -> Result<(f64, ParamGrad)> {
    require_same_graph(next, prev)?;
    if batch.is_empty() {
        return Err(Error::InvalidArg("empty trajectory batch".into()));
    }
    let mut grad = ParamGrad::zeros_like(next);
    let mut loss = 0.0;
    for traj in batch {
        let r = sb_residual(next, prev, chunk, traj)?;
        loss += r * r;
        let w = 2.0 * r / batch.len() as f64;
        if let Some(z) = grad.log_z.as_mut() {
            *z += w;
        }
        add_forward_score(next, traj, w, &mut grad);
        add_backward_score(next, traj, -w, &mut grad);
    }
    Ok((loss / batch.len() as f64, grad))
}

/// Per-trajectory divergence integrand:
/// `log pf'(tau) - log pf(tau) - loglik(x)`.
fn gamma(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
    traj: &Trajectory,
) -> Result<f64> {
    let ll = chunk.loglik_of(next.graph(), traj.terminal())?;
    Ok(log_forward_prob(next, traj) - log_forward_prob(prev, traj) - ll)
}

/// Leave-one-out-baselined score estimate of the divergence gradient from
/// `k` on-policy samples of the new policy. Each sample contributes
/// `(1 + gamma_i - b_i) / k` times its score, where `b_i` averages the other
/// samples' gammas; subtracting `b_i` changes nothing in expectation but
/// cancels most of the score term's variance. Returns the gradient and the
/// mean gamma (a loss proxy, equal to the divergence up to an additive
/// constant).
pub fn kl_stream_gradient_rloo(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamGrad, f64)> {
    if k < 2 {
        return Err(Error::InvalidArg(
            "leave-one-out baselines need at least two samples per step".into(),
        ));
    }
    kl_stream_gradient(next, prev, chunk, k, rng, true)
}

/// Plain (baseline-free) score estimate of the same gradient; kept for
/// variance comparisons against the leave-one-out form.
pub fn kl_stream_gradient_plain(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamGrad, f64)> {
    if k == 0 {
        return Err(Error::InvalidArg("need at least one sample".into()));
    }
    kl_stream_gradient(next, prev, chunk, k, rng, false)
}

fn kl_stream_gradient(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
    k: usize,
    rng: &mut ChaCha8Rng,
    leave_one_out: bool,
) -> Result<(ParamGrad, f64)> {
    require_same_graph(next, prev)?;
    let trajs: Vec<Trajectory> = (0..k).map(|_| sample_trajectory(next, 0.0, rng)).collect();
    let gammas: Vec<f64> = trajs
        .iter()
        .map(|t| gamma(next, prev, chunk, t))
        .collect::<Result<_>>()?;
    let sum: f64 = gammas.iter().sum();
    let mut grad = ParamGrad::zeros_like(next);
    for (traj, &g) in trajs.iter().zip(&gammas) {
        let baseline = if leave_one_out {
            (sum - g) / (k - 1) as f64
        } else {
            0.0
        };
        // d(gamma)/d(theta') is itself the score of the new policy, so the
        // pathwise and score terms share one coefficient
        let coef = (1.0 + g - baseline) / k as f64;
        add_forward_score(next, traj, coef, &mut grad);
    }
    Ok((grad, sum / k as f64))
}

/// Exact divergence gradient by trajectory enumeration:
/// `sum_tau pf'(tau) (1 + gamma(tau)) d(log pf'(tau))`. Reference value the
/// sampled estimators must match in expectation.
pub fn kl_exact_gradient(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
) -> Result<ParamGrad> {
    require_same_graph(next, prev)?;
    let trajs = enumerate_trajectories(next.graph(), capacity_from_env() as usize)?;
    let mut grad = ParamGrad::zeros_like(next);
    for traj in &trajs {
        let p = log_forward_prob(next, traj).exp();
        let g = gamma(next, prev, chunk, traj)?;
        add_forward_score(next, traj, p * (1.0 + g), &mut grad);
    }
    Ok(grad)
}

/// Exact value of the streamed objective `E_pf'[gamma]` by enumeration.
pub fn kl_exact_value(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
) -> Result<f64> {
    require_same_graph(next, prev)?;
    let trajs = enumerate_trajectories(next.graph(), capacity_from_env() as usize)?;
    let mut acc = 0.0;
    for traj in &trajs {
        let p = log_forward_prob(next, traj).exp();
        acc += p * gamma(next, prev, chunk, traj)?;
    }
    Ok(acc)
}

/// Exact divergence `KL[pf' || p]` over trajectories, where
/// `p(tau) = pf(tau) f(x) / C` is the reweighted previous trajectory
/// distribution and `C = E_pf[f]` normalizes it.
pub fn kl_trajectory_divergence(
    next: &TabularPolicy,
    prev: &TabularPolicy,
    chunk: &StreamChunk,
) -> Result<f64> {
    require_same_graph(next, prev)?;
    let graph = next.graph();
    let trajs = enumerate_trajectories(graph, capacity_from_env() as usize)?;
    let mut c = 0.0;
    for traj in &trajs {
        let ll = chunk.loglik_of(graph, traj.terminal())?;
        c += (log_forward_prob(prev, traj) + ll).exp();
    }
    let log_c = c.ln();
    let mut kl = 0.0;
    for traj in &trajs {
        let lp_next = log_forward_prob(next, traj);
        let ll = chunk.loglik_of(graph, traj.terminal())?;
        let lp_re = log_forward_prob(prev, traj) + ll - log_c;
        kl += lp_next.exp() * (lp_next - lp_re);
    }
    Ok(kl)
}

/// Mixes the stream position into the RNG seed so distinct chunks draw
/// distinct batches even under one configured seed.
fn chunk_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Absorbs one chunk: freezes the current policy, warm-starts a copy, and
/// trains it toward the reweighted target using only this chunk's
/// log-likelihoods. Returns the advanced stream and a training trace whose
/// `tv` column is measured against the exact reweighted target.
pub fn stream_update(
    state: &StreamState,
    chunk: &StreamChunk,
    kind: &UpdateKind,
    config: &TrainConfig,
) -> Result<(StreamState, Vec<TraceRow>)> {
    config.validate()?;
    kind.validate()?;
    if chunk.t != state.t + 1 {
        return Err(Error::InvalidArg(format!(
            "chunk t={} does not follow stream position t={}",
            chunk.t, state.t
        )));
    }
    let posterior = state.posterior.product_with_loglik(chunk.loglik())?;
    let prev = &state.policy;
    let mut next = prev.clone();
    if let UpdateKind::Sb = kind {
        let z = prev.log_z().ok_or(Error::MissingParams("log_z"))?;
        // warm-start the partition head at its expected drift under a flat
        // marginal; training refines it from there
        next.set_log_z(z + chunk.mean_loglik());
    }
    let mut adam = Adam::new(&next, config.adam.clone())?;
    let mut trace = Vec::new();
    let seed = chunk_seed(config.seed, chunk.t);
    for epoch in 0..config.epochs {
        let (loss, grad) = match kind {
            UpdateKind::Sb => {
                let sampler = &next;
                let batch: Vec<Trajectory> =
                    map_indexed(config.batch_size, config.threads, |slot| {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(((epoch as u64) << 32) | slot as u64);
                        sample_trajectory(sampler, config.exploration, &mut rng)
                    });
                let (loss, grad) = sb_loss_and_gradient(&next, prev, chunk, &batch)?;
                if !loss.is_finite() {
                    let detail = batch
                        .iter()
                        .find_map(|t| {
                            let r = sb_residual(&next, prev, chunk, t).ok()?;
                            (!r.is_finite()).then(|| {
                                format!(
                                    "balance residual {} for trajectory ending at state {}",
                                    r,
                                    t.terminal()
                                )
                            })
                        })
                        .unwrap_or_else(|| "non-finite balance loss".into());
                    return Err(Error::NonFinite { epoch, detail });
                }
                (loss, grad)
            }
            UpdateKind::Kl { k } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((epoch as u64) << 32);
                let (grad, mean_gamma) = kl_stream_gradient_rloo(&next, prev, chunk, *k, &mut rng)?;
                (mean_gamma, grad)
            }
        };
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: "non-finite stream gradient".into(),
            });
        }
        adam.step(&mut next, &grad)?;
        if epoch % config.eval_every == 0 || epoch + 1 == config.epochs {
            let marginal = exact_marginal(&next);
            let tv = total_variation(&marginal, &posterior.probabilities());
            let fcs_mean =
                crate::train::trace_fcs(&marginal, &posterior, config.seed ^ epoch as u64)?;
            trace.push(TraceRow {
                epoch,
                loss,
                tv,
                fcs_mean,
            });
        }
    }
    Ok((
        StreamState {
            t: chunk.t,
            policy: next,
            posterior,
        },
        trace,
    ))
}

/// One checked inequality: `lhs <= rhs` up to [`AUDIT_TOL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Slack for the audited inequalities; they are exact statements, so the
/// tolerance only absorbs floating-point evaluation error.
pub const AUDIT_TOL: f64 = 1e-9;

fn check(lhs: f64, rhs: f64) -> BoundCheck {
    BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + AUDIT_TOL,
    }
}

/// Error-propagation audit of one stream step.
///
/// The asserted bounds (`log_sq`, `tv_flow`, `tv_kl`) are theorems; they
/// must hold on every run, and a violation indicates an implementation bug.
/// The two `*_variant` checks are looser folklore forms kept for reporting:
/// `tv_flow_variant` replaces the drift term's exact normalizers with the
/// learned log-partitions, and `tv_kl_variant` uses the constant `1/2`
/// in front of `sqrt(KL)` where only `sqrt(KL/2)` is justified; either can
/// fail without anything being wrong.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub t: usize,
    /// Weighted log-squared distance to the new target is at most the
    /// training error to the one-step pullback, plus both partition-estimate
    /// errors, plus the inherited distance of the previous policy to the
    /// previous target (all weighted by the new target). Needs log-partition
    /// heads.
    pub log_sq: Option<BoundCheck>,
    /// Total variation to the new target is at most the total variation to
    /// the one-step pullback plus a drift term: half the largest likelihood
    /// times the L1 gap between the previous marginal and previous target,
    /// each normalized by its own expected likelihood.
    pub tv_flow: BoundCheck,
    /// `tv_flow` with learned log-partitions as normalizers (reported, not
    /// asserted).
    pub tv_flow_variant: Option<BoundCheck>,
    /// Total variation to the new target is at most `sqrt(KL/2)` — the
    /// trajectory divergence the streamed objective descends — plus the same
    /// drift expressed as total variation between the reweighted previous
    /// marginal and reweighted previous target.
    pub tv_kl: BoundCheck,
    /// `tv_kl` with `0.5 * sqrt(KL)` as the estimation term (reported, not
    /// asserted: the constant is too small and fails near optimal policies).
    pub tv_kl_variant: BoundCheck,
}

/// Audits the error-propagation inequalities for a step from `prev`
/// (trained for `posterior_prev`) to `next` (trained for `posterior_next =
/// posterior_prev * chunk`). The exact partition reference is the plain
/// unnormalized one, `Z*_k = posterior_k.partition()`; the inequalities hold
/// for any reference chain with `Z*_next / Z*_prev = E_target[f]`, and this
/// chain makes a perfectly calibrated log-partition head contribute zero to
/// the bound.
pub fn propagation_audit(
    prev: &TabularPolicy,
    next: &TabularPolicy,
    chunk: &StreamChunk,
    posterior_prev: &TargetDistribution,
    posterior_next: &TargetDistribution,
) -> Result<AuditRow> {
    require_same_graph(prev, next)?;
    for t in [posterior_prev, posterior_next] {
        if !std::sync::Arc::ptr_eq(t.graph(), prev.graph()) {
            return Err(Error::InvalidArg(
                "audit targets must share the policies' state graph".into(),
            ));
        }
    }
    let p_prev = exact_marginal(prev);
    let p_next = exact_marginal(next);
    let pi_prev = posterior_prev.probabilities();
    let pi_next = posterior_next.probabilities();
    let f: Vec<f64> = chunk.loglik().iter().map(|l| l.exp()).collect();

    let e_model: f64 = p_prev.iter().zip(&f).map(|(&p, &l)| p * l).sum();
    let e_target: f64 = pi_prev.iter().zip(&f).map(|(&p, &l)| p * l).sum();
    // one-step pullback: the previous marginal reweighted by this chunk
    let p_hat: Vec<f64> = p_prev.iter().zip(&f).map(|(&p, &l)| p * l / e_model).collect();
    let pi_re: Vec<f64> = pi_prev
        .iter()
        .zip(&f)
        .map(|(&p, &l)| p * l / e_target)
        .collect();
    let log_zstar_prev = posterior_prev.log_partition();
    let log_zstar_next = posterior_next.log_partition();

    let log_sq = match prev.log_z() {
        Some(lzp) => {
            let lhs = delta_ls(&p_next, &pi_next, &pi_next)?;
            let training = delta_ls(&p_next, &p_hat, &pi_next)?;
            let inherited = delta_ls(&p_prev, &pi_prev, &pi_next)?;
            let log_zhat_next = lzp + e_model.ln();
            let rhs = training
                + (log_zhat_next - log_zstar_next).abs()
                + inherited
                + (lzp - log_zstar_prev).abs();
            Some(check(lhs, rhs))
        }
        None => None,
    };

    let lhs_tv = total_variation(&p_next, &pi_next);
    let training_tv = total_variation(&p_next, &p_hat);
    let f_max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let drift: f64 = p_prev
        .iter()
        .zip(&pi_prev)
        .map(|(&p, &q)| (p / e_model - q / e_target).abs())
        .sum();
    let tv_flow = check(lhs_tv, training_tv + 0.5 * f_max * drift);

    let tv_flow_variant = match (prev.log_z(), next.log_z()) {
        (Some(lzp), Some(lzn)) => {
            let ratio_model = (lzp - lzn).exp();
            let ratio_target = (log_zstar_prev - log_zstar_next).exp();
            let drift_learned: f64 = p_prev
                .iter()
                .zip(&pi_prev)
                .map(|(&p, &q)| (ratio_model * p - ratio_target * q).abs())
                .sum();
            Some(check(lhs_tv, training_tv + 0.5 * f_max * drift_learned))
        }
        _ => None,
    };

    let kl = kl_trajectory_divergence(next, prev, chunk)?.max(0.0);
    let drift_tv = total_variation(&p_hat, &pi_re);
    let tv_kl = check(lhs_tv, (kl / 2.0).sqrt() + drift_tv);
    let tv_kl_variant = check(lhs_tv, 0.5 * kl.sqrt() + drift_tv);

    Ok(AuditRow {
        t: chunk.t,
        log_sq,
        tv_flow,
        tv_flow_variant,
        tv_kl,
        tv_kl_variant,
    })
}

impl AuditRow {
    /// True when every asserted bound holds (variants excluded).
    pub fn asserted_hold(&self) -> bool {
        self.log_sq.map_or(true, |b| b.holds) && self.tv_flow.holds && self.tv_kl.holds
    }
}
