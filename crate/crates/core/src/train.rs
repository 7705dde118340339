//! Stochastic training of tabular policies on squared-log-ratio balance
//! losses: full-trajectory, per-transition, lambda-weighted sub-trajectory,
//! and depth-weighted per-transition variants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flows::{exact_marginal, sample_index, total_variation};
use crate::grad::{Adam, AdamConfig, ParamGrad};
use crate::parallel::map_indexed;
use crate::policy::{Backward, TabularPolicy, Trajectory};
use crate::target::TargetDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Td3Direction {
    /// Weight transitions near the root: gamma(s) = (T - depth(s))^2.
    Upstream,
    /// Ablation weighting transitions far from the root: gamma(s) = depth(s)^2.
    Downstream,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Single squared log-ratio over the whole trajectory; needs log_z.
    Tb,
    /// Sum of per-transition squared log-ratios; needs state flows.
    Db,
    /// All (m, n) sub-trajectory pairs, weighted lambda^(n-m); needs state
    /// flows.
    SubTb { lambda: f64 },
    /// Per-transition losses reweighted by squared geodesic depth, tempered
    /// by an exponent beta annealed linearly to zero; needs state flows.
    Td3 {
        beta0: f64,
        anneal_epochs: usize,
        direction: Td3Direction,
    },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::SubTb { lambda } => {
                if !(lambda > 0.0 && lambda <= 1.0) {
                    return Err(Error::InvalidArg(format!(
                        "sub-trajectory lambda must lie in (0,1], got {lambda}"
                    )));
                }
            }
            LossKind::Td3 {
                beta0,
                anneal_epochs,
                ..
            } => {
                if !beta0.is_finite() || beta0 < 0.0 {
                    return Err(Error::InvalidArg("beta0 must be finite and >= 0".into()));
                }
                if anneal_epochs == 0 {
                    return Err(Error::InvalidArg("anneal horizon must be positive".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn requires_state_flows(&self) -> bool {
        !matches!(self, LossKind::Tb)
    }

    pub fn requires_log_z(&self) -> bool {
        matches!(self, LossKind::Tb)
    }

    /// Tempering exponent at `epoch` under the linear anneal-to-zero.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        match *self {
            LossKind::Td3 {
                beta0,
                anneal_epochs,
                ..
            } => beta0 * (1.0 - epoch as f64 / anneal_epochs as f64).max(0.0),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Mixture weight toward uniform child choice while sampling; in [0,1).
    pub exploration: f64,
    pub seed: u64,
    /// Trace cadence in epochs (the last epoch is always traced).
    pub eval_every: usize,
    pub adam: AdamConfig,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 32,
            exploration: 0.1,
            seed: 0,
            eval_every: 50,
            adam: AdamConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArg(
                "epochs, batch size and cadence must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.exploration) {
            return Err(Error::InvalidArg(format!(
                "exploration mixture weight must lie in [0,1), got {}",
                self.exploration
            )));
        }
        self.adam.validate()
    }
}

/// Samples a complete trajectory, mixing the policy's child distribution
/// with a uniform one: (1 - eta) softmax + eta / #children.
pub fn sample_trajectory(
    policy: &TabularPolicy,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let graph = policy.graph();
    let mut states = vec![graph.initial()];
    let mut cur = graph.initial();
    while !graph.is_terminal(cur) {
        let probs = policy.forward_probs(cur);
        let k = probs.len() as f64;
        let mixed: Vec<f64> = probs.iter().map(|p| (1.0 - eta) * p + eta / k).collect();
        let pick = sample_index(&mixed, rng);
        cur = graph.children(cur)[pick];
        states.push(cur);
    }
    Trajectory::new(graph, states).expect("walk follows edges by construction")
}

/// Per-trajectory cached quantities: boundary log-values and transition
/// log-ratios, from which every (m, n) segment residual is a running sum.
struct SegmentTable {
    /// a[m] = log source value at position m (log_z or log state flow).
    a: Vec<f64>,
    /// b[n] = log sink value at position n (state flow, or log reward at the
    /// end).
    b: Vec<f64>,
    /// t[i] = log p_F - log p_B for transition i -> i+1.
    t: Vec<f64>,
    /// prefix[i] = t[0] + .. + t[i-1]
    prefix: Vec<f64>,
}

impl SegmentTable {
    fn build(
        policy: &TabularPolicy,
        target: &TargetDistribution,
        traj: &Trajectory,
        kind: &LossKind,
    ) -> Result<SegmentTable> {
        let graph = policy.graph();
        let states = traj.states.as_slice();
        if states.len() < 2 {
            return Err(Error::InvalidArg(
                "trajectory has no transitions to balance".into(),
            ));
        }
        let m_len = states.len() - 1;
        if kind.requires_log_z() && policy.log_z().is_none() {
            return Err(Error::MissingParams("log-partition parameter"));
        }
        if kind.requires_state_flows() && policy.log_state_flow().is_none() {
            return Err(Error::MissingParams("log-state-flow parameters"));
        }
        let flows = policy.log_state_flow();
        // interior entries stay NaN when the policy carries no state flows;
        // the full-trajectory loss never reads them, and any misuse surfaces
        // as a non-finite loss immediately
        let interior = |s: usize| flows.map_or(f64::NAN, |f| f[s]);
        let mut a = vec![0.0; m_len];
        for (m, &s) in states[..m_len].iter().enumerate() {
            a[m] = if m == 0 {
                match policy.log_z() {
                    Some(z) => z,
                    None => flows.unwrap()[s],
                }
            } else {
                interior(s)
            };
        }
        let mut b = vec![0.0; m_len + 1];
        for (n, &s) in states.iter().enumerate().skip(1) {
            b[n] = if n == m_len {
                target.log_reward_of_state(s)?
            } else {
                interior(s)
            };
        }
        let mut t = vec![0.0; m_len];
        let mut prefix = vec![0.0; m_len + 1];
        for i in 0..m_len {
            let (u, v) = (states[i], states[i + 1]);
            let ci = graph.child_index(u, v).unwrap();
            let pi = graph.parent_index(v, u).unwrap();
            t[i] = policy.log_pf(u, ci) - policy.log_pb(v, pi);
            prefix[i + 1] = prefix[i] + t[i];
        }
        Ok(SegmentTable { a, b, t, prefix })
    }

    fn residual(&self, m: usize, n: usize) -> f64 {
        self.a[m] + (self.prefix[n] - self.prefix[m]) - self.b[n]
    }
}

/// Scalar weights on the table entries produced by one trajectory's loss:
/// the gradient of the loss decomposes as
///   sum_m ca[m] d(a[m]) + sum_n cb[n] d(b[n]) + sum_i ct[i] d(t[i]).
struct SegmentCoeffs {
    loss: f64,
    ca: Vec<f64>,
    cb: Vec<f64>,
    ct: Vec<f64>,
}

fn segment_coeffs(
    table: &SegmentTable,
    kind: &LossKind,
    depth_weight: Option<&[f64]>,
) -> SegmentCoeffs {
    let m_len = table.t.len();
    let mut ca = vec![0.0; m_len];
    let mut cb = vec![0.0; m_len + 1];
    let mut ct = vec![0.0; m_len + 1]; // one extra slot for diff trick
    let mut loss = 0.0;
    let mut add_pair = |m: usize, n: usize, w: f64, loss: &mut f64| {
        let r = table.residual(m, n);
        *loss += w * r * r;
        let c = 2.0 * w * r;
        ca[m] += c;
        cb[n] -= c;
        ct[m] += c;
        ct[n] -= c;
    };
    match kind {
        LossKind::Tb => add_pair(0, m_len, 1.0, &mut loss),
        LossKind::Db => {
            for m in 0..m_len {
                add_pair(m, m + 1, 1.0, &mut loss);
            }
        }
        LossKind::SubTb { lambda } => {
            let mut norm = 0.0;
            for m in 0..m_len {
                for n in (m + 1)..=m_len {
                    norm += lambda.powi((n - m) as i32);
                }
            }
            for m in 0..m_len {
                for n in (m + 1)..=m_len {
                    add_pair(m, n, lambda.powi((n - m) as i32) / norm, &mut loss);
                }
            }
        }
        LossKind::Td3 { .. } => {
            let w = depth_weight.expect("depth weights supplied for this loss");
            let norm: f64 = w.iter().sum();
            if norm > 0.0 {
                for (m, &wi) in w.iter().enumerate() {
                    add_pair(m, m + 1, wi / norm, &mut loss);
                }
            } else {
                // all weights annihilated: fall back to a uniform average
                for m in 0..m_len {
                    add_pair(m, m + 1, 1.0 / m_len as f64, &mut loss);
                }
            }
        }
    }
    // ct accumulated pair coefficients at both ends; convert to per-transition
    // coefficients by a running sum: transition i is inside segment (m, n)
    // iff m <= i < n.
    let mut run = 0.0;
    let mut per_t = vec![0.0; m_len];
    for i in 0..m_len {
        run += ct[i];
        per_t[i] = run;
    }
    SegmentCoeffs {
        loss,
        ca,
        cb,
        ct: per_t,
    }
}

/// Squared-depth transition weights for one trajectory, indexed by the
/// destination state of each transition, tempered by `beta` (0^0 = 1).
fn depth_weights(
    policy: &TabularPolicy,
    traj: &Trajectory,
    direction: Td3Direction,
    beta: f64,
) -> Vec<f64> {
    let graph = policy.graph();
    // Count states, not edges, on the longest trajectory: every destination
    // then keeps a positive weight, so the reward-bearing final transition is
    // damped but never dropped while the tempering exponent is live.
    let t_max = graph.max_depth() as f64 + 1.0;
    traj.states.as_slice()
        .iter()
        .skip(1)
        .map(|&s| {
            let d = graph.geodesic_depth(s) as f64;
            let gamma = match direction {
                Td3Direction::Upstream => (t_max - d) * (t_max - d),
                Td3Direction::Downstream => d * d,
            };
            gamma.powf(beta)
        })
        .collect()
}

fn trajectory_loss_grad(
    policy: &TabularPolicy,
    target: &TargetDistribution,
    traj: &Trajectory,
    kind: &LossKind,
    beta: f64,
) -> Result<(f64, ParamGrad)> {
    let table = SegmentTable::build(policy, target, traj, kind)?;
    let dw = match kind {
        LossKind::Td3 { direction, .. } => {
            Some(depth_weights(policy, traj, *direction, beta))
        }
        _ => None,
    };
    let coeffs = segment_coeffs(&table, kind, dw.as_deref());
    let graph = policy.graph();
    let states = traj.states.as_slice();
    let m_len = states.len() - 1;
    let mut grad = ParamGrad::zeros_like(policy);

    for (m, &c) in coeffs.ca.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        if m == 0 && policy.log_z().is_some() {
            *grad.log_z.as_mut().unwrap() += c;
        } else {
            grad.log_state_flow.as_mut().unwrap()[states[m]] += c;
        }
    }
    for (n, &c) in coeffs.cb.iter().enumerate().take(m_len) {
        // position 0 is never a sink; the final position's sink is the fixed
        // target reward, not a parameter
        if n == 0 || c == 0.0 {
            continue;
        }
        grad.log_state_flow.as_mut().unwrap()[states[n]] += c;
    }
    for (i, &c) in coeffs.ct.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (u, v) = (states[i], states[i + 1]);
        let ci = graph.child_index(u, v).unwrap();
        let fwd = policy.forward_probs(u);
        let rows = &mut grad.forward_logits[u];
        for (j, &p) in fwd.iter().enumerate() {
            rows[j] += c * (if j == ci { 1.0 } else { 0.0 } - p);
        }
        if let Backward::Learnable(_) = policy.backward() {
            let pi_idx = graph.parent_index(v, u).unwrap();
            let bwd: Vec<f64> =
                policy.log_backward_row(v).iter().map(|l| l.exp()).collect();
            let rows = grad.backward_logits.as_mut().unwrap();
            for (j, &p) in bwd.iter().enumerate() {
                rows[v][j] -= c * (if j == pi_idx { 1.0 } else { 0.0 } - p);
            }
        }
    }
    Ok((coeffs.loss, grad))
}

/// Mean loss and gradient over a batch of trajectories. The reduction is
/// ordered by batch index, so results do not depend on thread count.
pub fn loss_and_gradient(
    policy: &TabularPolicy,
    target: &TargetDistribution,
    batch: &[Trajectory],
    kind: &LossKind,
    epoch: usize,
) -> Result<(f64, ParamGrad)> {
    kind.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArg("empty trajectory batch".into()));
    }
    let beta = kind.beta_at(epoch);
    let per: Vec<Result<(f64, ParamGrad)>> = batch
        .iter()
        .map(|traj| trajectory_loss_grad(policy, target, traj, kind, beta))
        .collect();
    let mut total = 0.0;
    let mut grad = ParamGrad::zeros_like(policy);
    let w = 1.0 / batch.len() as f64;
    for item in per {
        let (loss, g) = item?;
        total += w * loss;
        grad.add_scaled(&g, w);
    }
    Ok((total, grad))
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub tv: f64,
    pub fcs_mean: f64,
}

/// Initial policy for a loss kind: uniform logits, and either a zero
/// log-partition head or log-state-flows seeded with the uniform-balance
/// flow Z * |reachable terminals| / n.
pub fn initial_policy(target: &TargetDistribution, kind: &LossKind) -> TabularPolicy {
    let graph = target.graph().clone();
    let policy = TabularPolicy::new_uniform(graph.clone());
    if kind.requires_log_z() {
        return policy.with_log_z(0.0);
    }
    let n = graph.num_terminals() as f64;
    let log_z = target.log_partition();
    let flows: Vec<f64> = (0..graph.num_states())
        .map(|v| log_z + (graph.descendant_terminal_count(v) as f64 / n).ln())
        .collect();
    policy.with_state_flows(flows).expect("length matches by construction")
}

/// Trains a fresh policy against the target. Deterministic given the
/// config; the trace is emitted at the configured cadence plus the final
/// epoch. A non-finite loss aborts with the offending trajectory.
pub fn train(
    target: &TargetDistribution,
    kind: &LossKind,
    config: &TrainConfig,
) -> Result<(TabularPolicy, Vec<TraceRow>)> {
    kind.validate()?;
    config.validate()?;
    let mut policy = initial_policy(target, kind);
    let mut opt = Adam::new(&policy, config.adam)?;
    let mut trace = Vec::new();
    let pi = target.probabilities();
    for epoch in 0..config.epochs {
        let batch: Vec<Trajectory> = map_indexed(config.batch_size, config.threads, |slot| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(((epoch as u64) << 32) | slot as u64);
            sample_trajectory(&policy, config.exploration, &mut rng)
        });
        let (loss, grad) = loss_and_gradient(&policy, target, &batch, kind, epoch)?;
        if !loss.is_finite() || !grad.is_finite() {
            let detail = batch
                .iter()
                .map(|traj| {
                    let table = SegmentTable::build(&policy, target, traj, kind)?;
                    Ok((traj, table.residual(0, traj.len())))
                })
                .filter_map(|r: Result<_>| r.ok())
                .find(|(_, r)| !r.is_finite())
                .map(|(traj, r)| format!("trajectory {:?} residual {r}", traj.states.as_slice()))
                .unwrap_or_else(|| "non-finite gradient".into());
            return Err(Error::NonFinite { epoch, detail });
        }
        opt.step(&mut policy, &grad)?;
        if epoch % config.eval_every == 0 || epoch + 1 == config.epochs {
            let marginal = exact_marginal(&policy);
            let tv = total_variation(&marginal, &pi);
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

/// Small fixed-budget subset-consistency probe for trace rows.
pub(crate) fn trace_fcs(marginal: &[f64], target: &TargetDistribution, seed: u64) -> Result<f64> {
    let n = target.probabilities().len();
    if n < 2 {
        return Ok(0.0);
    }
    let report =
        crate::diagnostics::fcs_for_distribution(marginal, target, 2, 32, 0.05, seed)?;
    Ok(report.mean)
}
