//! Sensitivity of the terminal distribution to a single imbalanced edge.
//!
//! Starting from the balanced flow network for a target (total flow F), an
//! extra flow delta is injected on one edge (u, v). That flow must exit
//! through the terminals reachable from v; a split rule decides how it
//! lands on them. These functions compute the perturbed terminal
//! distribution exactly, together with worst-case and average-case bounds
//! on the total-variation error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::graph::StateId;
use crate::parallel::{map_indexed, mean_stderr};
use crate::special::reg_inc_beta;
use crate::target::TargetDistribution;

#[derive(Debug, Clone)]
pub enum SplitRule {
    /// Extra flow divided evenly over the descendants of the imbalanced
    /// edge's head.
    Equal,
    /// All extra flow lands on one descendant terminal.
    Concentrated { terminal: StateId },
    /// Shares drawn once from a symmetric Dirichlet over the descendants.
    Dirichlet { alpha: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ImbalanceSpec {
    pub edge: (StateId, StateId),
    pub delta: f64,
    pub split: SplitRule,
}

/// Draws one share vector over `d` slots from a symmetric Dirichlet(alpha)
/// via normalized unit-scale gamma draws.
pub(crate) fn dirichlet_shares(d: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArg("Dirichlet alpha must be positive".into()));
    }
    if d == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArg(format!("bad Dirichlet alpha: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..d).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return Ok(draws.iter().map(|g| g / total).collect());
        }
        // all-zero underflow is possible for tiny alpha; redraw
    }
}

fn shares_for_rule(
    target: &TargetDistribution,
    v: StateId,
    rule: &SplitRule,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let graph = target.graph();
    let descendants = graph.reachable_terminals(v);
    let positions: Vec<usize> = descendants
        .iter()
        .map(|&x| graph.terminal_index(x).unwrap())
        .collect();
    let d = positions.len();
    let shares = match rule {
        SplitRule::Equal => vec![1.0 / d as f64; d],
        SplitRule::Concentrated { terminal } => {
            let slot = descendants
                .iter()
                .position(|&x| x == *terminal)
                .ok_or_else(|| {
                    Error::InvalidArg(format!(
                        "terminal {terminal} is not reachable from state {v}"
                    ))
                })?;
            let mut s = vec![0.0; d];
            s[slot] = 1.0;
            s
        }
        SplitRule::Dirichlet { alpha, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            dirichlet_shares(d, *alpha, &mut rng)?
        }
    };
    Ok((positions, shares))
}

/// Terminal distribution of the network after injecting `spec.delta` of
/// extra flow on `spec.edge`, with the balanced part carrying `total_flow`:
/// mu(x) = (F pi(x) + delta_x) / (F + delta).
pub fn imbalanced_distribution(
    target: &TargetDistribution,
    spec: &ImbalanceSpec,
    total_flow: f64,
) -> Result<Vec<f64>> {
    let graph = target.graph();
    let (u, v) = spec.edge;
    if u >= graph.num_states() {
        return Err(Error::UnknownState(u));
    }
    if graph.child_index(u, v).is_none() {
        return Err(Error::InvalidArg(format!("no edge {u} -> {v}")));
    }
    if !(total_flow > 0.0) || !total_flow.is_finite() {
        return Err(Error::InvalidArg("total flow must be positive".into()));
    }
    if spec.delta < 0.0 || !spec.delta.is_finite() {
        return Err(Error::InvalidArg("delta must be nonnegative".into()));
    }
    let (positions, shares) = shares_for_rule(target, v, &spec.split)?;
    let pi = target.probabilities();
    let mut mu: Vec<f64> = pi
        .iter()
        .map(|p| total_flow * p / (total_flow + spec.delta))
        .collect();
    for (&pos, &share) in positions.iter().zip(&shares) {
        mu[pos] += spec.delta * share / (total_flow + spec.delta);
    }
    Ok(mu)
}

fn eps_bound(extra: f64, split_count: f64, total_flow: f64) -> f64 {
    (1.0 - 1.0 / split_count) * extra / (total_flow + extra)
}

/// Worst/best-case TV interval for a regular tree with one imbalanced edge
/// out of the root: (attained by an even split, attained by a concentrated
/// split).
pub fn tree_bounds(g: u32, h: u32, total_flow: f64, delta: f64) -> Result<(f64, f64)> {
    if g < 1 || h < 1 {
        return Err(Error::InvalidArg("tree bounds need g, h >= 1".into()));
    }
    if !(total_flow > 0.0) || delta < 0.0 {
        return Err(Error::InvalidArg("need total_flow > 0 and delta >= 0".into()));
    }
    let leaves = (g as f64).powi(h as i32);
    Ok((
        eps_bound(delta, g as f64, total_flow),
        eps_bound(delta, leaves, total_flow),
    ))
}

/// TV bounds for a uniform-target DAG with `n` terminals where the
/// imbalanced edge's head reaches `d` of them. `lower`/`upper` hold for
/// every split of the extra flow. `alt_upper` is a tighter variant that is
/// not split-safe (a concentrated split can exceed it); callers report its
/// empirical containment rate instead of asserting it.
#[derive(Debug, Clone, Copy)]
pub struct DagBounds {
    pub lower: f64,
    pub upper: f64,
    pub alt_upper: f64,
}

pub fn dag_bounds(n: usize, d: usize, total_flow: f64, delta: f64) -> Result<DagBounds> {
    if n == 0 || d == 0 || d > n {
        return Err(Error::InvalidArg(format!(
            "need 1 <= d <= n, got n={n}, d={d}"
        )));
    }
    if !(total_flow > 0.0) || delta < 0.0 {
        return Err(Error::InvalidArg("need total_flow > 0 and delta >= 0".into()));
    }
    let (n, d) = (n as f64, d as f64);
    let scale = delta / (2.0 * n * (total_flow + delta));
    Ok(DagBounds {
        lower: scale * (n - d),
        upper: scale * (n + d * n - d),
        alt_upper: scale * (n - 1.0),
    })
}

/// TV bounds for a target with `k` boosted terminals (each of probability
/// r/n) when the imbalanced edge's head reaches `d` terminals, `b` of them
/// boosted.
///
/// `lower`/`upper` are the asserted interval, valid for every split:
/// the lower bound comes from the worst-case analysis and the upper bound
/// is the attainable supremum (all extra flow on the least likely reachable
/// terminal). `alt_lower`/`alt_upper` are tighter nominal forms that fail
/// containment for some splits when b >= 2 (alt_lower) or in general
/// (alt_upper); they are reported, never asserted.
#[derive(Debug, Clone, Copy)]
pub struct KModeBounds {
    pub lower: f64,
    pub upper: f64,
    pub alt_lower: f64,
    pub alt_upper: f64,
}

pub fn kmode_bounds(
    n: usize,
    k: usize,
    r: f64,
    d: usize,
    b: usize,
    total_flow: f64,
    delta: f64,
) -> Result<KModeBounds> {
    if k == 0 || n <= k {
        return Err(Error::InvalidArg(format!("need 1 <= k < n, got k={k}, n={n}")));
    }
    if !(r > 1.0) || k as f64 * r >= n as f64 {
        return Err(Error::InvalidArg(format!(
            "mode boost must satisfy 1 < r and k*r < n (k={k}, r={r}, n={n})"
        )));
    }
    if d == 0 || d > n - 1 {
        return Err(Error::InvalidArg(format!("need 1 <= d <= n-1, got d={d}")));
    }
    if b > k.min(d) || d - b > n - k {
        return Err(Error::InvalidArg(format!(
            "need b <= min(k, d) and d-b <= n-k, got d={d}, b={b}"
        )));
    }
    if !(total_flow > 0.0) || delta < 0.0 {
        return Err(Error::InvalidArg("need total_flow > 0 and delta >= 0".into()));
    }
    let (nf, kf, df, bf) = (n as f64, k as f64, d as f64, b as f64);
    let denom = 2.0 * nf * (nf - kf) * (total_flow + delta);
    let lower_num = 2.0 * nf * nf - 2.0 * nf * kf + 2.0 * df * kf * r - 2.0 * df * nf + bf * nf
        - 2.0 * bf * r * nf
        + bf * r * kf;
    // least likely reachable terminal: an off-mode one when d > b, else a mode
    let upper_num = if d > b {
        2.0 * nf * (nf - kf) - 2.0 * (nf - kf * r)
    } else {
        2.0 * (nf - kf) * (nf - r)
    };
    let alt_lower_num = 2.0 * nf * nf - 2.0 * nf * kf + 2.0 * df * kf * r - 2.0 * df * nf
        + bf * nf
        - r * bf * nf
        - r * nf
        + r * kf;
    let alt_upper_num =
        2.0 * nf * nf - kf * kf * r - 2.0 * nf * kf - nf * bf + bf * kf * r;
    Ok(KModeBounds {
        lower: delta * lower_num / denom,
        upper: delta * upper_num / denom,
        alt_lower: delta * alt_lower_num / denom,
        alt_upper: delta * alt_upper_num / denom,
    })
}

/// Converts a balance tolerance expressed as a squared-log residual bound
/// into the extra edge flow it permits: delta = (exp(sqrt(eps)) - 1) * flow,
/// where `flow` is the backward flow through the audited edge.
pub fn epsilon_to_delta(epsilon: f64, backward_edge_flow: f64) -> Result<f64> {
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidArg("epsilon must be nonnegative".into()));
    }
    if !(backward_edge_flow > 0.0) {
        return Err(Error::InvalidArg("edge flow must be positive".into()));
    }
    Ok((epsilon.sqrt().exp() - 1.0) * backward_edge_flow)
}

#[derive(Debug, Clone)]
pub struct DirichletMcReport {
    pub mean: f64,
    pub stderr: f64,
    pub reps: usize,
    pub descendant_count: usize,
    pub bounds: DagBounds,
    /// How many per-replication TVs fell inside [bounds.lower, bounds.upper].
    pub contained: usize,
    /// Same count against the non-split-safe alt upper bound.
    pub alt_contained: usize,
}

const CONTAINMENT_TOL: f64 = 1e-9;

/// Monte Carlo estimate of E[TV] when the extra flow is split over the
/// descendants by a symmetric Dirichlet(alpha). Requires a uniform target
/// (the per-replication containment check is against `dag_bounds`).
/// Replications use independent RNG substreams keyed by index, so results
/// are identical for any thread count.
#[allow(clippy::too_many_arguments)]
pub fn dirichlet_expected_tv_mc(
    target: &TargetDistribution,
    edge: (StateId, StateId),
    delta: f64,
    total_flow: f64,
    alpha: f64,
    reps: usize,
    seed: u64,
    threads: usize,
) -> Result<DirichletMcReport> {
    let graph = target.graph();
    let (u, v) = edge;
    if graph.child_index(u, v).is_none() {
        return Err(Error::InvalidArg(format!("no edge {u} -> {v}")));
    }
    if reps < 2 {
        return Err(Error::InvalidArg("need at least 2 replications".into()));
    }
    let pi = target.probabilities();
    let n = pi.len();
    let uniform = 1.0 / n as f64;
    if pi.iter().any(|p| (p - uniform).abs() > 1e-12) {
        return Err(Error::InvalidArg(
            "Dirichlet expected-TV analysis is defined for uniform targets".into(),
        ));
    }
    if !(delta > 0.0) || !(total_flow > 0.0) {
        return Err(Error::InvalidArg("need delta > 0 and total_flow > 0".into()));
    }
    let d = graph.descendant_terminal_count(v);
    let bounds = dag_bounds(n, d, total_flow, delta)?;

    // TV reduces to a function of the shares alone under a uniform target:
    // TV = delta/(2(F+delta)) * [(n-d)/n + sum_i |share_i - 1/n|]
    let scale = delta / (2.0 * (total_flow + delta));
    let off_part = (n - d) as f64 / n as f64;
    let tvs = map_indexed(reps, threads, |rep| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64);
        let shares = dirichlet_shares(d, alpha, &mut rng)?;
        let dev: f64 = shares.iter().map(|s| (s - uniform).abs()).sum();
        Ok(scale * (off_part + dev))
    });
    let tvs: Vec<f64> = tvs.into_iter().collect::<Result<_>>()?;
    let contained = tvs
        .iter()
        .filter(|&&tv| tv >= bounds.lower - CONTAINMENT_TOL && tv <= bounds.upper + CONTAINMENT_TOL)
        .count();
    let alt_contained = tvs
        .iter()
        .filter(|&&tv| {
            tv >= bounds.lower - CONTAINMENT_TOL && tv <= bounds.alt_upper + CONTAINMENT_TOL
        })
        .count();
    let (mean, stderr) = mean_stderr(&tvs);
    Ok(DirichletMcReport {
        mean,
        stderr,
        reps,
        descendant_count: d,
        bounds,
        contained,
        alt_contained,
    })
}

#[derive(Debug, Clone)]
pub struct DirichletClosedForm {
    pub lambda: f64,
    pub expected_tv: f64,
    /// Polynomial special case, defined only at alpha = 1.
    pub corollary_lambda: Option<f64>,
    pub corollary_expected_tv: Option<f64>,
}

/// Closed-form E[TV] under a symmetric Dirichlet(alpha) split:
/// E[TV] = (d (Lambda - 1/n) + 1) * delta / (2 (F + delta)), with Lambda
/// assembled from regularized incomplete beta evaluations at 1/n. The value
/// is reported for comparison against the Monte Carlo estimate, not
/// asserted against it: the two are known to disagree in places (at d = 1
/// the exact TV is deterministic and twice the alpha = 1 polynomial form).
pub fn dirichlet_expected_tv_closed(
    n: usize,
    d: usize,
    alpha: f64,
    delta: f64,
    total_flow: f64,
) -> Result<DirichletClosedForm> {
    if n < 2 || d == 0 || d > n {
        return Err(Error::InvalidArg(format!(
            "need n >= 2 and 1 <= d <= n, got n={n}, d={d}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArg("alpha must be positive".into()));
    }
    if !(delta > 0.0) || !(total_flow > 0.0) {
        return Err(Error::InvalidArg("need delta > 0 and total_flow > 0".into()));
    }
    let nf = n as f64;
    let df = d as f64;
    let x = 1.0 / nf;
    let alpha_rest = (df - 1.0) * alpha; // sum of the other components' alphas
    let lambda = (2.0 / nf) * reg_inc_beta(alpha, 2.0 * alpha_rest, x)?
        - 2.0 * reg_inc_beta(alpha + 1.0, 2.0 * alpha_rest + 1.0, x)?
        + 1.0
        - 1.0 / nf;
    let scale = delta / (2.0 * (total_flow + delta));
    let expected_tv = (df * (lambda - 1.0 / nf) + 1.0) * scale;
    let (corollary_lambda, corollary_expected_tv) = if alpha == 1.0 {
        let cl = (df - 1.0) * (0.5 - 1.0 / nf + 1.0 / (nf * nf));
        (Some(cl), Some((df * (cl - 1.0 / nf) + 1.0) * scale))
    } else {
        (None, None)
    };
    Ok(DirichletClosedForm {
        lambda,
        expected_tv,
        corollary_lambda,
        corollary_expected_tv,
    })
}
