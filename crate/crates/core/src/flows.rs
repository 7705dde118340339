//! Exact and estimated terminal marginals, trajectory probabilities,
//! segment balance residuals, and distribution distances.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{StateGraph, StateId};
use crate::policy::{TabularPolicy, Trajectory};
use crate::target::TargetDistribution;

/// Exact terminal marginal of the forward policy, by terminal position:
/// probability mass pushed from the initial state through the DAG.
pub fn exact_marginal(policy: &TabularPolicy) -> Vec<f64> {
    let graph = policy.graph();
    let mut mass = vec![0.0; graph.num_states()];
    mass[graph.initial()] = 1.0;
    for &u in graph.topo_order() {
        if graph.is_terminal(u) || mass[u] == 0.0 {
            continue;
        }
        let probs = policy.forward_probs(u);
        for (j, &c) in graph.children(u).iter().enumerate() {
            mass[c] += mass[u] * probs[j];
        }
    }
    graph.terminals().iter().map(|&x| mass[x]).collect()
}

/// Sum of log forward transition probabilities along a trajectory.
pub fn log_forward_prob(policy: &TabularPolicy, traj: &Trajectory) -> f64 {
    let graph = policy.graph();
    traj.states
        .windows(2)
        .map(|w| {
            let idx = graph.child_index(w[0], w[1]).expect("trajectory edge");
            policy.log_pf(w[0], idx)
        })
        .sum()
}

/// Sum of log backward transition probabilities of the trajectory given its
/// terminal: product over transitions of p_B(s_i -> s_{i-1}).
pub fn log_backward_prob(policy: &TabularPolicy, traj: &Trajectory) -> f64 {
    let graph = policy.graph();
    traj.states
        .windows(2)
        .map(|w| {
            let idx = graph.parent_index(w[1], w[0]).expect("trajectory edge");
            policy.log_pb(w[1], idx)
        })
        .sum()
}

/// All complete trajectories, in lexicographic DFS order. Errors when the
/// count would exceed `cap` — enumeration is quadratic-ish in practice and
/// meant for small graphs.
pub fn enumerate_trajectories(graph: &StateGraph, cap: usize) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    let mut path = vec![graph.initial()];
    // iterative DFS: stack of child cursors
    let mut cursor = vec![0usize];
    loop {
        let v = *path.last().unwrap();
        if graph.is_terminal(v) {
            if out.len() >= cap {
                return Err(Error::Capacity {
                    what: "trajectory enumeration".into(),
                    needed: (cap as u128) + 1,
                    guard: cap as u64,
                });
            }
            out.push(Trajectory {
                states: path.clone(),
            });
            path.pop();
            cursor.pop();
        } else {
            let k = *cursor.last().unwrap();
            if k < graph.children(v).len() {
                *cursor.last_mut().unwrap() += 1;
                path.push(graph.children(v)[k]);
                cursor.push(0);
                continue;
            }
            path.pop();
            cursor.pop();
        }
        if path.is_empty() {
            return Ok(out);
        }
    }
}

/// Unbiased importance estimate of the exact marginal at terminal `x`:
/// backward-samples `k` trajectories from `x` and averages
/// p_F(tau)/p_B(tau|x). Returns (estimate, standard error).
pub fn importance_marginal(
    policy: &TabularPolicy,
    x: StateId,
    k: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let graph = policy.graph();
    if graph.terminal_index(x).is_none() {
        return Err(Error::InvalidArg(format!("state {x} is not terminal")));
    }
    if k < 2 {
        return Err(Error::InvalidArg(
            "need at least 2 importance samples for a standard error".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..k {
        // walk backwards to the initial state
        let mut states = vec![x];
        let mut log_pb = 0.0;
        let mut v = x;
        while v != graph.initial() {
            let parents = graph.parents(v);
            if parents.is_empty() {
                return Err(Error::InvalidGraph(format!(
                    "dead end during backward sampling at state {v}"
                )));
            }
            let row = policy.log_backward_row(v);
            let j = sample_index(&row.iter().map(|l| l.exp()).collect::<Vec<_>>(), &mut rng);
            log_pb += row[j];
            v = parents[j];
            states.push(v);
        }
        states.reverse();
        let traj = Trajectory { states };
        let w = (log_forward_prob(policy, &traj) - log_pb).exp();
        sum += w;
        sumsq += w * w;
    }
    let mean = sum / k as f64;
    let var = (sumsq - sum * sum / k as f64).max(0.0) / (k as f64 - 1.0);
    Ok((mean, (var / k as f64).sqrt()))
}

/// Samples an index proportional to `weights` (assumed nonnegative, summing
/// to ~1; the tail index absorbs any rounding slack).
pub(crate) fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Signed log-ratio of the forward and backward flow decompositions over the
/// sub-trajectory from position `m` to `n`:
///
/// r = log[F(s_m) prod p_F] - log[F(s_n) prod p_B]
///
/// Boundary conventions: F at the initial position comes from the policy's
/// log Z when present (else its state-flow table); F at a terminal endpoint
/// is the target reward; interior positions read the state-flow table.
pub fn segment_log_ratio(
    policy: &TabularPolicy,
    target: &TargetDistribution,
    traj: &Trajectory,
    m: usize,
    n: usize,
) -> Result<f64> {
    if m >= n || n > traj.len() {
        return Err(Error::InvalidArg(format!(
            "need 0 <= m < n <= {}, got m={m}, n={n}",
            traj.len()
        )));
    }
    let graph = policy.graph();
    let head_state = traj.states[m];
    let head = if m == 0 {
        match (policy.log_z(), policy.log_state_flow()) {
            (Some(z), _) => z,
            (None, Some(flows)) => flows[head_state],
            (None, None) => return Err(Error::MissingParams("log_z or log_state_flow")),
        }
    } else {
        policy
            .log_state_flow()
            .ok_or(Error::MissingParams("log_state_flow"))?[head_state]
    };
    let tail_state = traj.states[n];
    let tail = if graph.is_terminal(tail_state) {
        target.log_reward_of_state(tail_state)?
    } else {
        policy
            .log_state_flow()
            .ok_or(Error::MissingParams("log_state_flow"))?[tail_state]
    };

    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for i in m + 1..=n {
        let (u, v) = (traj.states[i - 1], traj.states[i]);
        fwd += policy.log_pf(u, graph.child_index(u, v).unwrap());
        bwd += policy.log_pb(v, graph.parent_index(v, u).unwrap());
    }
    Ok(head + fwd - tail - bwd)
}

/// Squared segment balance residual L_{m,n}.
pub fn segment_residual(
    policy: &TabularPolicy,
    target: &TargetDistribution,
    traj: &Trajectory,
    m: usize,
    n: usize,
) -> Result<f64> {
    segment_log_ratio(policy, target, traj, m, n).map(|r| r * r)
}

/// Total variation distance between two same-length distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distribution lengths differ");
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Log-squared distance sqrt(E_{x ~ xi}[(log p(x) - log q(x))^2]).
/// All of `p`, `q` must be strictly positive where `xi` is.
pub fn delta_ls(p: &[f64], q: &[f64], xi: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() != xi.len() {
        return Err(Error::InvalidArg("distribution lengths differ".into()));
    }
    let mut acc = 0.0;
    for ((&a, &b), &w) in p.iter().zip(q).zip(xi) {
        if w == 0.0 {
            continue;
        }
        if !(a > 0.0) || !(b > 0.0) {
            return Err(Error::InvalidArg(
                "log-squared distance needs positive probabilities on the support".into(),
            ));
        }
        let d = a.ln() - b.ln();
        acc += w * d * d;
    }
    Ok(acc.sqrt())
}

/// Exact marginal TV against the target's normalized distribution.
pub fn marginal_tv(policy: &TabularPolicy, target: &TargetDistribution) -> f64 {
    total_variation(&exact_marginal(policy), &target.probabilities())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_regular_tree, build_set_graph};
    use crate::policy::balanced_policy;
    use std::sync::Arc;

    fn tree22_policy_075() -> TabularPolicy {
        let g = Arc::new(build_regular_tree(2, 2).unwrap());
        let mut p = TabularPolicy::new_uniform(g);
        p.set_forward_logits(0, &[0.75f64.ln(), 0.25f64.ln()]).unwrap();
        p
    }

    #[test]
    fn marginal_with_skewed_root() {
        let p = tree22_policy_075();
        let m = exact_marginal(&p);
        let expect = [0.375, 0.375, 0.125, 0.125];
        for (a, b) in m.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let uniform = vec![0.25; 4];
        assert!((total_variation(&m, &uniform) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn marginal_matches_brute_force_enumeration() {
        // independent oracle: group enumerated trajectory probabilities by
        // terminal and compare against the DP
        let g = Arc::new(build_set_graph(4, 2).unwrap());
        let mut p = TabularPolicy::new_uniform(g.clone());
        // arbitrary fixed logits
        for v in 0..g.num_states() {
            let row: Vec<f64> = (0..g.children(v).len())
                .map(|j| ((v * 7 + j * 3) % 5) as f64 * 0.37 - 1.0)
                .collect();
            p.set_forward_logits(v, &row).unwrap();
        }
        let dp = exact_marginal(&p);
        let mut brute = vec![0.0; g.num_terminals()];
        for traj in enumerate_trajectories(&g, 10_000).unwrap() {
            let pos = g.terminal_index(traj.terminal()).unwrap();
            brute[pos] += log_forward_prob(&p, &traj).exp();
        }
        for (a, b) in dp.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12, "{dp:?} vs {brute:?}");
        }
        assert!((dp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_counts() {
        let g = build_regular_tree(2, 3).unwrap();
        assert_eq!(enumerate_trajectories(&g, 100).unwrap().len(), 8);
        let g = build_set_graph(8, 4).unwrap();
        // 70 terminals, 4! orders each
        assert_eq!(enumerate_trajectories(&g, 10_000).unwrap().len(), 1680);
        assert!(enumerate_trajectories(&g, 100).is_err());
    }

    #[test]
    fn importance_estimate_agrees_with_exact() {
        let g = Arc::new(build_set_graph(3, 2).unwrap());
        let p = TabularPolicy::new_uniform(g.clone());
        let x = crate::graph::set_state_id(3, &[1, 2]).unwrap();
        let exact = exact_marginal(&p)[g.terminal_index(x).unwrap()];
        let (est, se) = importance_marginal(&p, x, 10_000, 11).unwrap();
        assert!(
            (est - exact).abs() <= 3.0 * se.max(1e-12),
            "est {est} exact {exact} se {se}"
        );
    }

    #[test]
    fn importance_estimate_tight_at_1e5_draws() {
        let g = Arc::new(build_set_graph(4, 3).unwrap());
        let mut p = TabularPolicy::new_uniform(g.clone());
        for v in 0..g.num_states() {
            let row: Vec<f64> = (0..g.children(v).len())
                .map(|j| ((v + j) % 3) as f64 * 0.5 - 0.5)
                .collect();
            p.set_forward_logits(v, &row).unwrap();
        }
        let x = g.terminals()[1];
        let exact = exact_marginal(&p)[1];
        let (est, se) = importance_marginal(&p, x, 100_000, 3).unwrap();
        assert!((est - exact).abs() <= 4.0 * se.max(1e-12));
    }

    #[test]
    fn balanced_residuals_vanish() {
        let g = Arc::new(build_regular_tree(2, 2).unwrap());
        let target = TargetDistribution::uniform(g.clone());
        let policy = balanced_policy(&target).unwrap();
        for traj in enumerate_trajectories(&g, 100).unwrap() {
            for m in 0..traj.len() {
                for n in m + 1..=traj.len() {
                    let r = segment_residual(&policy, &target, &traj, m, n).unwrap();
                    assert!(r < 1e-24, "residual {r} at ({m},{n})");
                }
            }
        }
    }

    #[test]
    fn doubling_head_flow_adds_log2_squared() {
        let g = Arc::new(build_regular_tree(2, 2).unwrap());
        let target = TargetDistribution::uniform(g.clone());
        let mut policy = balanced_policy(&target).unwrap();
        let traj = Trajectory::new(&g, vec![0, 1, 3]).unwrap();
        let base = segment_residual(&policy, &target, &traj, 1, 2).unwrap();
        assert!(base < 1e-24);
        policy.log_state_flow_mut().unwrap()[1] += 2.0f64.ln();
        let bumped = segment_residual(&policy, &target, &traj, 1, 2).unwrap();
        let expect = 2.0f64.ln().powi(2);
        assert!((bumped - expect).abs() < 1e-12);
    }

    #[test]
    fn tb_residual_zero_for_uniform_balanced_tree() {
        // uniform everything with log Z = log 4 balances the whole path
        let g = Arc::new(build_regular_tree(2, 2).unwrap());
        let target =
            TargetDistribution::from_rewards(g.clone(), &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let policy = TabularPolicy::new_uniform(g.clone()).with_log_z(4.0f64.ln());
        for traj in enumerate_trajectories(&g, 100).unwrap() {
            let r = segment_residual(&policy, &target, &traj, 0, traj.len()).unwrap();
            assert!(r < 1e-24);
        }
    }

    #[test]
    fn distances() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        assert!((total_variation(&p, &q) - 0.25).abs() < 1e-15);
        let d = delta_ls(&p, &q, &[1.0, 0.0]).unwrap();
        assert!((d - 2.0f64.ln()).abs() < 1e-12);
        assert!(delta_ls(&[0.0, 1.0], &q, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn missing_params_are_reported() {
        let g = Arc::new(build_regular_tree(2, 2).unwrap());
        let target = TargetDistribution::uniform(g.clone());
        let policy = TabularPolicy::new_uniform(g.clone()); // no z, no flows
        let traj = Trajectory::new(&g, vec![0, 1, 3]).unwrap();
        assert!(matches!(
            segment_residual(&policy, &target, &traj, 0, 2),
            Err(Error::MissingParams(_))
        ));
    }
}
