//! Model-quality diagnostics: subset flow-consistency errors with a PAC
//! bound, pitfall metrics that can be fooled by tempered models, and
//! exploration-coverage curves against a Markov bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flows::{exact_marginal, importance_marginal, total_variation};
use crate::graph::{binomial, StateGraph};
use crate::parallel::map_indexed;
use crate::policy::TabularPolicy;
use crate::target::TargetDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalMode {
    /// Exact terminal marginal by dynamic programming.
    Exact,
    /// Per-terminal importance estimate from k backward trajectories.
    Importance { k: usize },
}

#[derive(Debug, Clone)]
pub struct FcsReport {
    pub subset_size: usize,
    pub samples: usize,
    /// Per-subset consistency errors, in sampling order; each lies in [0,1].
    pub errors: Vec<f64>,
    pub mean: f64,
    /// Failure probability of the concentration bound.
    pub confidence: f64,
    /// mean + sqrt(ln(1/confidence) / (2 samples)); holds for the true
    /// expected error with probability >= 1 - confidence.
    pub pac_upper: f64,
    pub mode: MarginalMode,
    /// Importance mode only: average per-terminal estimator stderr, so
    /// estimation noise can be separated from imbalance signal.
    pub estimator_stderr: Option<f64>,
}

/// Conditional-distribution mismatch on one subset of terminals:
/// TV between the two distributions renormalized within the subset.
/// If exactly one side has zero mass on the subset the distributions are
/// maximally inconsistent there (error 1); if both do, the subset carries
/// no signal (error 0). Always in [0,1].
fn subset_error(p_model: &[f64], p_target: &[f64], subset: &[usize]) -> f64 {
    let mass_m: f64 = subset.iter().map(|&i| p_model[i]).sum();
    let mass_t: f64 = subset.iter().map(|&i| p_target[i]).sum();
    match (mass_m > 0.0, mass_t > 0.0) {
        (false, false) => 0.0,
        (true, true) => {
            0.5 * subset
                .iter()
                .map(|&i| (p_model[i] / mass_m - p_target[i] / mass_t).abs())
                .sum::<f64>()
        }
        _ => 1.0,
    }
}

fn pac_upper(mean: f64, m: usize, confidence: f64) -> f64 {
    mean + ((1.0 / confidence).ln() / (2.0 * m as f64)).sqrt()
}

fn sample_subset(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, b).into_vec();
    idx.sort_unstable();
    idx
}

fn validate_fcs_args(n: usize, b: usize, m: usize, confidence: f64) -> Result<()> {
    if b < 2 || b > n {
        return Err(Error::InvalidArg(format!(
            "subset size must satisfy 2 <= B <= {n}, got {b}"
        )));
    }
    if m == 0 {
        return Err(Error::InvalidArg("need at least one subset sample".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidArg("confidence must lie in (0,1)".into()));
    }
    Ok(())
}

/// Subset consistency report for an explicit model distribution over
/// terminals (exact mode). Subsets are drawn i.i.d. uniformly over size-B
/// subsets, so the concentration bound's independence assumption holds.
pub fn fcs_for_distribution(
    p_model: &[f64],
    target: &TargetDistribution,
    b: usize,
    m: usize,
    confidence: f64,
    seed: u64,
) -> Result<FcsReport> {
    let pi = target.probabilities();
    if p_model.len() != pi.len() {
        return Err(Error::InvalidArg(
            "model distribution length does not match terminal count".into(),
        ));
    }
    validate_fcs_args(pi.len(), b, m, confidence)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors: Vec<f64> = (0..m)
        .map(|_| subset_error(p_model, &pi, &sample_subset(&mut rng, pi.len(), b)))
        .collect();
    let mean = errors.iter().sum::<f64>() / m as f64;
    Ok(FcsReport {
        subset_size: b,
        samples: m,
        mean,
        confidence,
        pac_upper: pac_upper(mean, m, confidence),
        errors,
        mode: MarginalMode::Exact,
        estimator_stderr: None,
    })
}

/// Subset consistency for a policy. Exact mode computes the terminal
/// marginal once; importance mode estimates each touched terminal's
/// marginal from k backward trajectories (per-terminal RNG substreams, so
/// the report does not depend on thread count).
#[allow(clippy::too_many_arguments)]
pub fn fcs(
    policy: &TabularPolicy,
    target: &TargetDistribution,
    b: usize,
    m: usize,
    confidence: f64,
    seed: u64,
    mode: MarginalMode,
    threads: usize,
) -> Result<FcsReport> {
    let pi = target.probabilities();
    let n = pi.len();
    validate_fcs_args(n, b, m, confidence)?;
    match mode {
        MarginalMode::Exact => {
            let p_model = exact_marginal(policy);
            fcs_for_distribution(&p_model, target, b, m, confidence, seed)
        }
        MarginalMode::Importance { k } => {
            let graph = policy.graph();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let subsets: Vec<Vec<usize>> =
                (0..m).map(|_| sample_subset(&mut rng, n, b)).collect();
            let evals = map_indexed(m, threads, |i| -> Result<(f64, f64)> {
                let subset = &subsets[i];
                let mut est = vec![0.0; subset.len()];
                let mut noise = 0.0;
                for (j, &pos) in subset.iter().enumerate() {
                    let x = graph.terminals()[pos];
                    let sub_seed = seed
                        ^ (((i * b + j + 1) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let (mean, stderr) = importance_marginal(policy, x, k, sub_seed)?;
                    est[j] = mean;
                    noise += stderr;
                }
                let full: Vec<usize> = (0..subset.len()).collect();
                let pi_sub: Vec<f64> = subset.iter().map(|&p| pi[p]).collect();
                Ok((
                    subset_error(&est, &pi_sub, &full),
                    noise / subset.len() as f64,
                ))
            });
            let evals: Vec<(f64, f64)> = evals.into_iter().collect::<Result<_>>()?;
            let errors: Vec<f64> = evals.iter().map(|e| e.0).collect();
            let mean = errors.iter().sum::<f64>() / m as f64;
            let stderr = evals.iter().map(|e| e.1).sum::<f64>() / m as f64;
            Ok(FcsReport {
                subset_size: b,
                samples: m,
                mean,
                confidence,
                pac_upper: pac_upper(mean, m, confidence),
                errors,
                mode,
                estimator_stderr: Some(stderr),
            })
        }
    }
}

/// Mean and max consistency error over every size-B subset of terminals.
/// The subset count C(n, B) is capped to keep enumeration tractable.
pub fn fcs_exhaustive(
    p_model: &[f64],
    target: &TargetDistribution,
    b: usize,
) -> Result<(f64, f64, usize)> {
    let pi = target.probabilities();
    let n = pi.len();
    if p_model.len() != n {
        return Err(Error::InvalidArg(
            "model distribution length does not match terminal count".into(),
        ));
    }
    if b < 2 || b > n {
        return Err(Error::InvalidArg(format!(
            "subset size must satisfy 2 <= B <= {n}, got {b}"
        )));
    }
    let count = binomial(n as u64, b as u64);
    if count > 2_000_000 {
        return Err(Error::Capacity {
            what: format!("exhaustive subset enumeration C({n},{b})"),
            needed: count,
            guard: 2_000_000,
        });
    }
    let mut subset: Vec<usize> = (0..b).collect();
    let mut total = 0.0;
    let mut max = 0.0f64;
    let mut seen = 0usize;
    loop {
        let e = subset_error(p_model, &pi, &subset);
        total += e;
        max = max.max(e);
        seen += 1;
        // next lexicographic combination
        let mut i = b;
        while i > 0 && subset[i - 1] == n - b + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..b {
            subset[j] = subset[j - 1] + 1;
        }
    }
    Ok((total / seen as f64, max, seen))
}

#[derive(Debug, Clone)]
pub struct PitfallMetrics {
    /// E over the model of the unnormalized target reward.
    pub expected_reward_model: f64,
    /// Same expectation under the target itself.
    pub expected_reward_target: f64,
    /// min(model/target expectation ratio, 1).
    pub accuracy: f64,
    /// Pearson correlation between log model mass and log reward over the
    /// support; None when either side has zero variance.
    pub log_pearson: Option<f64>,
    /// Exact total variation, for contrast with the scores above.
    pub tv: f64,
}

/// Computes the reward-expectation "accuracy" score and the log-log
/// correlation for an explicit model distribution. Both scores award
/// perfect values to some badly wrong models (e.g. any power of the
/// target), which is the point: compare them against `tv`.
pub fn pitfall_metrics_for_distribution(
    p_model: &[f64],
    target: &TargetDistribution,
) -> Result<PitfallMetrics> {
    let pi = target.probabilities();
    if p_model.len() != pi.len() {
        return Err(Error::InvalidArg(
            "model distribution length does not match terminal count".into(),
        ));
    }
    let rewards: Vec<f64> = (0..pi.len()).map(|i| target.reward(i)).collect();
    let e_model: f64 = p_model.iter().zip(&rewards).map(|(p, r)| p * r).sum();
    let e_target: f64 = pi.iter().zip(&rewards).map(|(p, r)| p * r).sum();
    let accuracy = (e_model / e_target).min(1.0);

    let support: Vec<usize> = (0..pi.len()).filter(|&i| p_model[i] > 0.0).collect();
    let log_pearson = if support.len() >= 2 {
        let xs: Vec<f64> = support.iter().map(|&i| p_model[i].ln()).collect();
        let ys: Vec<f64> = support.iter().map(|&i| rewards[i].ln()).collect();
        pearson(&xs, &ys)
    } else {
        None
    };
    Ok(PitfallMetrics {
        expected_reward_model: e_model,
        expected_reward_target: e_target,
        accuracy,
        log_pearson,
        tv: total_variation(p_model, &pi),
    })
}

pub fn pitfall_metrics(
    policy: &TabularPolicy,
    target: &TargetDistribution,
) -> Result<PitfallMetrics> {
    let p_model = exact_marginal(policy);
    pitfall_metrics_for_distribution(&p_model, target)
}

/// Distribution proportional to the target raised to `power` — the
/// canonical model that fools reward-expectation and correlation scores.
pub fn power_distribution(target: &TargetDistribution, power: f64) -> Vec<f64> {
    let pi = target.probabilities();
    let weights: Vec<f64> = pi.iter().map(|p| p.powf(power)).collect();
    let z: f64 = weights.iter().sum();
    weights.iter().map(|w| w / z).collect()
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct CoverageRow {
    /// Fraction of the state space in the exceedance event N_v >= s * |S|.
    pub s: f64,
    /// The threshold s * |S| itself.
    pub threshold: f64,
    /// Fraction of trials whose distinct-visit count reached the threshold.
    pub empirical: f64,
    /// Markov bound min(1, M K / (s |S|)).
    pub bound: f64,
    /// True when the bound is >= 1 and so carries no information.
    pub vacuous: bool,
}

#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
    pub m_epochs: usize,
    pub k_cap: usize,
    pub trials: usize,
    pub num_states: usize,
    /// Mean distinct states visited per trial.
    pub mean_visited: f64,
}

/// Simulates uniform-policy exploration: each trial samples `m_epochs`
/// trajectories (children chosen uniformly) and counts distinct states
/// visited, the start state always included. The exceedance curve
/// P[N_v >= s |S|] is reported against the Markov bound M K / (s |S|),
/// where K caps the states one trajectory can touch (default: longest
/// trajectory length + 1). Trials use independent RNG substreams.
pub fn exploration_coverage(
    graph: &StateGraph,
    m_epochs: usize,
    k_cap: Option<usize>,
    trials: usize,
    seed: u64,
    threads: usize,
) -> Result<CoverageReport> {
    if trials == 0 {
        return Err(Error::InvalidArg("need at least one trial".into()));
    }
    let k = match k_cap {
        Some(k) if k == 0 => {
            return Err(Error::InvalidArg("per-epoch state cap must be positive".into()))
        }
        Some(k) => k,
        None => graph.max_trajectory_len() + 1,
    };
    let n = graph.num_states();
    let visited_counts = map_indexed(trials, threads, |trial| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut seen = vec![false; n];
        seen[graph.initial()] = true;
        let mut count = 1usize;
        for _ in 0..m_epochs {
            let mut state = graph.initial();
            let mut touched = 1usize; // counting the start state
            while !graph.is_terminal(state) && touched < k {
                let children = graph.children(state);
                let pick = rng.random_range(0..children.len());
                state = children[pick];
                touched += 1;
                if !seen[state] {
                    seen[state] = true;
                    count += 1;
                }
            }
        }
        count
    });
    let mean_visited =
        visited_counts.iter().map(|&c| c as f64).sum::<f64>() / trials as f64;
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let rows = grid
        .into_iter()
        .map(|s| {
            let threshold = s * n as f64;
            let hits = visited_counts
                .iter()
                .filter(|&&c| c as f64 >= threshold - 1e-12)
                .count();
            let raw_bound = (m_epochs * k) as f64 / threshold;
            let bound = raw_bound.min(1.0);
            CoverageRow {
                s,
                threshold,
                empirical: hits as f64 / trials as f64,
                bound,
                vacuous: raw_bound >= 1.0,
            }
        })
        .collect();
    Ok(CoverageReport {
        rows,
        m_epochs,
        k_cap: k,
        trials,
        num_states: n,
        mean_visited,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_regular_tree;
    use crate::policy::balanced_policy;
    use crate::sensitivity::{imbalanced_distribution, ImbalanceSpec, SplitRule};
    use std::sync::Arc;

    fn tree_target(g: u32, h: u32) -> TargetDistribution {
        TargetDistribution::uniform(Arc::new(build_regular_tree(g, h).unwrap()))
    }

    #[test]
    fn balanced_policy_has_zero_errors() {
        let target = tree_target(2, 3);
        let policy = balanced_policy(&target).unwrap();
        let report = fcs(
            &policy,
            &target,
            3,
            40,
            0.05,
            9,
            MarginalMode::Exact,
            1,
        )
        .unwrap();
        assert!(report.errors.iter().all(|&e| e.abs() < 1e-12));
        assert!(report.mean.abs() < 1e-12);
        assert!((report.pac_upper - (20f64.ln() / 80.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_subset_error() {
        // model (0.375, 0.375, 0.125, 0.125) vs uniform, subset {0, 2}:
        // renormalized model (0.75, 0.25) vs (0.5, 0.5) -> error 0.25
        let model = [0.375, 0.375, 0.125, 0.125];
        let pi = [0.25; 4];
        let e = subset_error(&model, &pi, &[0, 2]);
        assert!((e - 0.25).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_mean_tracks_tv_monotonically() {
        let target = tree_target(2, 2);
        let mut last_mean = -1.0;
        let mut last_tv = -1.0;
        for delta in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let mu = imbalanced_distribution(
                &target,
                &ImbalanceSpec {
                    edge: (0, 1),
                    delta,
                    split: SplitRule::Equal,
                },
                1.0,
            )
            .unwrap();
            let tv = total_variation(&mu, &target.probabilities());
            let (mean, max, count) = fcs_exhaustive(&mu, &target, 2).unwrap();
            assert_eq!(count, 6);
            assert!(max <= 1.0);
            assert!(tv > last_tv);
            assert!(mean > last_mean || (delta == 0.0 && mean == 0.0));
            last_tv = tv;
            last_mean = mean;
        }
    }

    #[test]
    fn zero_tv_iff_zero_exhaustive_mean() {
        let target = tree_target(2, 3);
        let exact = target.probabilities();
        let (mean, _, _) = fcs_exhaustive(&exact, &target, 2).unwrap();
        assert_eq!(mean, 0.0);
        let mu = imbalanced_distribution(
            &target,
            &ImbalanceSpec {
                edge: (0, 1),
                delta: 0.3,
                split: SplitRule::Equal,
            },
            1.0,
        )
        .unwrap();
        let (mean, _, _) = fcs_exhaustive(&mu, &target, 2).unwrap();
        assert!(mean > 0.0);
    }

    #[test]
    fn importance_mode_matches_exact_on_balanced_policy() {
        let target = tree_target(2, 2);
        let policy = balanced_policy(&target).unwrap();
        let report = fcs(
            &policy,
            &target,
            2,
            10,
            0.05,
            4,
            MarginalMode::Importance { k: 64 },
            2,
        )
        .unwrap();
        // balanced policy: importance weights are constant, zero noise
        assert!(report.mean < 1e-10, "mean={}", report.mean);
        assert!(report.estimator_stderr.unwrap() < 1e-12);
        // determinism across thread counts
        let again = fcs(
            &policy,
            &target,
            2,
            10,
            0.05,
            4,
            MarginalMode::Importance { k: 64 },
            1,
        )
        .unwrap();
        assert_eq!(report.errors, again.errors);
    }

    #[test]
    fn pac_bound_covers_true_mean() {
        let target = tree_target(2, 3);
        let mu = imbalanced_distribution(
            &target,
            &ImbalanceSpec {
                edge: (0, 1),
                delta: 1.0,
                split: SplitRule::Equal,
            },
            1.0,
        )
        .unwrap();
        let (true_mean, _, _) = fcs_exhaustive(&mu, &target, 2).unwrap();
        let mut covered = 0;
        let trials = 400;
        for t in 0..trials {
            let rep = fcs_for_distribution(&mu, &target, 2, 40, 0.05, 1000 + t).unwrap();
            if true_mean <= rep.pac_upper {
                covered += 1;
            }
        }
        // the bound promises >= 95% coverage
        assert!(
            covered as f64 >= 0.95 * trials as f64,
            "covered {covered}/{trials}"
        );
    }

    #[test]
    fn pitfall_scores_are_fooled_by_squared_target() {
        let graph = Arc::new(build_regular_tree(2, 2).unwrap());
        let target =
            TargetDistribution::from_rewards(graph, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let squared = power_distribution(&target, 2.0);
        let m = pitfall_metrics_for_distribution(&squared, &target).unwrap();
        assert!((m.log_pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(m.accuracy, 1.0);
        assert!((m.tv - 4.0 / 30.0).abs() < 1e-12);
        let (fcs_mean, _, _) = fcs_exhaustive(&squared, &target, 2).unwrap();
        assert!(fcs_mean > 0.0, "consistency errors do flag the mismatch");
    }

    #[test]
    fn pitfall_scores_on_exact_model_and_degenerate_target() {
        let graph = Arc::new(build_regular_tree(2, 2).unwrap());
        let target =
            TargetDistribution::from_rewards(graph.clone(), &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = pitfall_metrics_for_distribution(&target.probabilities(), &target).unwrap();
        assert!((m.log_pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.accuracy - 1.0).abs() < 1e-12);
        assert!(m.tv < 1e-15);
        // uniform rewards: the ratio score is 1 for any model
        let uni = TargetDistribution::uniform(graph);
        let skew = [0.7, 0.1, 0.1, 0.1];
        let m = pitfall_metrics_for_distribution(&skew, &uni).unwrap();
        assert!((m.accuracy - 1.0).abs() < 1e-12);
        assert!(m.log_pearson.is_none(), "zero reward variance");
        assert!(m.tv > 0.0);
    }

    #[test]
    fn coverage_obeys_markov_bound() {
        let graph = build_regular_tree(3, 4).unwrap();
        let report = exploration_coverage(&graph, 10, None, 500, 5, 2).unwrap();
        assert_eq!(report.k_cap, 5);
        for row in &report.rows {
            // allow 3-sigma binomial noise above the bound
            let sigma =
                (row.bound * (1.0 - row.bound) / report.trials as f64).sqrt();
            assert!(
                row.empirical <= row.bound + 3.0 * sigma + 1e-12,
                "s={} empirical={} bound={}",
                row.s,
                row.empirical,
                row.bound
            );
        }
        // small-s region is vacuous whenever M K >= s |S|
        assert!(report.rows[0].vacuous);
    }

    #[test]
    fn coverage_without_epochs_counts_only_the_start() {
        let graph = build_regular_tree(2, 2).unwrap();
        let report = exploration_coverage(&graph, 0, None, 120, 1, 1).unwrap();
        assert_eq!(report.mean_visited, 1.0);
        for row in &report.rows {
            if row.threshold > 1.0 {
                assert_eq!(row.empirical, 0.0);
            }
        }
        // determinism across thread counts
        let again = exploration_coverage(&graph, 0, None, 120, 1, 4).unwrap();
        assert_eq!(report.mean_visited, again.mean_visited);
    }
}
