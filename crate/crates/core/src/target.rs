//! Target distributions over the terminal states of a graph.
//!
//! A target is an unnormalized reward per terminal. Rewards are kept in log
//! space alongside linear values so that sharply tempered product-form
//! targets stay representable.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{set_state_elements, StateGraph, StateId};

#[derive(Debug, Clone)]
pub struct TargetDistribution {
    graph: Arc<StateGraph>,
    log_reward: Vec<f64>, // indexed by terminal position
    log_partition: f64,
}

impl TargetDistribution {
    pub fn from_rewards(graph: Arc<StateGraph>, rewards: &[f64]) -> Result<Self> {
        if rewards.len() != graph.num_terminals() {
            return Err(Error::InvalidArg(format!(
                "{} rewards for {} terminals",
                rewards.len(),
                graph.num_terminals()
            )));
        }
        if rewards.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArg(
                "terminal rewards must be positive and finite".into(),
            ));
        }
        Self::from_log_rewards(graph, &rewards.iter().map(|r| r.ln()).collect::<Vec<_>>())
    }

    pub fn from_log_rewards(graph: Arc<StateGraph>, log_rewards: &[f64]) -> Result<Self> {
        if log_rewards.len() != graph.num_terminals() {
            return Err(Error::InvalidArg(format!(
                "{} log-rewards for {} terminals",
                log_rewards.len(),
                graph.num_terminals()
            )));
        }
        if log_rewards.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArg("log-rewards must be finite".into()));
        }
        let log_partition = log_sum_exp(log_rewards);
        Ok(TargetDistribution {
            graph,
            log_reward: log_rewards.to_vec(),
            log_partition,
        })
    }

    /// Reward 1 on every terminal.
    pub fn uniform(graph: Arc<StateGraph>) -> Self {
        let n = graph.num_terminals();
        TargetDistribution {
            graph,
            log_reward: vec![0.0; n],
            log_partition: (n as f64).ln(),
        }
    }

    /// `K = modes.len()` designated terminals each carry probability `r/n`;
    /// the remaining mass is spread evenly over the other terminals. Needs
    /// `1 < r` and `K*r < n` so that off-mode mass stays positive.
    pub fn k_modes(graph: Arc<StateGraph>, modes: &[StateId], r: f64) -> Result<Self> {
        let n = graph.num_terminals() as f64;
        let k = modes.len() as f64;
        if modes.is_empty() {
            return Err(Error::InvalidArg("need at least one mode".into()));
        }
        if !(r > 1.0) || k * r >= n {
            return Err(Error::InvalidArg(format!(
                "mode boost must satisfy 1 < r and K*r < n (K={k}, r={r}, n={n})"
            )));
        }
        let mut is_mode = vec![false; graph.num_terminals()];
        for &m in modes {
            let idx = graph
                .terminal_index(m)
                .ok_or(Error::InvalidArg(format!("state {m} is not terminal")))?;
            if is_mode[idx] {
                return Err(Error::InvalidArg(format!("duplicate mode {m}")));
            }
            is_mode[idx] = true;
        }
        let on = r / n;
        let off = (n - k * r) / (n * (n - k));
        let rewards: Vec<f64> = is_mode
            .iter()
            .map(|&m| if m { on } else { off })
            .collect();
        Self::from_rewards(graph, &rewards)
    }

    /// Product-form reward on a subset-construction graph: each element `e`
    /// carries a value `values[e-1]`, `log R(x) = sum of values over x`, and
    /// the whole reward is tempered as `R^(1/alpha)`.
    pub fn set_product(
        graph: Arc<StateGraph>,
        d: u32,
        s: u32,
        values: &[f64],
        alpha: f64,
    ) -> Result<Self> {
        if values.len() != d as usize {
            return Err(Error::InvalidArg(format!(
                "{} element values for d={d}",
                values.len()
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidArg("temper alpha must be positive".into()));
        }
        let log_rewards: Vec<f64> = graph
            .terminals()
            .iter()
            .map(|&x| {
                let elems = set_state_elements(d, s, x)?;
                Ok(elems.iter().map(|&e| values[e as usize - 1]).sum::<f64>() / alpha)
            })
            .collect::<Result<_>>()?;
        Self::from_log_rewards(graph, &log_rewards)
    }

    /// `set_product` with element values drawn once from U(-5, 5).
    pub fn set_product_seeded(
        graph: Arc<StateGraph>,
        d: u32,
        s: u32,
        seed: u64,
        alpha: f64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        Self::set_product(graph, d, s, &values, alpha)
    }

    pub fn graph(&self) -> &Arc<StateGraph> {
        &self.graph
    }

    pub fn num_terminals(&self) -> usize {
        self.log_reward.len()
    }

    /// Log unnormalized reward by terminal position.
    pub fn log_reward(&self, terminal_pos: usize) -> f64 {
        self.log_reward[terminal_pos]
    }

    pub fn log_reward_of_state(&self, x: StateId) -> Result<f64> {
        self.graph
            .terminal_index(x)
            .map(|i| self.log_reward[i])
            .ok_or(Error::InvalidArg(format!("state {x} is not terminal")))
    }

    pub fn reward(&self, terminal_pos: usize) -> f64 {
        self.log_reward[terminal_pos].exp()
    }

    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn partition(&self) -> f64 {
        self.log_partition.exp()
    }

    /// Normalized probabilities by terminal position.
    pub fn probabilities(&self) -> Vec<f64> {
        self.log_reward
            .iter()
            .map(|l| (l - self.log_partition).exp())
            .collect()
    }

    /// A new target with every reward multiplied by `factor` (> 0); the
    /// normalized distribution is unchanged.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::InvalidArg("scale factor must be positive".into()));
        }
        let shifted: Vec<f64> = self.log_reward.iter().map(|l| l + factor.ln()).collect();
        Self::from_log_rewards(self.graph.clone(), &shifted)
    }

    /// Pointwise product with per-terminal log-likelihood factors: the
    /// posterior-style update `reward(x) * exp(loglik[x])`.
    pub fn product_with_loglik(&self, loglik: &[f64]) -> Result<Self> {
        if loglik.len() != self.log_reward.len() {
            return Err(Error::InvalidArg(format!(
                "{} log-likelihoods for {} terminals",
                loglik.len(),
                self.log_reward.len()
            )));
        }
        let combined: Vec<f64> = self
            .log_reward
            .iter()
            .zip(loglik)
            .map(|(a, b)| a + b)
            .collect();
        Self::from_log_rewards(self.graph.clone(), &combined)
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
