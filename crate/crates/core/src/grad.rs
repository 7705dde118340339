//! Gradient containers and the adaptive-moment optimizer shared by the
//! batch and streaming training loops.

use crate::error::{Error, Result};
use crate::policy::{Backward, TabularPolicy};

/// Gradient (or first/second moment) storage mirroring the shape of a
/// policy's learnable parameters. Groups absent from the policy are `None`.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub forward_logits: Vec<Vec<f64>>,
    pub backward_logits: Option<Vec<Vec<f64>>>,
    pub log_state_flow: Option<Vec<f64>>,
    pub log_z: Option<f64>,
}

impl ParamGrad {
    pub fn zeros_like(policy: &TabularPolicy) -> Self {
        let forward_logits = policy
            .forward_logits()
            .iter()
            .map(|r| vec![0.0; r.len()])
            .collect();
        let backward_logits = match policy.backward() {
            Backward::Uniform => None,
            Backward::Learnable(rows) => {
                Some(rows.iter().map(|r| vec![0.0; r.len()]).collect())
            }
        };
        let log_state_flow = policy.log_state_flow().map(|f| vec![0.0; f.len()]);
        let log_z = policy.log_z().map(|_| 0.0);
        ParamGrad {
            forward_logits,
            backward_logits,
            log_state_flow,
            log_z,
        }
    }

    /// `self += weight * other`. Shapes must match.
    pub fn add_scaled(&mut self, other: &ParamGrad, weight: f64) {
        for (a, b) in self.forward_logits.iter_mut().zip(&other.forward_logits) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += weight * y;
            }
        }
        if let (Some(a), Some(b)) = (&mut self.backward_logits, &other.backward_logits) {
            for (ra, rb) in a.iter_mut().zip(b) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += weight * y;
                }
            }
        }
        if let (Some(a), Some(b)) = (&mut self.log_state_flow, &other.log_state_flow) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += weight * y;
            }
        }
        if let (Some(a), Some(b)) = (&mut self.log_z, other.log_z) {
            *a += weight * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.for_each_mut(|x| *x *= c);
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|x| ok &= x.is_finite());
        ok
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.for_each(|x| m = m.max(x.abs()));
        m
    }

    fn for_each(&self, mut f: impl FnMut(f64)) {
        for row in &self.forward_logits {
            row.iter().for_each(|&x| f(x));
        }
        if let Some(rows) = &self.backward_logits {
            for row in rows {
                row.iter().for_each(|&x| f(x));
            }
        }
        if let Some(flows) = &self.log_state_flow {
            flows.iter().for_each(|&x| f(x));
        }
        if let Some(z) = self.log_z {
            f(z);
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for row in &mut self.forward_logits {
            row.iter_mut().for_each(&mut f);
        }
        if let Some(rows) = &mut self.backward_logits {
            for row in rows {
                row.iter_mut().for_each(&mut f);
            }
        }
        if let Some(flows) = &mut self.log_state_flow {
            flows.iter_mut().for_each(&mut f);
        }
        if let Some(z) = &mut self.log_z {
            f(z);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    /// Rate for forward/backward logits and log-state-flows.
    pub lr_logits: f64,
    /// Rate for the log-partition head.
    pub lr_log_z: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_logits: 1e-3,
            lr_log_z: 1e-1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_logits > 0.0 && self.lr_logits.is_finite())
            || !(self.lr_log_z > 0.0 && self.lr_log_z.is_finite())
        {
            return Err(Error::InvalidArg(
                "learning rates must be positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArg("decay rates must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment estimation over all parameter groups of one policy.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: ParamGrad,
    v: ParamGrad,
}

impl Adam {
    pub fn new(policy: &TabularPolicy, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            t: 0,
            m: ParamGrad::zeros_like(policy),
            v: ParamGrad::zeros_like(policy),
        })
    }

    fn update_scalar(
        cfg: &AdamConfig,
        lr: f64,
        bc1: f64,
        bc2: f64,
        p: &mut f64,
        m: &mut f64,
        v: &mut f64,
        g: f64,
    ) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }

    /// One descent step. The gradient must mirror the policy's shape.
    pub fn step(&mut self, policy: &mut TabularPolicy, grad: &ParamGrad) -> Result<()> {
        if grad.forward_logits.len() != self.m.forward_logits.len()
            || grad.log_z.is_some() != self.m.log_z.is_some()
            || grad.log_state_flow.is_some() != self.m.log_state_flow.is_some()
        {
            return Err(Error::InvalidArg(
                "gradient shape does not match the optimized policy".into(),
            ));
        }
        self.t += 1;
        let cfg = self.cfg;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);

        for (s, row) in grad.forward_logits.iter().enumerate() {
            let params = &mut policy.forward_logits_mut()[s];
            for (j, &g) in row.iter().enumerate() {
                Self::update_scalar(
                    &cfg,
                    cfg.lr_logits,
                    bc1,
                    bc2,
                    &mut params[j],
                    &mut self.m.forward_logits[s][j],
                    &mut self.v.forward_logits[s][j],
                    g,
                );
            }
        }
        if let Some(grows) = &grad.backward_logits {
            let (ms, vs) = (
                self.m.backward_logits.as_mut().unwrap(),
                self.v.backward_logits.as_mut().unwrap(),
            );
            // collect updates first: the policy borrow is separate
            if let Backward::Learnable(rows) = policy.backward_mut() {
                for (s, grow) in grows.iter().enumerate() {
                    for (j, &g) in grow.iter().enumerate() {
                        Self::update_scalar(
                            &cfg,
                            cfg.lr_logits,
                            bc1,
                            bc2,
                            &mut rows[s][j],
                            &mut ms[s][j],
                            &mut vs[s][j],
                            g,
                        );
                    }
                }
            } else {
                return Err(Error::InvalidArg(
                    "backward gradient supplied for a uniform backward policy".into(),
                ));
            }
        }
        if let Some(gflow) = &grad.log_state_flow {
            let ms = self.m.log_state_flow.as_mut().unwrap();
            let vs = self.v.log_state_flow.as_mut().unwrap();
            let flows = policy
                .log_state_flow_mut()
                .ok_or(Error::MissingParams("log-state-flow parameters"))?;
            for (j, &g) in gflow.iter().enumerate() {
                Self::update_scalar(
                    &cfg,
                    cfg.lr_logits,
                    bc1,
                    bc2,
                    &mut flows[j],
                    &mut ms[j],
                    &mut vs[j],
                    g,
                );
            }
        }
        if let Some(g) = grad.log_z {
            let mz = self.m.log_z.as_mut().unwrap();
            let vz = self.v.log_z.as_mut().unwrap();
            let mut z = policy
                .log_z()
                .ok_or(Error::MissingParams("log-partition parameter"))?;
            Self::update_scalar(&cfg, cfg.lr_log_z, bc1, bc2, &mut z, mz, vz, g);
            policy.set_log_z(z);
        }
        Ok(())
    }
}
