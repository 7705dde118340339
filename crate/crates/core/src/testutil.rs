//! Helpers shared by gradient tests: flattening parameter vectors so
//! analytic gradients can be checked against finite differences.

use crate::grad::ParamGrad;
use crate::policy::{Backward, TabularPolicy};

/// Applies a signed nudge to the i-th scalar parameter (flattened
/// order: forward logits, backward logits, state flows, log_z).
/// Returns false once `i` runs past the parameter count.
pub(crate) fn nudge(policy: &mut TabularPolicy, i: usize, eps: f64) -> bool {
    let mut idx = i;
    let ns = policy.graph().num_states();
    for v in 0..ns {
        let len = policy.forward_logits()[v].len();
        if idx < len {
            policy.forward_logits_mut()[v][idx] += eps;
            return true;
        }
        idx -= len;
    }
    let learnable = matches!(policy.backward(), Backward::Learnable(_));
    if learnable {
        let lens: Vec<usize> = match policy.backward() {
            Backward::Learnable(rows) => rows.iter().map(|r| r.len()).collect(),
            _ => unreachable!(),
        };
        for (v, len) in lens.iter().enumerate() {
            if idx < *len {
                if let Backward::Learnable(rows) = policy.backward_mut() {
                    rows[v][idx] += eps;
                }
                return true;
            }
            idx -= len;
        }
    }
    if policy.log_state_flow().is_some() {
        let len = policy.log_state_flow().unwrap().len();
        if idx < len {
            policy.log_state_flow_mut().unwrap()[idx] += eps;
            return true;
        }
        idx -= len;
    }
    if let Some(z) = policy.log_z() {
        if idx == 0 {
            policy.set_log_z(z + eps);
            return true;
        }
    }
    false
}

/// Flattens a gradient in the same order `nudge` walks the parameters.
pub(crate) fn flat_grad(policy: &TabularPolicy, grad: &ParamGrad) -> Vec<f64> {
    let mut out = Vec::new();
    for row in &grad.forward_logits {
        out.extend_from_slice(row);
    }
    if matches!(policy.backward(), Backward::Learnable(_)) {
        for row in grad.backward_logits.as_ref().unwrap() {
            out.extend_from_slice(row);
        }
    }
    if let Some(f) = &grad.log_state_flow {
        out.extend_from_slice(f);
    }
    if let Some(z) = grad.log_z {
        out.push(z);
    }
    out
}
