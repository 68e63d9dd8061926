//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn for_params(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of every parameter in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Contract(format!(
            "learning rate {} must be >= 0",
            cfg.lr
        )));
    }
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let numel = params.get(name).map_or(0, |t| t.numel());
        let ok = |m: &BTreeMap<String, Vec<f64>>| m.get(name).is_some_and(|v| v.len() == numel);
        if !ok(&state.m) || !ok(&state.v) || !grads.get(name).is_some_and(|g| g.len() == numel) {
            return Err(Error::Contract(format!(
                "optimizer state or gradient for `{name}` does not match its {numel} values"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for name in &names {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        let p = params.get_mut(name).expect("checked above").data_mut();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &ParamGrads) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
