use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{CadaError, Result};
use crate::scalar::Scalar;

use super::param::{unique_parameters, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First and second moment buffers of one parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Optimizer state: one moment entry per distinct storage, keyed by the
/// canonical (first-seen) parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T> Default for OptimizerState<T> {
    fn default() -> Self {
        OptimizerState { step: 0, moments: BTreeMap::new() }
    }
}

/// What one optimizer step touched.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    /// Canonical names updated this step.
    pub updated: Vec<String>,
    /// Alias entries that were skipped because their storage was already updated.
    pub skipped_aliases: Vec<String>,
    /// Number of writes per storage id; every value is 1.
    pub writes_per_storage: HashMap<usize, usize>,
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: OptimizerState::default() }
    }

    pub fn step(&mut self, params: &[Parameter<T>], lr: f64) -> Result<StepReport> {
        let mut report = StepReport::default();
        let mut seen = HashSet::new();
        // validate first so a missing gradient leaves every parameter untouched
        for p in params {
            if p.tensor.requires_grad() && !p.tensor.has_grad() && !seen.contains(&p.tensor.storage_id()) {
                return Err(CadaError::Training(format!("missing gradient on parameter `{}`", p.name)));
            }
            seen.insert(p.tensor.storage_id());
        }
        seen.clear();

        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr_t = T::lit(lr);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let eps = T::lit(c.eps);
        let one = T::one();

        for p in params {
            let sid = p.tensor.storage_id();
            if !seen.insert(sid) {
                report.skipped_aliases.push(p.name.clone());
                continue;
            }
            if !p.tensor.requires_grad() {
                continue;
            }
            let grad = p.tensor.grad().expect("validated above");
            let n = grad.len();
            let mom = self
                .state
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
            p.tensor.update_data(|w| {
                for i in 0..n {
                    let g = grad[i];
                    mom.m[i] = b1 * mom.m[i] + (one - b1) * g;
                    mom.v[i] = b2 * mom.v[i] + (one - b2) * g * g;
                    let mhat = mom.m[i] / bc1;
                    let vhat = mom.v[i] / bc2;
                    w[i] = w[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
                }
            });
            *report.writes_per_storage.entry(sid).or_default() += 1;
            report.updated.push(p.name.clone());
        }
        Ok(report)
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm` and
/// returns the norm before scaling. Shared storages count once.
pub fn clip_grad_norm<T: Scalar>(params: &[Parameter<T>], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(CadaError::Validation(format!("clip norm {max_norm} must be positive")));
    }
    let params = unique_parameters(params);
    let grads: Vec<Option<Vec<T>>> = params.iter().map(|p| p.tensor.grad()).collect();
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|g| {
            let x = g.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = T::lit(max_norm / norm);
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                p.tensor.set_grad(g.into_iter().map(|x| x * scale).collect())?;
            }
        }
    }
    Ok(norm)
}

/// Cosine decay from `base_lr` at step 0 towards zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}
