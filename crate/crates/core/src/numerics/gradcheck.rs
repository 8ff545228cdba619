//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CadaError, Result};
use crate::scalar::Scalar;

use super::param::{unique_parameters, zero_grads, Parameter};
use super::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation step, must lie in `[1e-4, 1e-2]`.
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Denominator floor of the relative error, guarding coordinates whose true gradient is ~0.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-3, tolerance: 1e-3, coords_per_tensor: 4, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Runs `loss_fn` once with recording to obtain analytic gradients, then
/// compares them against central differences on sampled coordinates.
pub fn finite_diff_check<T, F>(mut loss_fn: F, params: &[Parameter<T>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut() -> Result<Tensor<T>>,
{
    let params = unique_parameters(params);
    zero_grads(&params);
    loss_fn()?.backward()?;
    let analytic: Vec<Vec<T>> = params
        .iter()
        .map(|p| p.tensor.grad().unwrap_or_else(|| vec![T::zero(); p.tensor.numel()]))
        .collect();
    compare_gradients(loss_fn, &params, &analytic, opts)
}

/// Compares caller-supplied gradients (one buffer per parameter) against
/// central differences of `loss_fn`.
pub fn compare_gradients<T, F>(
    mut loss_fn: F,
    params: &[Parameter<T>],
    analytic: &[Vec<T>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut() -> Result<Tensor<T>>,
{
    if !(1e-4..=1e-2).contains(&opts.h) {
        return Err(CadaError::Check(format!("step h={} outside [1e-4, 1e-2]", opts.h)));
    }
    if analytic.len() != params.len() {
        return Err(CadaError::Check(format!("{} gradient buffers for {} parameters", analytic.len(), params.len())));
    }
    let mut eval = || -> Result<T> { no_grad(|| loss_fn().map(|t| t.item())) };
    let base = eval()?;
    for _ in 0..2 {
        let again = eval()?;
        if again.to_f64_lossy().to_bits() != base.to_f64_lossy().to_bits() {
            return Err(CadaError::Check(format!("loss function is not deterministic: {base} vs {again}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = T::lit(opts.h);
    let two_h = T::lit(2.0 * opts.h);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coords_checked: 0, tolerance: opts.tolerance };
    for (p, grad) in params.iter().zip(analytic) {
        let n = p.tensor.numel();
        let coords = sample(&mut rng, n, opts.coords_per_tensor.min(n)).into_vec();
        for i in coords {
            let orig = p.tensor.data()[i];
            p.tensor.update_data(|d| d[i] = orig + h);
            let plus = eval();
            p.tensor.update_data(|d| d[i] = orig - h);
            let minus = eval();
            p.tensor.update_data(|d| d[i] = orig);
            let numeric = ((plus? - minus?) / two_h).to_f64_lossy();
            let a = grad[i].to_f64_lossy();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(CoordCheck { param: p.name.clone(), index: i, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let w = Parameter::new("w", Tensor::<f64>::parameter(vec![0.5, -1.5, 2.0], &[3]).unwrap());
        let t = w.tensor.clone();
        let report =
            finite_diff_check(|| Ok(t.mul(&t)?.sum()), std::slice::from_ref(&w), GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.coords_checked, 3);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let w = Parameter::new("w", Tensor::<f64>::parameter(vec![0.5, -1.5, 2.0], &[3]).unwrap());
        let t = w.tensor.clone();
        let wrong = vec![vec![1.0, -3.0, 4.0 * 1.5]];
        let report =
            compare_gradients(|| Ok(t.mul(&t)?.sum()), std::slice::from_ref(&w), &wrong, GradCheckOptions::default())
                .unwrap();
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst.unwrap().index, 2);
    }

    #[test]
    fn non_deterministic_loss_is_rejected() {
        let w = Parameter::new("w", Tensor::<f64>::parameter(vec![1.0], &[1]).unwrap());
        let t = w.tensor.clone();
        let mut calls = 0.0;
        let err = compare_gradients(
            || {
                calls += 1.0;
                Ok(t.scale(calls))
            },
            std::slice::from_ref(&w),
            &[vec![1.0]],
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CadaError::Check(_)));
    }

    #[test]
    fn step_size_is_bounded() {
        let w = Parameter::new("w", Tensor::<f64>::parameter(vec![1.0], &[1]).unwrap());
        let t = w.tensor.clone();
        let opts = GradCheckOptions { h: 1e-6, ..Default::default() };
        assert!(finite_diff_check(|| Ok(t.sum()), &[w], opts).is_err());
    }
}
