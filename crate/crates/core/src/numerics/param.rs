use std::collections::HashSet;

use crate::error::Result;
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// A named trainable tensor. `shared_with` names the canonical parameter when
/// this entry is an alias of another module's storage.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub shared_with: Option<String>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Parameter { name: name.into(), tensor, shared_with: None }
    }

    pub fn alias(name: impl Into<String>, of: &Parameter<T>) -> Self {
        Parameter { name: name.into(), tensor: of.tensor.clone(), shared_with: Some(of.name.clone()) }
    }

    /// Symmetric by construction: compares storage identity.
    pub fn shares_storage_with(&self, other: &Parameter<T>) -> bool {
        self.tensor.same_storage(&other.tensor)
    }
}

/// Keeps the first parameter per storage; aliases are dropped.
pub fn unique_parameters<T: Scalar>(params: &[Parameter<T>]) -> Vec<Parameter<T>> {
    let mut seen = HashSet::new();
    params.iter().filter(|p| seen.insert(p.tensor.storage_id())).cloned().collect()
}

pub fn zero_grads<T: Scalar>(params: &[Parameter<T>]) {
    for p in params {
        p.tensor.zero_grad();
    }
}

pub fn parameter_count<T: Scalar>(params: &[Parameter<T>]) -> usize {
    unique_parameters(params).iter().map(|p| p.tensor.numel()).sum()
}

/// Global L2 norm of the gradients of distinct parameters.
pub fn grad_norm<T: Scalar>(params: &[Parameter<T>]) -> Result<f64> {
    let mut s = 0.0;
    for p in unique_parameters(params) {
        if let Some(g) = p.tensor.grad() {
            s += g.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>();
        }
    }
    Ok(s.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sharing_is_symmetric_and_deduplicated() {
        let a = Parameter::new("enc.w", Tensor::<f32>::parameter(vec![0.0; 4], &[2, 2]).unwrap());
        let b = Parameter::alias("dec.w", &a);
        let c = Parameter::new("dec.x", Tensor::<f32>::parameter(vec![0.0; 4], &[2, 2]).unwrap());
        assert!(a.shares_storage_with(&b) && b.shares_storage_with(&a));
        assert!(!a.shares_storage_with(&c) && !c.shares_storage_with(&a));
        let all = vec![a, b, c];
        let uniq = unique_parameters(&all);
        assert_eq!(uniq.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(), ["enc.w", "dec.x"]);
        assert_eq!(parameter_count(&all), 8);
    }
}
