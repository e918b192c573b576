//! Bias-corrected Adam updates over a [`ParamStore`].

use thiserror::Error;

use super::nn::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
}

/// Adam hyperparameters. Defaults follow the usual β₁=0.9, β₂=0.999, ε=1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One optimizer step. `grads` must align with the store's registration
/// order (as returned by `Binding::collect_grads`). Moments live in the
/// store so they ride along with checkpoints.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    config: AdamConfig,
) -> Result<(), OptimError> {
    assert_eq!(grads.len(), store.len(), "gradient count mismatch");
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient(store.name_at(i).to_string()));
        }
    }

    store.adam_step += 1;
    let t = store.adam_step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);

    for (i, grad) in grads.iter().enumerate() {
        let g = grad.data();
        let (param, m1, m2) = store.optim_slots(i);
        let p = param.data_mut();
        let m = m1.data_mut();
        let v = m2.data_mut();
        assert_eq!(g.len(), p.len(), "gradient shape mismatch at index {i}");
        for k in 0..g.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.register("p", Tensor::scalar(value));
        store
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = scalar_store(1.5);
        for _ in 0..3 {
            adam_step(&mut store, &[Tensor::scalar(0.0)], AdamConfig::with_lr(0.1)).unwrap();
        }
        let id = store.by_name("p").unwrap();
        assert_eq!(store.get(id).item(), 1.5);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_step() {
        let mut store = scalar_store(0.0);
        adam_step(&mut store, &[Tensor::scalar(1.0)], AdamConfig::with_lr(0.1)).unwrap();
        let id = store.by_name("p").unwrap();
        // First step: m̂ = v̂ = g, update = -lr·g/(|g| + ε) ≈ -lr.
        assert!((store.get(id).item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = scalar_store(0.0);
        let err = adam_step(
            &mut store,
            &[Tensor::scalar(f64::NAN)],
            AdamConfig::with_lr(0.1),
        );
        assert!(matches!(err, Err(OptimError::NonFiniteGradient(_))));
    }
}
