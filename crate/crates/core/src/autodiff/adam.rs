use serde::{Deserialize, Serialize};

use super::{Real, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub epsilon: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Gradients are checked for NaN/Inf
    /// before anything is touched; a poisoned gradient leaves parameters and
    /// state unchanged.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(TensorError::OptimizerShape(params.len().min(grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(TensorError::OptimizerShape(i));
            }
            if !g.is_finite() {
                return Err(TensorError::PoisonedGradient(i));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: Real) -> Real {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<Real>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent scalar Adam, written from the update equations.
    fn scalar_adam(theta0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = Vec::new();
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::row_vector(vec![1.0, -2.0, 3.0])];
        let before = params.clone();
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[Tensor::zeros(&[1, 3])]).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn first_step_matches_formula() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = -0.001 * 1.0 / (1.0 + 1e-8);
        assert_eq!(params[0].item(), expect);
        assert!((params[0].item() + 0.000_999_999_99).abs() < 1e-15);
        let oracle = scalar_adam(0.0, &[1.0], 0.001, 0.9, 0.999, 1e-8);
        assert!((params[0].item() - oracle[0]).abs() < 1e-18);
    }

    #[cfg(not(feature = "f32"))]
    #[test]
    fn two_steps_follow_scalar_reference() {
        let grads = [0.3, 0.3];
        let oracle = scalar_adam(0.5, &grads, 0.001, 0.9, 0.999, 1e-8);
        let mut params = vec![Tensor::scalar(0.5)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for (g, expect) in grads.iter().zip(&oracle) {
            state.step(&mut params, &[Tensor::scalar(*g)]).unwrap();
            assert!((params[0].item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn poisoned_gradient_aborts_without_mutation() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let err = state.step(&mut params, &[Tensor::scalar(Real::NAN)]).unwrap_err();
        assert_eq!(err, TensorError::PoisonedGradient(0));
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = vec![Tensor::row_vector(vec![30.0, 40.0])];
        let norm = clip_global_norm(&mut g, 10.0);
        assert_eq!(norm, 50.0);
        assert!((g[0].sum_squares().sqrt() - 10.0).abs() < 1e-9);
        let mut small = vec![Tensor::row_vector(vec![3.0, 4.0])];
        clip_global_norm(&mut small, 10.0);
        assert_eq!(small[0].data(), &[3.0, 4.0]);
    }
}
