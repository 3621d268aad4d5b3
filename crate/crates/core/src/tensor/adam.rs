//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Standard moment coefficients; only the learning rate varies in practice.
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers for a fixed list of parameters.
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update over all parameters. `params` and `grads` must line up with
    /// the slice the state was created from.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> Result<(), TensorError> {
        assert_eq!(params.len(), self.m.len(), "parameter count fixed at creation");
        assert_eq!(grads.len(), self.m.len(), "gradient count must match parameters");
        for (pi, g) in grads.iter().enumerate() {
            if let Some(e) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    param: pi,
                    element: e,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (pi, p) in params.iter_mut().enumerate() {
            let m = self.m[pi].data_mut();
            let v = self.v[pi].data_mut();
            let g = grads[pi].data();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= c.lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let g = Tensor::zeros(1, 2);
        let mut state = AdamState::new(&[&p], AdamConfig::with_lr(0.1));
        state.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_positive_gradient_decreases_parameter() {
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(&[&p], AdamConfig::with_lr(0.01));
        let mut prev = 0.0;
        for _ in 0..10 {
            state
                .step(&mut [&mut p], &[Tensor::scalar(1.0)])
                .unwrap();
            let cur = p.item().unwrap();
            assert!(cur < prev, "parameter must decrease monotonically");
            prev = cur;
        }
    }

    #[test]
    fn matches_hand_computed_two_step_trace() {
        // theta0 = 1, g = 0.5 at both steps, lr = 0.1, beta1 = 0.9, beta2 = 0.999.
        // Step 1: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        //   theta1 = 1 - 0.1 * 0.5 / (0.5 + 1e-8)
        // Step 2: m = 0.095, v = 0.00049975, m_hat = 0.5, v_hat = 0.25
        //   theta2 = theta1 - 0.1 * 0.5 / (0.5 + 1e-8)
        let upd = 0.1 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1.0 - upd;
        let expect2 = expect1 - upd;

        let mut p = Tensor::scalar(1.0);
        let mut state = AdamState::new(&[&p], AdamConfig::with_lr(0.1));
        state.step(&mut [&mut p], &[Tensor::scalar(0.5)]).unwrap();
        assert!((p.item().unwrap() - expect1).abs() < 1e-15);
        state.step(&mut [&mut p], &[Tensor::scalar(0.5)]).unwrap();
        assert!((p.item().unwrap() - expect2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_identifies_parameter() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::row(vec![1.0, 2.0]);
        let mut state = AdamState::new(&[&a, &b], AdamConfig::with_lr(0.1));
        let gb = Tensor::row(vec![0.0, f64::NAN]);
        let err = state
            .step(&mut [&mut a, &mut b], &[Tensor::scalar(0.0), gb])
            .unwrap_err();
        match err {
            TensorError::NonFiniteGradient { param, element } => {
                assert_eq!((param, element), (1, 1));
            }
            other => panic!("unexpected error: {other}"),
        }
    }
}
