//! Bias-corrected Adam over a flat parameter vector addressed as named
//! blocks in a fixed architecture order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("Adam lr must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "Adam {name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "Adam eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First/second moment accumulators plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(param_count: usize, cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }

    /// One update over the whole parameter vector given as ordered blocks
    /// of `(name, params, grads)`. The step count is incremented once per
    /// call. A NaN gradient aborts before any parameter is touched, naming
    /// the offending block.
    pub fn step_blocks(&mut self, blocks: &mut [(&str, &mut [f64], &[f64])]) -> Result<()> {
        let total: usize = blocks.iter().map(|(_, p, _)| p.len()).sum();
        if total != self.m.len() {
            return Err(Error::shape("adam_step", self.m.len(), total));
        }
        for (name, params, grads) in blocks.iter() {
            if params.len() != grads.len() {
                return Err(Error::shape(
                    format!("adam_step block {name}"),
                    params.len(),
                    grads.len(),
                ));
            }
            if grads.iter().any(|g| g.is_nan()) {
                return Err(Error::numeric(
                    format!("adam_step block {name}"),
                    "NaN gradient",
                ));
            }
        }

        self.t += 1;
        let t = self.t as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let mut offset = 0;
        for (_, params, grads) in blocks.iter_mut() {
            for (i, (p, &g)) in params.iter_mut().zip(grads.iter()).enumerate() {
                let m = &mut self.m[offset + i];
                let v = &mut self.v[offset + i];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += params.len();
        }
        Ok(())
    }

    /// Single-block convenience form.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_blocks(&mut [("params", params, grads)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut p = [1.0, -2.0, 0.5];
        state.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // g = 1 with bias correction gives an update of -lr/(1 + eps') ~ -lr.
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut p = [0.0];
        state.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-8, "got {}", p[0]);
    }

    #[test]
    fn constant_gradient_update_converges_to_lr() {
        let mut state = AdamState::new(1, AdamConfig::default());
        let mut p = [0.0];
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..50 {
            state.step(&mut p, &[1.0]).unwrap();
            delta = prev - p[0];
            prev = p[0];
        }
        assert!(
            (delta - 1e-3).abs() / 1e-3 < 0.01,
            "step size {delta} not within 1% of lr"
        );
    }

    #[test]
    fn nan_grad_names_block() {
        let mut state = AdamState::new(2, AdamConfig::default());
        let mut a = [0.0];
        let mut b = [0.0];
        let err = state
            .step_blocks(&mut [
                ("encoder.0.weights", &mut a, &[0.0]),
                ("decoder.1.bias", &mut b, &[f64::NAN]),
            ])
            .unwrap_err();
        assert!(err.to_string().contains("decoder.1.bias"));
        // nothing was applied
        assert_eq!(state.step_count(), 0);
        assert_eq!(a, [0.0]);
    }

    #[test]
    fn lr_zero_is_identity_on_params() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(2, cfg);
        let mut p = [3.0, -4.0];
        state.step(&mut p, &[1.0, -2.0]).unwrap();
        assert_eq!(p, [3.0, -4.0]);
    }
}
