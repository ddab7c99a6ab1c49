use serde::{Deserialize, Serialize};

use crate::mixer::{Gradients, MixerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning rate must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err("eps must be positive".into());
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Bias-corrected Adam update of a flat parameter vector.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], config: &AdamConfig) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
}

pub fn adam_step(
    params: &mut MixerParams,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
) {
    assert!(
        params.is_congruent(grads),
        "gradients do not match parameters"
    );
    state.update(&mut params.data, &grads.data, config);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.update(&mut p, &[0.0, 0.0], &AdamConfig::default());
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        s.update(&mut p, &[1.0], &cfg);
        let expected = -1e-3 / (1.0 + cfg.eps);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn updates_shrink_after_gradient_stops() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        s.update(&mut p, &[1.0], &cfg);
        let mut last = p[0];
        let mut prev_step = f64::INFINITY;
        for _ in 0..2 {
            s.update(&mut p, &[0.0], &cfg);
            let step = (p[0] - last).abs();
            assert!(step < prev_step && step > 0.0);
            prev_step = step;
            last = p[0];
        }
    }
}
