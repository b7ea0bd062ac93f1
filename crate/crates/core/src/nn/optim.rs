use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

/// Hyperparameters. For RMSProp `beta2` is the squared-gradient decay and
/// `beta1` is unused.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::RmsProp,
            learning_rate,
            beta1: 0.9,
            beta2: None,
            epsilon: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: None,
            epsilon: 1e-8,
        }
    }

    /// Second-moment decay: RMSProp's rho (default 0.9) or Adam's beta2
    /// (default 0.999).
    pub fn second_moment_decay(&self) -> f64 {
        self.beta2.unwrap_or(match self.kind {
            OptimizerKind::RmsProp => 0.9,
            OptimizerKind::Adam => 0.999,
        })
    }

    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it turns training into a no-op
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.second_moment_decay())] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        let first = match config.kind {
            OptimizerKind::Adam => vec![0.0; param_count],
            OptimizerKind::RmsProp => Vec::new(),
        };
        Ok(Self {
            config,
            first_moment: first,
            second_moment: vec![0.0; param_count],
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn param_count(&self) -> usize {
        self.second_moment.len()
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn reset(&mut self) {
        self.first_moment.iter_mut().for_each(|v| *v = 0.0);
        self.second_moment.iter_mut().for_each(|v| *v = 0.0);
        self.step_count = 0;
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.second_moment.len() {
            return Err(Error::shape(format!(
                "optimizer step over {} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.second_moment.len()
            )));
        }
        let lr = self.config.learning_rate;
        let eps = self.config.epsilon;
        let rho = self.config.second_moment_decay();
        self.step_count += 1;
        match self.config.kind {
            OptimizerKind::RmsProp => {
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.second_moment) {
                    *v = rho * *v + (1.0 - rho) * g * g;
                    *p -= lr * g / (v.sqrt() + eps);
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.config.beta1;
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - rho.powi(t);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = rho * *v + (1.0 - rho) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::rmsprop(1e-3), OptimizerConfig::adam(1e-3)] {
            let mut st = OptimizerState::new(cfg, 3).unwrap();
            let mut p = vec![0.5, -1.0, 2.0];
            st.step(&mut p, &[0.0; 3]).unwrap();
            assert_eq!(p, vec![0.5, -1.0, 2.0]);
            assert_eq!(st.step_count(), 1);
        }
    }

    #[test]
    fn adam_first_step_by_hand() {
        let lr = 1e-3;
        let mut st = OptimizerState::new(OptimizerConfig::adam(lr), 3).unwrap();
        let g = [0.2, -4.0, 1e-3];
        let mut p = vec![0.0; 3];
        st.step(&mut p, &g).unwrap();
        for i in 0..3 {
            // m = 0.1 g, v = 0.001 g^2; corrected m_hat = g, v_hat = g^2
            let m_hat = (0.1 * g[i]) / (1.0 - 0.9);
            let v_hat = (0.001 * g[i] * g[i]) / (1.0 - 0.999);
            let expected = -lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p[i] - expected).abs() < 1e-15, "{i}: {} vs {expected}", p[i]);
            // magnitude is lr with the gradient's sign
            assert!((p[i] + lr * g[i].signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn rmsprop_two_steps_by_hand() {
        let lr = 0.01;
        let g = 0.5;
        let mut st = OptimizerState::new(OptimizerConfig::rmsprop(lr), 1).unwrap();
        let mut p = vec![1.0];
        st.step(&mut p, &[g]).unwrap();
        let v1 = (1.0 - 0.9) * g * g;
        let s1 = lr * g / (v1.sqrt() + 1e-8);
        assert!((p[0] - (1.0 - s1)).abs() < 1e-15);
        st.step(&mut p, &[g]).unwrap();
        let v2 = 0.9 * v1 + (1.0 - 0.9) * g * g;
        let s2 = lr * g / (v2.sqrt() + 1e-8);
        assert!((p[0] - (1.0 - s1 - s2)).abs() < 1e-15);
        assert!(v2 > v1);
        assert!(s2 < s1);
        assert!((st.second_moment()[0] - v2).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerState::new(OptimizerConfig::adam(-1.0), 1).is_err());
        let mut c = OptimizerConfig::adam(1e-3);
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        let mut st = OptimizerState::new(OptimizerConfig::adam(1e-3), 2).unwrap();
        assert!(st.step(&mut [0.0; 2], &[0.0; 3]).is_err());
    }
}
