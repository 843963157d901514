use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EngineError, Matrix, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            states: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Applies one bias-corrected Adam update. Every gradient is validated
    /// before any parameter changes, so a non-finite gradient leaves both the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut Parameters, grads: &BTreeMap<String, Matrix>) -> Result<(), EngineError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| EngineError::UnknownParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(EngineError::Dimension {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            if !g.is_finite() {
                return Err(EngineError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let state = self.states.entry(name.clone()).or_insert_with(|| AdamState {
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
            });
            let values = p.as_mut_slice();
            let m = state.m.as_mut_slice();
            let v = state.v.as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(value: f64) -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", Matrix::filled(1, 1, value));
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Matrix> {
        BTreeMap::from([("w".to_string(), Matrix::filled(1, 1, value))])
    }

    /// Straight transcription of the textbook update for a scalar.
    fn reference_adam(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
        let mut out = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = scalar_params(1.5);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p, &grad(1.0)).unwrap();
        let before = p.get("w").unwrap().clone();
        let m_before = adam.state("w").unwrap().m.as_slice()[0];
        let v_before = adam.state("w").unwrap().v.as_slice()[0];
        let mut q = Parameters::new();
        q.insert("w", Matrix::filled(1, 1, 2.0));
        let mut fresh = Adam::new(AdamConfig::with_lr(0.1));
        fresh.step(&mut q, &grad(0.0)).unwrap();
        assert_eq!(q.get("w").unwrap().as_slice(), &[2.0]);

        adam.step(&mut p, &grad(0.0)).unwrap();
        let s = adam.state("w").unwrap();
        assert!((s.m.as_slice()[0] - 0.9 * m_before).abs() < 1e-15);
        assert!((s.v.as_slice()[0] - 0.999 * v_before).abs() < 1e-15);
        // Momentum still moves the parameter even with a zero gradient.
        assert!(p.get("w").unwrap().as_slice()[0] < before.as_slice()[0]);
    }

    #[test]
    fn constant_unit_gradient_matches_reference_for_three_steps() {
        let mut p = scalar_params(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let expected = reference_adam(&[1.0, 1.0, 1.0], 0.1);
        for e in expected {
            adam.step(&mut p, &grad(1.0)).unwrap();
            assert!((p.get("w").unwrap().as_slice()[0] - e).abs() < 1e-15);
        }
        assert!((expected_first_step() + 0.1).abs() < 1e-6);
    }

    fn expected_first_step() -> f64 {
        reference_adam(&[1.0], 0.1)[0]
    }

    #[test]
    fn identical_params_follow_identical_trajectories() {
        let mut p = Parameters::new();
        p.insert("a", Matrix::filled(2, 2, 0.3));
        p.insert("b", Matrix::filled(2, 2, 0.3));
        let mut adam = Adam::new(AdamConfig::default());
        for k in 0..5 {
            let g = Matrix::filled(2, 2, 0.1 * k as f64 - 0.2);
            let grads = BTreeMap::from([("a".to_string(), g.clone()), ("b".to_string(), g)]);
            adam.step(&mut p, &grads).unwrap();
        }
        assert_eq!(p.get("a"), p.get("b"));
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = scalar_params(1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut p, &grad(f64::NAN)).unwrap_err();
        assert!(matches!(err, EngineError::NonFiniteGradient(_)));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p.get("w").unwrap().as_slice(), &[1.0]);
    }
}
