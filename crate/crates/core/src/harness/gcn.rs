//! Two-layer graph convolution baseline trained on the label loss alone.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{sigmoid, CsrMatrix, EngineError, Matrix, ParamVars, Parameters, SeededRng, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub input_dim: usize,
    pub hidden: usize,
}

/// `logits = Ã·relu(Ã·X·W₁ + b₁)·W₂ + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gcn {
    pub config: GcnConfig,
    pub params: Parameters,
}

fn glorot(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape matches")
}

impl Gcn {
    pub fn new(config: GcnConfig, rng: &mut SeededRng) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 {
            return Err(Error::Validation(format!(
                "gcn widths must be positive, got {config:?}"
            )));
        }
        let mut params = Parameters::new();
        params.insert("gcn.w1", glorot(rng, config.input_dim, config.hidden));
        params.insert("gcn.b1", Matrix::zeros(1, config.hidden));
        params.insert("gcn.w2", glorot(rng, config.hidden, 1));
        params.insert("gcn.b2", Matrix::zeros(1, 1));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: GcnConfig, params: Parameters) -> Result<Self> {
        let reference = Self::new(config, &mut SeededRng::new(0))?;
        let matches = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .all(|(name, m)| params.get(name).is_some_and(|p| p.shape() == m.shape()));
        if !matches {
            return Err(Error::Validation(
                "checkpoint does not match the gcn architecture".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        a_norm: &Arc<CsrMatrix>,
        x: &Matrix,
    ) -> Result<Var, EngineError> {
        let xv = tape.constant(x.clone());
        let xw = tape.matmul(xv, vars.get("gcn.w1")?)?;
        let ax = tape.spmm(a_norm.clone(), xw)?;
        let pre = tape.add_bias(ax, vars.get("gcn.b1")?)?;
        let h = tape.relu(pre)?;
        let hw = tape.matmul(h, vars.get("gcn.w2")?)?;
        let ah = tape.spmm(a_norm.clone(), hw)?;
        tape.add_bias(ah, vars.get("gcn.b2")?)
    }

    pub fn predict_proba(&self, a_norm: &Arc<CsrMatrix>, x: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let logits = self.forward_on(&mut tape, &vars, a_norm, x)?;
        Ok(tape.value(logits).as_slice().iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "baseline_gcn", "model": self.config })
    }
}
