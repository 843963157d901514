//! Stochastic-block-model graphs over the four `(sensitive, label)` cells.

use serde::{Deserialize, Serialize};

use super::GraphDataset;
use crate::engine::{Matrix, SeededRng};
use crate::{Error, Result};

/// Generator settings. Cells are ordered `(s=0,y=0), (s=0,y=1), (s=1,y=0),
/// (s=1,y=1)`. Each of the `dim − 1` Gaussian feature columns has mean
/// `class_shift·y + group_shift·s` and standard deviation `noise`; the
/// sensitive attribute is appended as the last column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub cell_sizes: [usize; 4],
    pub p_intra: f64,
    pub p_cross: f64,
    pub dim: usize,
    pub class_shift: f64,
    pub group_shift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// A 400-node graph whose group shift mimics the class signal, so a
    /// sensitive-blind classifier over-predicts positives for `s = 1`.
    fn default() -> Self {
        Self {
            cell_sizes: [100, 100, 100, 100],
            p_intra: 0.05,
            p_cross: 0.005,
            dim: 8,
            class_shift: 1.0,
            group_shift: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cell_sizes.contains(&0) {
            return Err(Error::Validation(format!(
                "every cell needs at least one node, got {:?}",
                self.cell_sizes
            )));
        }
        for (name, p) in [("p_intra", self.p_intra), ("p_cross", self.p_cross)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} = {p} is not a probability")));
            }
        }
        if self.dim < 2 {
            return Err(Error::Validation(format!("dim must be at least 2, got {}", self.dim)));
        }
        if !(self.noise >= 0.0 && self.class_shift.is_finite() && self.group_shift.is_finite()) {
            return Err(Error::Validation("shifts must be finite and noise non-negative".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.cell_sizes.iter().sum()
    }
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<GraphDataset> {
    spec.validate()?;
    let n = spec.n();
    let mut rng = SeededRng::new(spec.seed);
    let mut sensitive = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (cell, &size) in spec.cell_sizes.iter().enumerate() {
        sensitive.extend(std::iter::repeat_n((cell / 2) as u8, size));
        labels.extend(std::iter::repeat_n((cell % 2) as u8, size));
    }

    let d = spec.dim;
    let mut features = Matrix::zeros(n, d);
    for i in 0..n {
        let mean = spec.class_shift * f64::from(labels[i]) + spec.group_shift * f64::from(sensitive[i]);
        let row = features.row_mut(i);
        for v in row[..d - 1].iter_mut() {
            *v = mean + spec.noise * rng.normal();
        }
        row[d - 1] = f64::from(sensitive[i]);
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let same_cell = sensitive[i] == sensitive[j] && labels[i] == labels[j];
            let p = if same_cell { spec.p_intra } else { spec.p_cross };
            if rng.uniform() < p {
                edges.push((i, j));
            }
        }
    }

    let g = GraphDataset::from_edges(features, sensitive, labels, &edges, Some(d - 1))?;
    let mut names: Vec<String> = (0..d - 1).map(|j| format!("x{j}")).collect();
    names.push("s_feature".into());
    g.with_feature_names(names)
}
