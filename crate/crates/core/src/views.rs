//! Feature, structural and diffusion views of an attributed graph.
//!
//! The diffusion view reweights node features by inverse propensity of
//! sensitive-group membership before a truncated personalized-PageRank
//! propagation over the normalized adjacency.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{sigmoid, CsrMatrix, Matrix};
use crate::graph::{normalize_adjacency, GraphDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Predictions are clipped to `[clip, 1 − clip]`.
    pub clip: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 500,
            clip: 0.05,
        }
    }
}

/// Logistic model of `P(s = 1 | x)` on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub clip: f64,
}

impl PropensityModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.bias
            + x.iter()
                .zip(&self.weights)
                .zip(self.center.iter().zip(&self.scale))
                .map(|((&xi, &w), (&c, &s))| w * (xi - c) / s)
                .sum::<f64>();
        sigmoid(z).clamp(self.clip, 1.0 - self.clip)
    }
}

/// Fits the propensity model by full-batch gradient descent on the rows
/// selected by `fit_rows` (all rows when none are selected) and returns the
/// clipped score for every node.
pub fn estimate_propensity(
    x: &Matrix,
    s: &[u8],
    fit_rows: &[bool],
    config: &PropensityConfig,
) -> Result<(PropensityModel, Vec<f64>)> {
    if !(config.clip > 0.0 && config.clip < 0.5) {
        return Err(Error::Validation(format!(
            "propensity clip {} must lie in (0, 0.5)",
            config.clip
        )));
    }
    if s.len() != x.rows() || fit_rows.len() != x.rows() {
        return Err(Error::Validation("propensity inputs disagree on node count".into()));
    }
    if !x.is_finite() {
        return Err(Error::Validation(
            "propensity features contain non-finite values".into(),
        ));
    }
    let mut rows: Vec<usize> = (0..x.rows()).filter(|&i| fit_rows[i]).collect();
    if rows.is_empty() {
        rows = (0..x.rows()).collect();
    }
    let d = x.cols();
    let count = rows.len() as f64;

    let mut center = vec![0.0; d];
    for &i in &rows {
        for (c, v) in center.iter_mut().zip(x.row(i)) {
            *c += v / count;
        }
    }
    let mut scale = vec![0.0; d];
    for &i in &rows {
        for ((sc, v), c) in scale.iter_mut().zip(x.row(i)).zip(&center) {
            *sc += (v - c) * (v - c) / count;
        }
    }
    for sc in &mut scale {
        *sc = if *sc > 1e-12 { sc.sqrt() } else { 1.0 };
    }

    let mean_s = rows.iter().map(|&i| f64::from(s[i])).sum::<f64>() / count;
    let mut model = PropensityModel {
        weights: vec![0.0; d],
        bias: 0.0,
        center,
        scale,
        clip: config.clip,
    };
    if mean_s == 0.0 || mean_s == 1.0 {
        log::warn!("sensitive attribute is constant on the fitting rows; using a constant propensity");
        let e = mean_s.clamp(config.clip, 1.0 - config.clip);
        model.bias = (e / (1.0 - e)).ln();
        return Ok((model, vec![e; x.rows()]));
    }

    let standardized: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            x.row(i)
                .iter()
                .zip(model.center.iter().zip(&model.scale))
                .map(|(&v, (&c, &sc))| (v - c) / sc)
                .collect()
        })
        .collect();
    for _ in 0..config.epochs {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (z, &i) in standardized.iter().zip(&rows) {
            let logit = model.bias + z.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>();
            let r = sigmoid(logit) - f64::from(s[i]);
            gb += r / count;
            for (g, zj) in gw.iter_mut().zip(z) {
                *g += r * zj / count;
            }
        }
        model.bias -= config.lr * gb;
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.lr * g;
        }
    }
    let e = (0..x.rows()).map(|i| model.predict(x.row(i))).collect();
    Ok((model, e))
}

/// `w_i = s_i / e_i + (1 − s_i) / (1 − e_i)`.
pub fn ipw_weights(e: &[f64], s: &[u8]) -> Result<Vec<f64>> {
    if e.len() != s.len() {
        return Err(Error::Validation(
            "propensity and sensitive vectors differ in length".into(),
        ));
    }
    e.iter()
        .zip(s)
        .enumerate()
        .map(|(i, (&ei, &si))| {
            if !(ei > 0.0 && ei < 1.0) {
                return Err(Error::Domain(format!("propensity e({i}) = {ei} is outside (0, 1)")));
            }
            let si = f64::from(si);
            Ok(si / ei + (1.0 - si) / (1.0 - ei))
        })
        .collect()
}

/// Scales row `i` of `x` by `w[i]`.
pub fn debias_features(x: &Matrix, w: &[f64]) -> Result<Matrix> {
    if w.len() != x.rows() {
        return Err(Error::Validation(format!(
            "{} weights for a matrix with {} rows",
            w.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        for v in out.row_mut(i) {
            *v *= wi;
        }
    }
    Ok(out)
}

/// Truncated personalized-PageRank propagation:
/// `H⁰ = X′`, `Hᵏ⁺¹ = (1 − α)·Ã·Hᵏ + α·X′`, returning `Hᴷ`.
pub fn diffuse(a_norm: &CsrMatrix, x: &Matrix, alpha: f64, hops: usize) -> Result<Matrix> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Validation(format!(
            "teleport probability {alpha} must lie in (0, 1]"
        )));
    }
    if hops == 0 {
        return Err(Error::Validation("diffusion needs at least one hop".into()));
    }
    let mut h = x.clone();
    for _ in 0..hops {
        let propagated = a_norm.spmm(&h)?;
        h = propagated.zip_map(x, |p, x0| (1.0 - alpha) * p + alpha * x0);
    }
    Ok(h)
}

/// Propagation operator of a view.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Identity,
    Propagate(Arc<CsrMatrix>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub operator: Operator,
    pub features: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpwMode {
    Estimated,
    /// Every weight forced to 1.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub alpha: f64,
    pub hops: usize,
    pub propensity: PropensityConfig,
    pub scrub_sensitive: bool,
    pub ipw: IpwMode,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            hops: 3,
            propensity: PropensityConfig::default(),
            scrub_sensitive: true,
            ipw: IpwMode::Estimated,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub feature: View,
    pub structural: View,
    pub diffusion: View,
    pub alpha: f64,
    pub hops: usize,
    pub propensity: Option<PropensityModel>,
    pub ipw_weights: Vec<f64>,
}

impl ViewBundle {
    pub fn n(&self) -> usize {
        self.feature.features.rows()
    }

    pub fn d(&self) -> usize {
        self.feature.features.cols()
    }

    /// Writes each view's feature matrix (and the IPW weights) as CSV.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [
            ("feature", &self.feature.features),
            ("structural", &self.structural.features),
            ("diffusion", &self.diffusion.features),
        ] {
            write_matrix_csv(&dir.join(format!("{name}_view.csv")), m)?;
        }
        write_matrix_csv(&dir.join("ipw_weights.csv"), &Matrix::column(&self.ipw_weights))
    }
}

fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut text = String::new();
    text.push_str(&(0..m.cols()).map(|j| format!("c{j}")).collect::<Vec<_>>().join(","));
    text.push('\n');
    for i in 0..m.rows() {
        text.push_str(&m.row(i).iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Assembles the three views. The feature view keeps the (scrubbed) raw
/// features; only the diffusion view is reweighted.
pub fn build_views(g: &GraphDataset, config: &ViewConfig) -> Result<ViewBundle> {
    let x = if config.scrub_sensitive {
        g.scrubbed_features()
    } else {
        g.features().clone()
    };
    if x.cols() == 0 {
        return Err(Error::Validation("no feature columns remain after scrubbing".into()));
    }
    let a_norm = Arc::new(normalize_adjacency(g));
    let (propensity, weights) = match config.ipw {
        IpwMode::Estimated => {
            let (model, e) = estimate_propensity(&x, g.sensitive(), &g.masks().train, &config.propensity)?;
            (Some(model), ipw_weights(&e, g.sensitive())?)
        }
        IpwMode::Uniform => (None, vec![1.0; g.n()]),
    };
    let x_prime = debias_features(&x, &weights)?;
    let x_diff = diffuse(&a_norm, &x_prime, config.alpha, config.hops)?;
    Ok(ViewBundle {
        structural: View {
            operator: Operator::Propagate(a_norm),
            features: Matrix::filled(x.rows(), x.cols(), 1.0),
        },
        feature: View {
            operator: Operator::Identity,
            features: x,
        },
        diffusion: View {
            operator: Operator::Identity,
            features: x_diff,
        },
        alpha: config.alpha,
        hops: config.hops,
        propensity,
        ipw_weights: weights,
    })
}
