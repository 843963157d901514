//! Loss terms: KL to a standard normal prior, masked cross-entropy,
//! InfoNCE between view codes and the weighted total.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, Matrix, Tape, Var};
use crate::{Error, Result};

use super::GaussianLatent;

/// Loss weights and contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_kl: f64,
    pub lambda_con: f64,
    pub tau: f64,
    /// Average both anchor directions of every InfoNCE pair.
    pub symmetrize_infonce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_kl: 1e-3,
            lambda_con: 1e-3,
            tau: 0.5,
            symmetrize_infonce: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0 && self.lambda_con >= 0.0) {
            return Err(Error::Validation("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Scalar loss components of one forward pass.
///
/// The label likelihood appears once, as `task`; its weight `gamma` is
/// fixed at 1 and recorded for reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub kl_feat: f64,
    pub kl_struct: f64,
    pub kl_diff: f64,
    pub con: f64,
    pub total: f64,
    pub lambda_kl: f64,
    pub lambda_con: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn kl_sum(&self) -> f64 {
        self.kl_feat + self.kl_struct + self.kl_diff
    }

    pub fn is_finite(&self) -> bool {
        [
            self.task,
            self.kl_feat,
            self.kl_struct,
            self.kl_diff,
            self.con,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} task={:.6} kl=[{:.6}, {:.6}, {:.6}] con={:.6}",
            self.total, self.task, self.kl_feat, self.kl_struct, self.kl_diff, self.con
        )
    }
}

/// `total = task + λ_KL·(kl_feat + kl_struct + kl_diff) + λ_con·con`.
pub fn total_loss(task: f64, kl: [f64; 3], con: f64, config: &LossConfig) -> LossBreakdown {
    let total = task + config.lambda_kl * (kl[0] + kl[1] + kl[2]) + config.lambda_con * con;
    LossBreakdown {
        task,
        kl_feat: kl[0],
        kl_struct: kl[1],
        kl_diff: kl[2],
        con,
        total,
        lambda_kl: config.lambda_kl,
        lambda_con: config.lambda_con,
        gamma: 1.0,
        tau: config.tau,
    }
}

/// Mean over nodes of `0.5·Σ_j (μ² + e^{logvar} − 1 − logvar)`.
pub fn kl_on(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var, EngineError> {
    let n = tape.shape(mu).0.max(1) as f64;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0)?;
    let total = tape.sum(c)?;
    tape.scale(total, 0.5 / n)
}

pub fn kl_standard_normal(latent: &GaussianLatent) -> Result<f64> {
    let mut tape = Tape::new();
    let mu = tape.constant(latent.mu.clone());
    let lv = tape.constant(latent.logvar.clone());
    let kl = kl_on(&mut tape, mu, lv)?;
    Ok(tape.scalar(kl))
}

fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Mean binary cross-entropy over the masked nodes.
pub fn task_loss_on(tape: &mut Tape, logits: Var, labels: &[f64], mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Validation("task loss mask selects no nodes".into()));
    }
    Ok(tape.bce_with_logits(logits, labels, &mask_weights(mask))?)
}

pub fn task_loss(logits: &[f64], labels: &[u8], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::column(logits));
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let l = task_loss_on(&mut tape, x, &y, mask)?;
    Ok(tape.scalar(l))
}

/// InfoNCE with anchors from `za` and candidates from `zb`:
/// mean over `i` of `−log softmax_j(sim(za_i, zb_j)/τ)[i]`.
pub fn infonce_on(tape: &mut Tape, za: Var, zb: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let sim = tape.cosine_sim(za, zb)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let log_probs = tape.log_softmax_rows(logits)?;
    let positives = tape.diag(log_probs)?;
    let mean = tape.mean(positives)?;
    Ok(tape.scale(mean, -1.0)?)
}

pub fn infonce_pair(za: &Matrix, zb: &Matrix, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(za.clone());
    let b = tape.constant(zb.clone());
    let l = infonce_on(&mut tape, a, b, tau)?;
    Ok(tape.scalar(l))
}

/// Mean of the pairwise InfoNCE terms over every pair of codes, in order
/// `(0,1), (0,2), (1,2)`. `None` with fewer than two codes.
pub fn consistency_on(tape: &mut Tape, codes: &[Var], tau: f64, symmetrize: bool) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for a in 0..codes.len() {
        for b in a + 1..codes.len() {
            let forward = infonce_on(tape, codes[a], codes[b], tau)?;
            let term = if symmetrize {
                let backward = infonce_on(tape, codes[b], codes[a], tau)?;
                let both = tape.add(forward, backward)?;
                tape.scale(both, 0.5)?
            } else {
                forward
            };
            terms.push(term);
        }
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)?))
}

pub fn consistency_loss(codes: &[&Matrix], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = codes.iter().map(|m| tape.constant((*m).clone())).collect();
    Ok(consistency_on(&mut tape, &vars, tau, false)?.map_or(0.0, |v| tape.scalar(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(mu: Vec<Vec<f64>>, logvar: Vec<Vec<f64>>) -> GaussianLatent {
        let mu = Matrix::from_rows(&mu);
        GaussianLatent {
            z: mu.clone(),
            mu,
            logvar: Matrix::from_rows(&logvar),
        }
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(
            kl_standard_normal(&latent(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]])).unwrap(),
            0.0
        );
        assert_eq!(
            kl_standard_normal(&latent(vec![vec![1.0]], vec![vec![0.0]])).unwrap(),
            0.5
        );
    }

    /// KL(N(μ,σ²) ‖ N(0,1)) by Simpson quadrature of p·(log p − log q).
    fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
        let sigma = (0.5 * logvar).exp();
        let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
        let steps = 20_000;
        let h = (hi - lo) / steps as f64;
        let integrand = |x: f64| {
            let log_p = -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let log_q = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
            log_p.exp() * (log_p - log_q)
        };
        let mut acc = integrand(lo) + integrand(hi);
        for k in 1..steps {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * integrand(lo + k as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn kl_matches_quadrature_in_one_dimension() {
        for (mu, lv) in [(0.3, -0.7), (-1.2, 0.4), (2.0, 1.1), (0.0, -2.0)] {
            let analytic = kl_standard_normal(&latent(vec![vec![mu]], vec![vec![lv]])).unwrap();
            let numeric = kl_quadrature(mu, lv);
            assert!((analytic - numeric).abs() < 1e-6, "{mu} {lv}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn task_loss_at_zero_logits_is_ln2() {
        let l = task_loss(&[0.0; 4], &[0, 1, 1, 0], &[true; 4]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn task_loss_saturates() {
        let l = task_loss(&[40.0, -40.0], &[1, 0], &[true, true]).unwrap();
        assert!(l < 1e-4);
    }

    #[test]
    fn task_loss_matches_direct_formula() {
        let logits: [f64; 5] = [0.3, -1.7, 2.2, 0.05, -0.4];
        let labels = [1u8, 0, 0, 1, 1];
        let mask = [true, true, false, true, true];
        let mut direct = 0.0;
        let mut count = 0.0;
        for i in 0..5 {
            if mask[i] {
                let p = 1.0 / (1.0 + (-logits[i]).exp());
                let y = f64::from(labels[i]);
                direct -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                count += 1.0;
            }
        }
        let l = task_loss(&logits, &labels, &mask).unwrap();
        assert!((l - direct / count).abs() < 1e-9);
    }

    #[test]
    fn task_loss_rejects_empty_mask() {
        assert!(task_loss(&[0.0], &[1], &[false]).is_err());
    }

    #[test]
    fn infonce_single_node_is_zero() {
        let z = Matrix::from_rows(&[vec![0.3, -0.2]]);
        assert_eq!(infonce_pair(&z, &z, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn infonce_orthonormal_pair() {
        let z = Matrix::identity(2);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((infonce_pair(&z, &z, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn infonce_uniform_similarity_is_log_n() {
        let z = Matrix::filled(5, 3, 0.7);
        assert!((infonce_pair(&z, &z, 0.2).unwrap() - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn infonce_rejects_non_positive_temperature() {
        let z = Matrix::identity(2);
        assert!(matches!(infonce_pair(&z, &z, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn consistency_of_identical_orthonormal_codes() {
        let z = Matrix::identity(2);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((consistency_loss(&[&z, &z, &z], 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn consistency_of_single_node_is_zero() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0]]);
        assert_eq!(consistency_loss(&[&z, &z, &z], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig {
            lambda_kl: 1.0,
            lambda_con: 1.0,
            ..LossConfig::default()
        };
        assert_eq!(total_loss(1.0, [1.0; 3], 1.0, &cfg).total, 5.0);
        let plain = LossConfig {
            lambda_kl: 0.0,
            lambda_con: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(total_loss(0.7, [3.0, 2.0, 1.0], 4.0, &plain).total, 0.7);
    }
}
