//! Per-view variational encoders, additive fusion through a projector MLP,
//! and a decoder conditioned on the sensitive attribute.

mod loss;

pub use loss::{
    consistency_loss, consistency_on, infonce_on, infonce_pair, kl_on, kl_standard_normal, task_loss, task_loss_on,
    total_loss, LossBreakdown, LossConfig,
};

use serde::{Deserialize, Serialize};

use crate::engine::{
    check_gradients, sigmoid, CsrMatrix, EngineError, GradCheckReport, Matrix, ParamVars, Parameters, SeededRng, Tape,
    Var,
};
use crate::views::{Operator, View, ViewBundle};
use crate::{Error, Result};

/// Encoder log-variance is clamped to this symmetric range.
pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Feature,
    Structural,
    Diffusion,
}

impl ViewKind {
    pub const ALL: [ViewKind; 3] = [ViewKind::Feature, ViewKind::Structural, ViewKind::Diffusion];

    pub fn key(self) -> &'static str {
        match self {
            ViewKind::Feature => "feat",
            ViewKind::Structural => "struct",
            ViewKind::Diffusion => "diff",
        }
    }

    pub fn slot(self) -> usize {
        match self {
            ViewKind::Feature => 0,
            ViewKind::Structural => 1,
            ViewKind::Diffusion => 2,
        }
    }

    pub fn of(self, bundle: &ViewBundle) -> &View {
        match self {
            ViewKind::Feature => &bundle.feature,
            ViewKind::Structural => &bundle.structural,
            ViewKind::Diffusion => &bundle.diffusion,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub proj_hidden: usize,
    pub dec_hidden: usize,
    /// Enabled views, in canonical order.
    pub views: Vec<ViewKind>,
    /// Concatenate `S` to the decoder input.
    pub condition_on_sensitive: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 16,
            latent: 16,
            proj_hidden: 16,
            dec_hidden: 16,
            views: ViewKind::ALL.to_vec(),
            condition_on_sensitive: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Validation("at least one view must be enabled".into()));
        }
        let widths = [
            self.input_dim,
            self.hidden,
            self.latent,
            self.proj_hidden,
            self.dec_hidden,
        ];
        if widths.contains(&0) {
            return Err(Error::Validation(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        Ok(())
    }

    fn decoder_input(&self) -> usize {
        self.latent + usize::from(self.condition_on_sensitive)
    }
}

/// Tape handles of one view's encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub w1: Var,
    pub b1: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_logvar: Var,
    pub b_logvar: Var,
}

impl EncoderParams {
    pub fn bind(vars: &ParamVars, view: ViewKind) -> Result<Self, EngineError> {
        let p = |name: &str| vars.get(&format!("enc.{}.{name}", view.key()));
        Ok(Self {
            w1: p("w1")?,
            b1: p("b1")?,
            w_mu: p("w_mu")?,
            b_mu: p("b_mu")?,
            w_logvar: p("w_logvar")?,
            b_logvar: p("b_logvar")?,
        })
    }
}

/// Tape handles of the fusion projector (`d′ → h_p → d′`).
#[derive(Debug, Clone, Copy)]
pub struct ProjectorParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ProjectorParams {
    pub fn bind(vars: &ParamVars) -> Result<Self, EngineError> {
        Ok(Self {
            w1: vars.get("proj.w1")?,
            b1: vars.get("proj.b1")?,
            w2: vars.get("proj.w2")?,
            b2: vars.get("proj.b2")?,
        })
    }
}

/// Tape handles of the decoder (`d′ [+1] → h → 1`).
#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DecoderParams {
    pub fn bind(vars: &ParamVars) -> Result<Self, EngineError> {
        Ok(Self {
            w1: vars.get("dec.w1")?,
            b1: vars.get("dec.b1")?,
            w2: vars.get("dec.w2")?,
            b2: vars.get("dec.b2")?,
        })
    }
}

/// Per-view posterior parameters and code, as values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Matrix,
    pub logvar: Matrix,
    pub z: Matrix,
}

/// Per-view posterior parameters and code, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

impl LatentVars {
    pub fn values(&self, tape: &Tape) -> GaussianLatent {
        GaussianLatent {
            mu: tape.value(self.mu).clone(),
            logvar: tape.value(self.logvar).clone(),
            z: tape.value(self.z).clone(),
        }
    }
}

/// `μ + exp(½·logvar) ⊙ ε`; `ε` is a constant, so no gradient reaches it.
pub fn reparameterize_on(tape: &mut Tape, mu: Var, logvar: Var, eps: &Matrix) -> Result<Var, EngineError> {
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let noise = tape.constant(eps.clone());
    let spread = tape.mul(sigma, noise)?;
    tape.add(mu, spread)
}

pub fn reparameterize(mu: &Matrix, logvar: &Matrix, eps: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let m = tape.constant(mu.clone());
    let l = tape.constant(logvar.clone());
    let z = reparameterize_on(&mut tape, m, l, eps)?;
    Ok(tape.value(z).clone())
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, EngineError> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// `H = relu(op·X·W₁ + b₁)`, `μ = H·W_μ + b_μ`,
/// `logvar = clamp(H·W_logσ + b_logσ)`, `z = μ + σ⊙ε` (or `μ` without noise).
pub fn encode_view_on(
    tape: &mut Tape,
    view: &View,
    enc: &EncoderParams,
    eps: Option<&Matrix>,
) -> Result<LatentVars, EngineError> {
    let x = tape.constant(view.features.clone());
    let xw = tape.matmul(x, enc.w1)?;
    let propagated = match &view.operator {
        Operator::Identity => xw,
        Operator::Propagate(a) => tape.spmm(a.clone(), xw)?,
    };
    let pre = tape.add_bias(propagated, enc.b1)?;
    let h = tape.relu(pre)?;
    let mu = linear(tape, h, enc.w_mu, enc.b_mu)?;
    let raw_logvar = linear(tape, h, enc.w_logvar, enc.b_logvar)?;
    let logvar = tape.clamp(raw_logvar, -LOGVAR_BOUND, LOGVAR_BOUND)?;
    let z = match eps {
        Some(eps) => reparameterize_on(tape, mu, logvar, eps)?,
        None => mu,
    };
    Ok(LatentVars { mu, logvar, z })
}

/// `Projector(Σ codes)`: a one-hidden-layer relu MLP over the summed codes.
pub fn fuse_project_on(tape: &mut Tape, codes: &[Var], proj: &ProjectorParams) -> Result<Var, EngineError> {
    let (&first, rest) = codes
        .split_first()
        .ok_or(EngineError::EmptySelection { op: "fuse_project" })?;
    let mut fused = first;
    for &c in rest {
        fused = tape.add(fused, c)?;
    }
    let pre = linear(tape, fused, proj.w1, proj.b1)?;
    let h = tape.relu(pre)?;
    linear(tape, h, proj.w2, proj.b2)
}

/// Decoder logits (n×1) from `[Z_proj ∥ S]`, or `Z_proj` alone when
/// `sensitive` is `None`.
pub fn decode_on(
    tape: &mut Tape,
    z_proj: Var,
    sensitive: Option<&[f64]>,
    dec: &DecoderParams,
) -> Result<Var, EngineError> {
    let input = match sensitive {
        Some(s) => {
            let col = tape.constant(Matrix::column(s));
            tape.concat_cols(z_proj, col)?
        }
        None => z_proj,
    };
    let pre = linear(tape, input, dec.w1, dec.b1)?;
    let h = tape.relu(pre)?;
    linear(tape, h, dec.w2, dec.b2)
}

/// Where encoder noise comes from in a forward pass.
pub enum Noise<'a> {
    /// Draw a fresh `ε` per enabled view, in canonical view order.
    Sample(&'a mut SeededRng),
    /// One fixed `ε` per enabled view.
    Fixed(&'a [Matrix]),
    /// Deterministic pass with `z = μ`.
    Mean,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub latents: Vec<(ViewKind, LatentVars)>,
    pub z_proj: Var,
}

/// How `S` is fed to the decoder at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitiveInput {
    /// The node's observed attribute.
    #[default]
    Observed,
    /// The training-set mean of `S` for every node.
    Neutral,
}

/// Model parameters together with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct FairMib {
    pub config: ModelConfig,
    pub params: Parameters,
}

fn glorot(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape matches")
}

impl FairMib {
    /// Glorot-uniform weights and zero biases, drawn in a fixed order.
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::new();
        for &view in &config.views {
            let k = view.key();
            params.insert(format!("enc.{k}.w1"), glorot(rng, config.input_dim, config.hidden));
            params.insert(format!("enc.{k}.b1"), Matrix::zeros(1, config.hidden));
            params.insert(format!("enc.{k}.w_mu"), glorot(rng, config.hidden, config.latent));
            params.insert(format!("enc.{k}.b_mu"), Matrix::zeros(1, config.latent));
            params.insert(format!("enc.{k}.w_logvar"), glorot(rng, config.hidden, config.latent));
            params.insert(format!("enc.{k}.b_logvar"), Matrix::zeros(1, config.latent));
        }
        params.insert("proj.w1", glorot(rng, config.latent, config.proj_hidden));
        params.insert("proj.b1", Matrix::zeros(1, config.proj_hidden));
        params.insert("proj.w2", glorot(rng, config.proj_hidden, config.latent));
        params.insert("proj.b2", Matrix::zeros(1, config.latent));
        params.insert("dec.w1", glorot(rng, config.decoder_input(), config.dec_hidden));
        params.insert("dec.b1", Matrix::zeros(1, config.dec_hidden));
        params.insert("dec.w2", glorot(rng, config.dec_hidden, 1));
        params.insert("dec.b2", Matrix::zeros(1, 1));
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), &mut SeededRng::new(0))?;
        for (name, m) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == m.shape() => {}
                Some(p) => {
                    return Err(Error::Validation(format!(
                        "parameter `{name}` has shape {:?}, architecture expects {:?}",
                        p.shape(),
                        m.shape()
                    )))
                }
                None => return Err(Error::Validation(format!("checkpoint lacks parameter `{name}`"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Validation(
                "checkpoint has parameters the architecture does not use".into(),
            ));
        }
        Ok(Self { config, params })
    }

    /// Full forward pass: encode every enabled view, fuse, decode.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        bundle: &ViewBundle,
        sensitive: &[f64],
        noise: Noise<'_>,
    ) -> Result<ForwardOutput> {
        if bundle.d() != self.config.input_dim {
            return Err(Error::Engine(EngineError::Dimension {
                op: "forward_pass",
                left: (bundle.n(), bundle.d()),
                right: (bundle.n(), self.config.input_dim),
            }));
        }
        if sensitive.len() != bundle.n() {
            return Err(Error::Validation(
                "sensitive vector length differs from node count".into(),
            ));
        }
        let mut noise = noise;
        if let Noise::Fixed(eps) = &noise {
            if eps.len() != self.config.views.len() {
                return Err(Error::Validation(format!(
                    "{} noise matrices for {} views",
                    eps.len(),
                    self.config.views.len()
                )));
            }
        }
        let mut latents = Vec::with_capacity(self.config.views.len());
        for (k, &view) in self.config.views.iter().enumerate() {
            let enc = EncoderParams::bind(vars, view)?;
            let sampled;
            let eps = match &mut noise {
                Noise::Sample(rng) => {
                    sampled = rng.normal_matrix(bundle.n(), self.config.latent);
                    Some(&sampled)
                }
                Noise::Fixed(eps) => Some(&eps[k]),
                Noise::Mean => None,
            };
            latents.push((view, encode_view_on(tape, view.of(bundle), &enc, eps)?));
        }
        let codes: Vec<Var> = latents.iter().map(|(_, l)| l.z).collect();
        let z_proj = fuse_project_on(tape, &codes, &ProjectorParams::bind(vars)?)?;
        let s = self.config.condition_on_sensitive.then_some(sensitive);
        let logits = decode_on(tape, z_proj, s, &DecoderParams::bind(vars)?)?;
        Ok(ForwardOutput {
            logits,
            latents,
            z_proj,
        })
    }

    /// Deterministic (`z = μ`) positive-class probabilities.
    pub fn predict_proba(&self, bundle: &ViewBundle, sensitive: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let out = self.forward_on(&mut tape, &vars, bundle, sensitive, Noise::Mean)?;
        Ok(tape.value(out.logits).as_slice().iter().map(|&x| sigmoid(x)).collect())
    }

    /// Decoder logits for a given `Z_proj`, bypassing the encoders.
    pub fn decode(&self, z_proj: &Matrix, sensitive: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let z = tape.constant(z_proj.clone());
        let s = self.config.condition_on_sensitive.then_some(sensitive);
        let logits = decode_on(&mut tape, z, s, &DecoderParams::bind(&vars)?)?;
        Ok(tape.value(logits).as_slice().to_vec())
    }

    /// Encodes one view with this model's parameters.
    pub fn encode_view(&self, view: ViewKind, bundle: &ViewBundle, eps: Option<&Matrix>) -> Result<GaussianLatent> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let enc = EncoderParams::bind(&vars, view)?;
        Ok(encode_view_on(&mut tape, view.of(bundle), &enc, eps)?.values(&tape))
    }

    /// `Projector(z₁ + z₂ + …)` with this model's parameters.
    pub fn fuse_project(&self, codes: &[&Matrix]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let vs: Vec<Var> = codes.iter().map(|m| tape.constant((*m).clone())).collect();
        let z = fuse_project_on(&mut tape, &vs, &ProjectorParams::bind(&vars)?)?;
        Ok(tape.value(z).clone())
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "fairmib", "model": self.config })
    }
}

/// Builds the total loss on `tape` for one forward pass. Task loss is taken
/// over `mask`; KL and consistency terms cover every node.
pub fn loss_on(
    tape: &mut Tape,
    out: &ForwardOutput,
    labels: &[f64],
    mask: &[bool],
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    config.validate()?;
    let task = task_loss_on(tape, out.logits, labels, mask)?;
    let mut kl_vals = [0.0; 3];
    let mut total = task;
    let mut kl_sum: Option<Var> = None;
    for (view, lat) in &out.latents {
        let kl = kl_on(tape, lat.mu, lat.logvar)?;
        kl_vals[view.slot()] = tape.scalar(kl);
        kl_sum = Some(match kl_sum {
            Some(acc) => tape.add(acc, kl)?,
            None => kl,
        });
    }
    if let Some(kl) = kl_sum {
        let weighted = tape.scale(kl, config.lambda_kl)?;
        total = tape.add(total, weighted)?;
    }
    let codes: Vec<Var> = out.latents.iter().map(|(_, l)| l.z).collect();
    let mut con_val = 0.0;
    if let Some(con) = consistency_on(tape, &codes, config.tau, config.symmetrize_infonce)? {
        con_val = tape.scalar(con);
        let weighted = tape.scale(con, config.lambda_con)?;
        total = tape.add(total, weighted)?;
    }
    let mut breakdown = total_loss(tape.scalar(task), kl_vals, con_val, config);
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

/// Small random graph for gradient checks: `n` nodes on a ring plus chords.
fn gradcheck_bundle(n: usize, d: usize, rng: &mut SeededRng) -> ViewBundle {
    let mut triplets = Vec::new();
    let mut degree = vec![1.0; n];
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n));
    }
    edges.push((0, n / 2));
    for &(u, v) in &edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    for i in 0..n {
        triplets.push((i, i, 1.0 / degree[i]));
    }
    for &(u, v) in &edges {
        let w = 1.0 / (degree[u] * degree[v] as f64).sqrt();
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    let a = std::sync::Arc::new(CsrMatrix::from_triplets(n, n, triplets));
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).expect("shape");
    let x_diff = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).expect("shape");
    ViewBundle {
        feature: View {
            operator: Operator::Identity,
            features: x,
        },
        structural: View {
            operator: Operator::Propagate(a),
            features: Matrix::filled(n, d, 1.0),
        },
        diffusion: View {
            operator: Operator::Identity,
            features: x_diff,
        },
        alpha: 0.1,
        hops: 3,
        propensity: None,
        ipw_weights: vec![1.0; n],
    }
}

const GRADCHECK_DRAWS: usize = 50;
const GRADCHECK_MARGIN: f64 = 1e-2;

/// Finite-difference check of every parameter gradient of the total loss on
/// an n=6, d=3, d′=2 instance with fixed noise.
pub fn gradcheck_model(seed: u64, h: f64) -> Result<GradCheckReport> {
    let (n, d, latent) = (6, 3, 2);
    let mut rng = SeededRng::new(seed);
    let bundle = gradcheck_bundle(n, d, &mut rng);
    let config = ModelConfig {
        input_dim: d,
        hidden: 4,
        latent,
        proj_hidden: 3,
        dec_hidden: 3,
        views: ViewKind::ALL.to_vec(),
        condition_on_sensitive: true,
    };
    let base = FairMib::new(config, &mut rng)?;
    let eps: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(n, latent)).collect();
    let s: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let y: Vec<f64> = (0..n).map(|i| ((i / 2) % 2) as f64).collect();
    let mask = vec![true, true, false, true, true, true];
    let loss_cfg = LossConfig {
        lambda_kl: 0.5,
        lambda_con: 0.7,
        tau: 0.5,
        symmetrize_infonce: false,
    };
    // Jitter away from the zero-bias init and redraw until no relu input
    // lies close enough to zero for a probe of size `h` to cross it.
    let mut model = base.clone();
    for _ in 0..GRADCHECK_DRAWS {
        model = base.clone();
        let names: Vec<String> = model.params.names().cloned().collect();
        for name in names {
            for v in model.params.get_mut(&name).expect("listed").as_mut_slice() {
                *v += rng.uniform_range(-0.3, 0.3);
            }
        }
        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape);
        model.forward_on(&mut tape, &vars, &bundle, &s, Noise::Fixed(&eps))?;
        if tape.kink_margin() > GRADCHECK_MARGIN {
            break;
        }
    }
    let mut failure: Option<Error> = None;
    let report = check_gradients(&model.params, h, |tape, vars| {
        let mut run = || -> Result<Var> {
            let out = model.forward_on(tape, vars, &bundle, &s, Noise::Fixed(&eps))?;
            Ok(loss_on(tape, &out, &y, &mask, &loss_cfg)?.0)
        };
        run().map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            EngineError::State(msg)
        })
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(report)
}
