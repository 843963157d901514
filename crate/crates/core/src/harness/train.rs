//! Full-batch training with Adam and validation-loss early stopping.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::gcn::{Gcn, GcnConfig};
use crate::engine::{Adam, AdamConfig, CsrMatrix, Matrix, ParamVars, Parameters, SeededRng, Tape, Var};
use crate::eval::{evaluate, MetricsReport};
use crate::graph::GraphDataset;
use crate::model::{loss_on, task_loss_on, FairMib, LossBreakdown, ModelConfig, Noise, SensitiveInput};
use crate::views::{build_views, Operator, ViewBundle};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Waiting,
    Stop,
}

/// Tracks the best validation loss; signals a stop after `patience`
/// consecutive epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Progress {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return Progress::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Progress::Stop
        } else {
            Progress::Waiting
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub curve: Vec<EpochRecord>,
}

fn diverged(epoch: usize, last: Option<LossBreakdown>) -> Error {
    Error::Diverged {
        epoch,
        last: Box::new(last.unwrap_or_default()),
    }
}

fn numeric_to_divergence(e: Error, epoch: usize, last: Option<LossBreakdown>) -> Error {
    if e.is_numeric() {
        diverged(epoch, last)
    } else {
        e
    }
}

/// Minimizes `train_loss` with Adam. After every update `val_loss` is
/// evaluated; on return `params` hold the best-validation values.
pub fn fit<L, V>(
    params: &mut Parameters,
    settings: &FitSettings,
    mut train_loss: L,
    mut val_loss: V,
) -> Result<FitOutcome>
where
    L: FnMut(&mut Tape, &ParamVars) -> Result<(Var, LossBreakdown)>,
    V: FnMut(&Parameters) -> Result<f64>,
{
    if settings.max_epochs == 0 || settings.patience == 0 {
        return Err(Error::Validation("max_epochs and patience must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(settings.lr));
    let mut stopper = EarlyStopping::new(settings.patience);
    let mut best = params.clone();
    let mut curve = Vec::new();
    let mut last: Option<LossBreakdown> = None;

    for epoch in 1..=settings.max_epochs {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let (loss, breakdown) = train_loss(&mut tape, &vars).map_err(|e| numeric_to_divergence(e, epoch, last))?;
        if !breakdown.is_finite() {
            return Err(diverged(epoch, last));
        }
        tape.backward(loss)?;
        adam.step(params, &vars.gradients(&tape))
            .map_err(|e| numeric_to_divergence(e.into(), epoch, Some(breakdown)))?;
        last = Some(breakdown);

        let val = val_loss(params).map_err(|e| numeric_to_divergence(e, epoch, last))?;
        if !val.is_finite() {
            return Err(diverged(epoch, last));
        }
        curve.push(EpochRecord {
            epoch,
            train: breakdown,
            val_loss: val,
        });
        match stopper.observe(epoch, val) {
            Progress::Improved => best = params.clone(),
            Progress::Waiting => {}
            Progress::Stop => break,
        }
    }
    *params = best;
    Ok(FitOutcome {
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best_loss(),
        epochs_run: curve.len(),
        curve,
    })
}

/// Graph and views shared by every seed of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: GraphDataset,
    pub bundle: ViewBundle,
    pub a_norm: Arc<CsrMatrix>,
    labels: Vec<f64>,
    sensitive: Vec<f64>,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let graph = config.load_graph()?;
        Self::from_graph(config, graph)
    }

    pub fn from_graph(config: &RunConfig, graph: GraphDataset) -> Result<Self> {
        let masks = graph.masks();
        for (name, m) in [
            ("train", &masks.train),
            ("validation", &masks.val),
            ("test", &masks.test),
        ] {
            if !m.iter().any(|&x| x) {
                return Err(Error::Validation(format!("{name} mask is empty")));
            }
        }
        let bundle = build_views(&graph, &config.view_config())?;
        let a_norm = match &bundle.structural.operator {
            Operator::Propagate(a) => a.clone(),
            Operator::Identity => unreachable!("structural view always propagates"),
        };
        Ok(Self {
            labels: graph.labels_f64(),
            sensitive: graph.sensitive_f64(),
            graph,
            bundle,
            a_norm,
        })
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn sensitive(&self) -> &[f64] {
        &self.sensitive
    }

    /// `S` as fed to the decoder at inference.
    pub fn inference_sensitive(&self, mode: SensitiveInput) -> Vec<f64> {
        match mode {
            SensitiveInput::Observed => self.sensitive.clone(),
            SensitiveInput::Neutral => {
                let train = &self.graph.masks().train;
                let (sum, count) = self
                    .sensitive
                    .iter()
                    .zip(train)
                    .filter(|(_, &t)| t)
                    .fold((0.0, 0usize), |(s, c), (&v, _)| (s + v, c + 1));
                vec![sum / count.max(1) as f64; self.sensitive.len()]
            }
        }
    }

    /// Features seen by the baseline: the feature-view matrix.
    pub fn baseline_features(&self) -> &Matrix {
        &self.bundle.feature.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    FairMib(FairMib),
    Gcn(Gcn),
}

impl TrainedModel {
    pub fn params(&self) -> &Parameters {
        match self {
            TrainedModel::FairMib(m) => &m.params,
            TrainedModel::Gcn(m) => &m.params,
        }
    }

    pub fn predict_proba(&self, data: &Prepared, mode: SensitiveInput) -> Result<Vec<f64>> {
        match self {
            TrainedModel::FairMib(m) => m.predict_proba(&data.bundle, &data.inference_sensitive(mode)),
            TrainedModel::Gcn(m) => m.predict_proba(&data.a_norm, data.baseline_features()),
        }
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        let mut meta = match self {
            TrainedModel::FairMib(m) => m.checkpoint_meta(),
            TrainedModel::Gcn(m) => m.checkpoint_meta(),
        };
        meta["seed"] = serde_json::json!(seed);
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.params()
            .write_to(BufWriter::new(file), &meta)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (params, meta) = Parameters::read_from(BufReader::new(file)).map_err(|e| Error::io(path, e))?;
        let model = meta.get("model").cloned().unwrap_or_default();
        match meta.get("kind").and_then(|k| k.as_str()) {
            Some("fairmib") => {
                let config: ModelConfig = serde_json::from_value(model)?;
                Ok(TrainedModel::FairMib(FairMib::from_parts(config, params)?))
            }
            Some("baseline_gcn") => {
                let config: GcnConfig = serde_json::from_value(model)?;
                Ok(TrainedModel::Gcn(Gcn::from_parts(config, params)?))
            }
            other => Err(Error::Validation(format!(
                "{}: unknown checkpoint kind {other:?}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub report: MetricsReport,
    pub fit: FitOutcome,
}

fn settings(config: &RunConfig) -> FitSettings {
    FitSettings {
        lr: config.lr,
        max_epochs: config.max_epochs,
        patience: config.patience,
    }
}

/// Trains one seed of `config.variant` and scores it on the test mask.
pub fn train_one(config: &RunConfig, data: &Prepared, seed: u64) -> Result<TrainOutcome> {
    let config = config.effective();
    let (model, fit) = match config.variant {
        Variant::BaselineGcn => {
            let (m, f) = train_gcn(&config, data, seed)?;
            (TrainedModel::Gcn(m), f)
        }
        _ => {
            let (m, f) = train_fairmib(&config, data, seed)?;
            (TrainedModel::FairMib(m), f)
        }
    };
    let g = &data.graph;
    let prob = model.predict_proba(data, config.inference_s_mode)?;
    let report = evaluate(&prob, g.labels(), g.sensitive(), &g.masks().test, seed)?;
    Ok(TrainOutcome { model, report, fit })
}

/// Early stopping watches the deterministic (`z = μ`) label loss on the
/// validation mask.
fn train_fairmib(config: &RunConfig, data: &Prepared, seed: u64) -> Result<(FairMib, FitOutcome)> {
    let mut rng = SeededRng::new(seed);
    let model = FairMib::new(config.model_config(data.bundle.d()), &mut rng)?;
    let loss_cfg = config.loss_config();
    let masks = data.graph.masks();
    let mut params = model.params.clone();
    let fit = fit(
        &mut params,
        &settings(config),
        |tape, vars| {
            let out = model.forward_on(tape, vars, &data.bundle, data.sensitive(), Noise::Sample(&mut rng))?;
            loss_on(tape, &out, data.labels(), &masks.train, &loss_cfg)
        },
        |p| {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            let out = model.forward_on(&mut tape, &vars, &data.bundle, data.sensitive(), Noise::Mean)?;
            let task = task_loss_on(&mut tape, out.logits, data.labels(), &masks.val)?;
            Ok(tape.scalar(task))
        },
    )?;
    Ok((FairMib { params, ..model }, fit))
}

fn train_gcn(config: &RunConfig, data: &Prepared, seed: u64) -> Result<(Gcn, FitOutcome)> {
    let mut rng = SeededRng::new(seed);
    let x = data.baseline_features();
    let model = Gcn::new(
        GcnConfig {
            input_dim: x.cols(),
            hidden: config.hidden,
        },
        &mut rng,
    )?;
    let masks = data.graph.masks();
    let task = |tape: &mut Tape, vars: &ParamVars, mask: &[bool]| -> Result<(Var, LossBreakdown)> {
        let logits = model.forward_on(tape, vars, &data.a_norm, x)?;
        let loss = task_loss_on(tape, logits, data.labels(), mask)?;
        let value = tape.scalar(loss);
        Ok((
            loss,
            LossBreakdown {
                task: value,
                total: value,
                gamma: 1.0,
                ..LossBreakdown::default()
            },
        ))
    };
    let mut params = model.params.clone();
    let fit = fit(
        &mut params,
        &settings(config),
        |tape, vars| task(tape, vars, &masks.train),
        |p| {
            let mut tape = Tape::new();
            let vars = p.register(&mut tape);
            Ok(task(&mut tape, &vars, &masks.val)?.1.total)
        },
    )?;
    Ok((Gcn { params, ..model }, fit))
}
