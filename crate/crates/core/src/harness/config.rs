//! Run configuration and ablation variants.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{
    gen_synthetic, load_bundle, load_dataset, make_splits, GraphDataset, NodeSchema, SplitSpec, SynthSpec,
};
use crate::model::{LossConfig, ModelConfig, SensitiveInput, ViewKind};
use crate::views::{IpwMode, PropensityConfig, ViewConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// `λ_KL = 0`.
    NoCompression,
    /// Decoder input excludes `S`.
    NoConditioning,
    /// `λ_con = 0`.
    NoConsistency,
    NoFeatureView,
    NoStructureView,
    NoDiffusionView,
    BaselineGcn,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoCompression,
        Variant::NoConditioning,
        Variant::NoConsistency,
        Variant::NoFeatureView,
        Variant::NoStructureView,
        Variant::NoDiffusionView,
        Variant::BaselineGcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCompression => "no_compression",
            Variant::NoConditioning => "no_conditioning",
            Variant::NoConsistency => "no_consistency",
            Variant::NoFeatureView => "no_feature_view",
            Variant::NoStructureView => "no_structure_view",
            Variant::NoDiffusionView => "no_diffusion_view",
            Variant::BaselineGcn => "baseline_gcn",
        }
    }

    pub fn views(self) -> Vec<ViewKind> {
        let dropped = match self {
            Variant::NoFeatureView => Some(ViewKind::Feature),
            Variant::NoStructureView => Some(ViewKind::Structural),
            Variant::NoDiffusionView => Some(ViewKind::Diffusion),
            _ => None,
        };
        ViewKind::ALL.into_iter().filter(|&v| Some(v) != dropped).collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s.trim()).ok_or_else(|| {
            let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}`; expected one of {}", known.join(", ")))
        })
    }
}

/// Files of an on-disk dataset. Either `bundle` (a directory written by
/// `save_bundle`) or both `nodes` and `edges` must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub bundle: Option<PathBuf>,
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    pub features: Option<Vec<String>>,
    pub sensitive: Option<String>,
    pub label: Option<String>,
    pub split: Option<String>,
    pub sensitive_feature: Option<String>,
}

impl DatasetConfig {
    fn schema(&self) -> NodeSchema {
        let mut schema = NodeSchema::default();
        if let Some(f) = &self.features {
            schema.features = Some(f.clone());
        }
        if let Some(s) = &self.sensitive {
            schema.sensitive = s.clone();
        }
        if let Some(l) = &self.label {
            schema.label = l.clone();
        }
        if self.split.is_some() {
            schema.split = self.split.clone();
        }
        if self.sensitive_feature.is_some() {
            schema.sensitive_feature = self.sensitive_feature.clone();
        }
        schema
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.bundle, &mut self.nodes, &mut self.edges]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpwSetting {
    #[default]
    Estimated,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<DatasetConfig>,
    pub synth: Option<SynthSpec>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// Teleport probability of the diffusion view.
    pub alpha: f64,
    pub hops: usize,
    pub hidden: usize,
    pub latent: usize,
    pub proj_hidden: usize,
    pub dec_hidden: usize,
    pub lambda_kl: f64,
    pub lambda_con: f64,
    pub tau: f64,
    pub ipw: IpwSetting,
    pub ipw_clip: f64,
    pub ipw_lr: f64,
    pub ipw_epochs: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub scrub_sensitive: bool,
    pub symmetrize_infonce: bool,
    pub inference_s_mode: SensitiveInput,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synth: None,
            train_fraction: 0.5,
            val_fraction: 0.25,
            test_fraction: 0.25,
            split_seed: 0,
            alpha: 0.1,
            hops: 3,
            hidden: 16,
            latent: 16,
            proj_hidden: 16,
            dec_hidden: 16,
            lambda_kl: 1e-3,
            lambda_con: 1e-3,
            tau: 0.5,
            ipw: IpwSetting::Estimated,
            ipw_clip: 0.05,
            ipw_lr: 0.5,
            ipw_epochs: 500,
            lr: 1e-3,
            max_epochs: 1000,
            patience: 30,
            seeds: vec![0, 1, 2, 3, 4],
            variant: Variant::Full,
            scrub_sensitive: true,
            symmetrize_infonce: false,
            inference_s_mode: SensitiveInput::Observed,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(ds) = &mut config.dataset {
            ds.resolve(path.parent().unwrap_or(Path::new(".")));
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.dataset.is_some() && self.synth.is_some() {
            return bad("configure either `dataset` or `synth`, not both".into());
        }
        if let Some(ds) = &self.dataset {
            if ds.bundle.is_none() && (ds.nodes.is_none() || ds.edges.is_none()) {
                return bad("`dataset` needs `bundle` or both `nodes` and `edges`".into());
            }
        }
        if let Some(spec) = &self.synth {
            spec.validate()?;
        }
        self.split_spec().validate()?;
        if !(self.lambda_kl >= 0.0 && self.lambda_con >= 0.0) {
            return bad(format!(
                "loss weights must be non-negative, got lambda_kl={} lambda_con={}",
                self.lambda_kl, self.lambda_con
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.hops == 0 {
            return bad("hops must be at least 1".into());
        }
        if !(self.ipw_clip > 0.0 && self.ipw_clip < 0.5) {
            return bad(format!("ipw_clip must lie in (0, 0.5), got {}", self.ipw_clip));
        }
        if !(self.lr > 0.0 && self.ipw_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad(format!("duplicate seeds in {:?}", self.seeds));
        }
        if [self.hidden, self.latent, self.proj_hidden, self.dec_hidden].contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// The configuration a run actually uses once the variant is applied.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        match self.variant {
            Variant::NoCompression => c.lambda_kl = 0.0,
            Variant::NoConsistency => c.lambda_con = 0.0,
            _ => {}
        }
        c
    }

    pub fn with_variant(&self, variant: Variant) -> RunConfig {
        RunConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            seed: self.split_seed,
        }
    }

    pub fn view_config(&self) -> ViewConfig {
        ViewConfig {
            alpha: self.alpha,
            hops: self.hops,
            propensity: PropensityConfig {
                lr: self.ipw_lr,
                epochs: self.ipw_epochs,
                clip: self.ipw_clip,
            },
            scrub_sensitive: self.scrub_sensitive,
            ipw: match self.ipw {
                IpwSetting::Estimated => IpwMode::Estimated,
                IpwSetting::Uniform => IpwMode::Uniform,
            },
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let c = self.effective();
        LossConfig {
            lambda_kl: c.lambda_kl,
            lambda_con: c.lambda_con,
            tau: c.tau,
            symmetrize_infonce: c.symmetrize_infonce,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden,
            latent: self.latent,
            proj_hidden: self.proj_hidden,
            dec_hidden: self.dec_hidden,
            views: self.variant.views(),
            condition_on_sensitive: self.variant != Variant::NoConditioning,
        }
    }

    /// Loads or generates the graph and assigns splits. Splits stored with a
    /// dataset are kept; otherwise they are drawn from the split settings.
    pub fn load_graph(&self) -> Result<GraphDataset> {
        let g = match &self.dataset {
            Some(ds) => {
                if let Some(dir) = &ds.bundle {
                    if !dir.is_dir() {
                        return Err(Error::Validation(format!(
                            "dataset bundle {} does not exist",
                            dir.display()
                        )));
                    }
                    load_bundle(dir)?
                } else {
                    let (nodes, edges) = (
                        ds.nodes.as_ref().expect("validated"),
                        ds.edges.as_ref().expect("validated"),
                    );
                    for p in [nodes, edges] {
                        if !p.is_file() {
                            return Err(Error::Validation(format!(
                                "dataset file {} does not exist",
                                p.display()
                            )));
                        }
                    }
                    load_dataset(nodes, edges, &ds.schema())?
                }
            }
            None => gen_synthetic(self.synth.as_ref().unwrap_or(&SynthSpec::default()))?,
        };
        let masks = g.masks();
        if masks.train.iter().any(|&m| m) && masks.val.iter().any(|&m| m) && masks.test.iter().any(|&m| m) {
            Ok(g)
        } else {
            make_splits(&g, &self.split_spec())
        }
    }
}
