// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration: one JSON file per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use ablation_core::ablation::{FitConfig, MethodKind};
use ablation_core::circuits::{Algorithm, RegularizerParams};
use ablation_core::lens::{InterventionKind, LensKind, LensTrainConfig};
use ablation_core::tracing::{LayerKind, PositionSet};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage draws from its own split of it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub experiment: Experiment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    Ioi,
    GreaterThan,
    Facts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// `n` is the prompt count, or the subject count for facts.
    Generate {
        task: TaskName,
        n: usize,
        #[serde(default = "default_templates")]
        templates: usize,
    },
    File { path: PathBuf },
}

fn default_templates() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSize {
    Small,
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    Checkpoint {
        path: PathBuf,
    },
    Train {
        size: ModelSize,
        steps: usize,
        #[serde(default = "default_train_lr")]
        lr: f64,
        #[serde(default = "default_train_batch")]
        batch_size: usize,
        #[serde(default = "default_init_std")]
        init_std: f64,
    },
}

fn default_train_lr() -> f64 {
    3e-3
}

fn default_train_batch() -> usize {
    16
}

fn default_init_std() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    /// Every head and MLP ablated alone under every method.
    #[serde(rename = "sweep-table1")]
    Sweep {
        #[serde(default = "default_sweep_methods")]
        methods: Vec<MethodKind>,
        /// Components by name (`a1.3`, `mlp2`); empty means all of them.
        #[serde(default)]
        components: Vec<String>,
        #[serde(default)]
        fit: FitConfig,
        /// Caps on the fitting and evaluation splits; 0 keeps everything.
        #[serde(default)]
        max_fit: usize,
        #[serde(default)]
        max_eval: usize,
    },
    Circuit(CircuitParams),
    Trace(TraceParams),
    Lens(LensParams),
}

pub fn default_sweep_methods() -> Vec<MethodKind> {
    vec![MethodKind::Zero, MethodKind::Mean, MethodKind::Resample, MethodKind::Counterfactual, MethodKind::Optimal]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitParams {
    pub algorithm: Algorithm,
    /// Ablation used during the search.
    pub method: MethodKind,
    /// Regularizer weights for gradient searches, thresholds for ACDC,
    /// edge budgets for EAP.
    pub lambdas: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_search_steps")]
    pub steps: usize,
    /// Methods each discovered circuit is evaluated under; defaults to the
    /// search method.
    #[serde(default)]
    pub eval_methods: Vec<MethodKind>,
    #[serde(default)]
    pub max_train: usize,
    #[serde(default)]
    pub max_eval: usize,
    /// Random circuits of matched size per discovered circuit; 0 skips them.
    #[serde(default)]
    pub random_trials: usize,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_tau() -> f64 {
    0.5
}

fn default_search_steps() -> usize {
    500
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Gn,
    Oa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceParams {
    pub corruption: CorruptionKind,
    /// Gaussian noise variance as a multiple of the per-dimension embedding variance.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_window_sizes")]
    pub window_sizes: Vec<usize>,
    #[serde(default = "default_layer_kinds")]
    pub layer_kinds: Vec<LayerKind>,
    #[serde(default = "default_positions")]
    pub positions: Vec<PositionSet>,
    #[serde(default)]
    pub fit_steps: Option<usize>,
}

fn default_noise_scale() -> f64 {
    9.0
}

fn default_window_sizes() -> Vec<usize> {
    vec![1, 5]
}

fn default_layer_kinds() -> Vec<LayerKind> {
    vec![LayerKind::Attention, LayerKind::Mlp, LayerKind::Residual]
}

fn default_positions() -> Vec<PositionSet> {
    vec![PositionSet::LastSubject, PositionSet::LastToken]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LensParams {
    #[serde(default = "default_lens_kinds")]
    pub kinds: Vec<LensKind>,
    #[serde(default = "LensTrainConfig::tuned")]
    pub tuned: LensTrainConfig,
    #[serde(default = "LensTrainConfig::oca")]
    pub oca: LensTrainConfig,
    /// Interventions per faithfulness measurement; 0 skips faithfulness.
    #[serde(default)]
    pub faithfulness_draws: usize,
    #[serde(default = "default_interventions")]
    pub interventions: Vec<InterventionKind>,
    #[serde(default)]
    pub max_fit: usize,
    #[serde(default)]
    pub max_eval: usize,
}

fn default_lens_kinds() -> Vec<LensKind> {
    LensKind::ALL.to_vec()
}

fn default_interventions() -> Vec<InterventionKind> {
    InterventionKind::ALL.to_vec()
}

impl ExperimentConfig {
    /// Parses a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("invalid config")
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let DataSpec::File { path } = &mut self.data {
            fix(path);
        }
        if let ModelSpec::Checkpoint { path } = &mut self.model {
            fix(path);
        }
    }

    /// Referenced files must exist and numeric settings must be usable.
    pub fn validate(&self) -> Result<()> {
        if let DataSpec::File { path } = &self.data {
            if !path.is_file() {
                bail!("data.path: {} does not exist", path.display());
            }
        }
        if let DataSpec::Generate { n, templates, .. } = &self.data {
            if *n == 0 || *templates == 0 {
                bail!("data: n and templates must be positive");
            }
        }
        match &self.model {
            ModelSpec::Checkpoint { path } if !path.is_file() => bail!("model.path: {} does not exist", path.display()),
            ModelSpec::Train { lr, batch_size, .. } if *lr <= 0.0 || *batch_size == 0 => {
                bail!("model: lr and batch_size must be positive")
            }
            _ => {}
        }
        match &self.experiment {
            Experiment::Sweep { methods, .. } if methods.len() < 2 => bail!("experiment.methods: at least two methods"),
            Experiment::Circuit(p) => {
                if p.lambdas.is_empty() {
                    bail!("experiment.lambdas: at least one value");
                }
                RegularizerParams::new(1.0, p.gamma).context("experiment.gamma")?;
                if !(0.0..=1.0).contains(&p.tau) {
                    bail!("experiment.tau: outside [0, 1]");
                }
            }
            Experiment::Trace(p) if p.window_sizes.is_empty() || p.window_sizes.iter().any(|&w| w % 2 == 0) => {
                bail!("experiment.window_sizes: odd sizes only, at least one")
            }
            Experiment::Lens(p) if p.kinds.is_empty() => bail!("experiment.kinds: at least one lens"),
            _ => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.experiment {
            Experiment::Sweep { .. } => "sweep-table1",
            Experiment::Circuit(_) => "circuit",
            Experiment::Trace(_) => "trace",
            Experiment::Lens(_) => "lens",
        }
    }

    /// True unless the experiment draws Gaussian noise, whose results are
    /// reproducible given the seed but not promised byte-identical.
    pub fn deterministic(&self) -> bool {
        match &self.experiment {
            Experiment::Sweep { methods, .. } => !methods.iter().any(|m| matches!(m, MethodKind::GaussianNoise { .. })),
            Experiment::Circuit(p) => !std::iter::once(&p.method)
                .chain(&p.eval_methods)
                .any(|m| matches!(m, MethodKind::GaussianNoise { .. })),
            Experiment::Trace(p) => p.corruption != CorruptionKind::Gn,
            Experiment::Lens(_) => true,
        }
    }
}
