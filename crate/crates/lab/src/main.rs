// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use ablation_core::ablation::MethodKind;
use ablation_core::circuits::Algorithm;
use ablation_core::lens::{LensKind, LensTrainConfig};
use ablation_core::subtasks::{gen_facts, gen_greater_than, gen_ioi, train_toy_model, SubtaskDataset, TrainConfig};
use ablation_core::tracing::PositionSet;
use ablation_core::transformer::checkpoint;
use ablation_lab::config::{
    default_sweep_methods, CircuitParams, CorruptionKind, DataSpec, Experiment, LensParams, ModelSize, ModelSpec, TraceParams,
};
use ablation_lab::manifest::MANIFEST;
use ablation_lab::pipeline::{load_data, model_config, stage_seed, training_samples};
use ablation_lab::{run, ExperimentConfig, RunStatus};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ablation-lab", version, about = "Ablation, circuit, tracing and lens experiments on small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate indirect-object prompts as JSON lines.
    GenIoi {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        templates: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate year-comparison prompts as JSON lines.
    GenGt {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate subject-relation-attribute prompts as JSON lines.
    GenFacts {
        #[arg(long, default_value_t = 50)]
        subjects: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SizeArg::Small)]
        size: SizeArg,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long)]
        seed: u64,
        /// Checkpoint header path; the weights go next to it with a `.bin` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablate every head and MLP alone under several methods.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: zero, mean, cf-mean, resample, cf, optimal.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<MethodKind>,
        /// Comma-separated component names such as a1.3 or mlp2; all by default.
        #[arg(long, value_delimiter = ',')]
        components: Vec<String>,
    },
    /// Circuit discovery.
    Circuit {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        algorithm: AlgorithmArg,
        /// Ablation used during the search.
        #[arg(long, default_value = "mean")]
        method: MethodKind,
        /// Sweep values: regularizer weight, ACDC threshold or EAP edge budget.
        #[arg(long = "lambda", required = true)]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, value_delimiter = ',')]
        eval_methods: Vec<MethodKind>,
        #[arg(long, default_value_t = 0)]
        random_trials: usize,
    },
    /// Causal tracing over windows of layers.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        corruption: CorruptionArg,
        #[arg(long = "window-size", default_values_t = [1, 5])]
        window_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "last-subject,last-token")]
        positions: Vec<PositionSet>,
    },
    /// Fit lenses at every layer and optionally measure their faithfulness.
    Lens {
        #[command(flatten)]
        common: Common,
        #[arg(long = "kind", value_delimiter = ',', default_value = "logit,tuned,oca,mean,resample")]
        kinds: Vec<LensKind>,
        /// Interventions per faithfulness measurement; 0 skips it.
        #[arg(long, default_value_t = 0)]
        faithfulness: usize,
    },
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset in JSON lines.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    Small,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Acdc,
    Eap,
    Hcgs,
    Ugs,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorruptionArg {
    Gn,
    Oa,
}

fn write_dataset(ds: &SubtaskDataset, out: &PathBuf) -> Result<()> {
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    ds.write_jsonl(&mut w)?;
    w.flush()?;
    println!("{}", serde_json::json!({"samples": ds.len(), "out": out}));
    Ok(())
}

fn experiment_config(common: Common, experiment: Experiment) -> ExperimentConfig {
    ExperimentConfig {
        seed: common.seed,
        out_dir: common.out,
        data: DataSpec::File { path: common.data },
        model: ModelSpec::Checkpoint { path: common.checkpoint },
        experiment,
    }
}

/// A run that finished but recorded a failed stage.
#[derive(Debug)]
struct StageFailure {
    stage: String,
    error: String,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageFailure {}

fn run_config(cfg: ExperimentConfig) -> Result<()> {
    cfg.validate().map_err(ConfigError)?;
    let m = run(&cfg)?;
    println!("{}", serde_json::json!({"manifest": cfg.out_dir.join(MANIFEST), "outputs": m.outputs.len()}));
    match m.status {
        RunStatus::Completed => Ok(()),
        RunStatus::Failed { stage, error } => Err(StageFailure { stage, error }.into()),
    }
}

#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenIoi { n, templates, seed, out } => write_dataset(&gen_ioi(seed, n, templates)?, &out),
        Command::GenGt { n, seed, out } => write_dataset(&gen_greater_than(seed, n)?, &out),
        Command::GenFacts { subjects, seed, out } => write_dataset(&gen_facts(seed, subjects)?, &out),
        Command::Train { data, size, steps, lr, batch_size, seed, out } => {
            let ds = load_data(&DataSpec::File { path: data }, 0)?;
            let size = match size {
                SizeArg::Small => ModelSize::Small,
                SizeArg::Toy => ModelSize::Toy,
            };
            let tc = TrainConfig { steps, lr, batch_size, init_std: 0.1, seed: stage_seed(seed, "model"), eval_every: 0 };
            let (w, log) = train_toy_model(&training_samples(&ds), &[], &model_config(size), &tc)?;
            let mut meta = serde_json::Map::new();
            meta.insert("train".into(), serde_json::to_value(&tc)?);
            checkpoint::save(&w, &out, meta)?;
            println!("{}", serde_json::json!({"checkpoint": out, "final_loss": log.losses.last()}));
            Ok(())
        }
        Command::Ablate { common, methods, components } => {
            let methods = if methods.is_empty() { default_sweep_methods() } else { methods };
            let exp = Experiment::Sweep { methods, components, fit: Default::default(), max_fit: 0, max_eval: 0 };
            run_config(experiment_config(common, exp))
        }
        Command::Circuit { common, algorithm, method, lambdas, gamma, tau, steps, eval_methods, random_trials } => {
            let algorithm = match algorithm {
                AlgorithmArg::Acdc => Algorithm::Acdc,
                AlgorithmArg::Eap => Algorithm::Eap,
                AlgorithmArg::Hcgs => Algorithm::Hcgs,
                AlgorithmArg::Ugs => Algorithm::Ugs,
            };
            let p = CircuitParams { algorithm, method, lambdas, gamma, tau, steps, eval_methods, max_train: 0, max_eval: 0, random_trials };
            run_config(experiment_config(common, Experiment::Circuit(p)))
        }
        Command::Trace { common, corruption, window_sizes, positions } => {
            let corruption = match corruption {
                CorruptionArg::Gn => CorruptionKind::Gn,
                CorruptionArg::Oa => CorruptionKind::Oa,
            };
            let mut p: TraceParams = serde_json::from_value(serde_json::json!({"corruption": corruption}))?;
            p.window_sizes = window_sizes;
            p.positions = positions;
            run_config(experiment_config(common, Experiment::Trace(p)))
        }
        Command::Lens { common, kinds, faithfulness } => {
            let p = LensParams {
                kinds,
                tuned: LensTrainConfig::tuned(),
                oca: LensTrainConfig::oca(),
                faithfulness_draws: faithfulness,
                interventions: ablation_core::lens::InterventionKind::ALL.to_vec(),
                max_fit: 0,
                max_eval: 0,
            };
            run_config(experiment_config(common, Experiment::Lens(p)))
        }
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(ConfigError)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            run_config(cfg)
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({"error": {"kind": kind, "message": message}}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_end().to_string(), 2),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.is::<ConfigError>() {
                "config"
            } else if e.is::<StageFailure>() {
                "stage"
            } else if e.is::<ablation_core::Error>() {
                "toolkit"
            } else {
                "runtime"
            };
            fail(kind, format!("{e:#}"), 1)
        }
    }
}
