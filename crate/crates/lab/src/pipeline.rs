// SPDX-License-Identifier: MIT OR Apache-2.0

//! data -> model -> experiment -> export, with the manifest written last.

use std::fs::File;
use std::io::BufReader;
use std::time::Instant;

use ablation_core::ablation::{
    fit_each, single_component_sweep, verify_total_ablation_dominance, Ablator, DeltaReport, DominanceCheck, MeanCache,
    MethodKind,
};
use ablation_core::circuits::{
    acdc, circuit_refit_defaults, eap, evaluate_circuit, hcgs, random_circuit_baseline, ugs, write_frontier_csv, AcdcConfig,
    Algorithm, CircuitResult, EapConfig, RandomBaseline, RandomConfig, RegularizerParams, SearchConfig, Task,
};
use ablation_core::graph::View;
use ablation_core::lens::{fit_and_score, faithfulness, InterventionSpec, LensCorpus, LensKind, FaithfulnessReport, LensLayerReport};
use ablation_core::model::{GraphModel, LanguageModel};
use ablation_core::subtasks::{gen_facts, gen_greater_than, gen_ioi, train_toy_model, Sample, SubtaskDataset, TrainConfig, Vocab};
use ablation_core::tracing::{
    embedding_variance, fit_oa_corruption, tracing_sweep, write_tracing_csv, Corruption, FitCorruptionConfig, TracingSet,
};
use ablation_core::transformer::{checkpoint, ModelConfig};
use ablation_core::{rng, Weights};
use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use crate::config::{
    CircuitParams, CorruptionKind, DataSpec, Experiment, ExperimentConfig, LensParams, ModelSize, ModelSpec, TaskName, TraceParams,
};
use crate::manifest::{sha256_hex, OutputDir, RunManifest, RunStatus, StageSeed, MANIFEST};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed of a named stage, independent of which other stages exist.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    rng::split(master, rng::tag(stage))
}

/// Hash of the config without its output directory, so the same experiment
/// written to two places hashes alike.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut canonical = serde_json::to_value(cfg)?;
    if let Some(m) = canonical.as_object_mut() {
        m.remove("out_dir");
    }
    Ok(sha256_hex(serde_json::to_string(&canonical)?.as_bytes()))
}

/// Runs every stage. Stage failures are recorded in the returned manifest
/// (and in `manifest.json`); only failing to write the output directory
/// itself is an `Err`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let mut out = OutputDir::create(&cfg.out_dir)?;
    let stages = ["data", "model", cfg.name()];
    let seeds: Vec<StageSeed> = stages.iter().map(|s| StageSeed { stage: s.to_string(), seed: stage_seed(cfg.seed, s) }).collect();
    let mut done = Vec::new();
    let status = match execute(cfg, &seeds, &mut out, &mut done) {
        Ok(()) => RunStatus::Completed,
        Err((stage, e)) => RunStatus::Failed { stage, error: format!("{e:#}") },
    };
    let manifest = RunManifest {
        experiment: cfg.name().to_string(),
        config_hash: config_hash(cfg)?,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        master_seed: cfg.seed,
        seeds,
        stages: done,
        status,
        deterministic: cfg.deterministic(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        outputs: out.files().to_vec(),
    };
    out.write_json(MANIFEST, &manifest)?;
    Ok(manifest)
}

type StageError = (String, anyhow::Error);

fn fail(stage: &str) -> impl Fn(anyhow::Error) -> StageError + '_ {
    move |e| (stage.to_string(), e)
}

fn execute(cfg: &ExperimentConfig, seeds: &[StageSeed], out: &mut OutputDir, done: &mut Vec<String>) -> std::result::Result<(), StageError> {
    let data = load_data(&cfg.data, seeds[0].seed).map_err(fail("data"))?;
    done.push("data".into());
    let weights = load_model(&cfg.model, &data, seeds[1].seed, out).map_err(fail("model"))?;
    done.push("model".into());
    let name = cfg.name();
    let artifacts = run_experiment(&cfg.experiment, &data, weights, seeds[2].seed).map_err(fail(name))?;
    done.push(name.into());
    for a in &artifacts {
        out.write(&a.path, &a.bytes).map_err(fail("export"))?;
    }
    done.push("export".into());
    Ok(())
}

pub fn load_data(spec: &DataSpec, seed: u64) -> Result<SubtaskDataset> {
    Ok(match spec {
        DataSpec::Generate { task: TaskName::Ioi, n, templates } => gen_ioi(seed, *n, *templates)?,
        DataSpec::Generate { task: TaskName::GreaterThan, n, .. } => gen_greater_than(seed, *n)?,
        DataSpec::Generate { task: TaskName::Facts, n, .. } => gen_facts(seed, *n)?,
        DataSpec::File { path } => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            SubtaskDataset::read_jsonl(BufReader::new(f))?
        }
    })
}

/// Facts are memorised, so a facts model trains on every prompt.
pub fn training_samples(data: &SubtaskDataset) -> Vec<Sample> {
    match data.task {
        ablation_core::subtasks::Task::Facts => data.samples.clone(),
        _ => data.train_samples(),
    }
}

pub fn model_config(size: ModelSize) -> ModelConfig {
    let v = Vocab::get().len();
    match size {
        ModelSize::Small => ModelConfig::small(v),
        ModelSize::Toy => ModelConfig::toy(v),
    }
}

fn load_model(spec: &ModelSpec, data: &SubtaskDataset, seed: u64, out: &mut OutputDir) -> Result<Weights> {
    match spec {
        ModelSpec::Checkpoint { path } => Ok(checkpoint::load(path)?.0),
        ModelSpec::Train { size, steps, lr, batch_size, init_std } => {
            let tc = TrainConfig { steps: *steps, lr: *lr, batch_size: *batch_size, init_std: *init_std, seed, eval_every: 0 };
            let (w, log) = train_toy_model(&training_samples(data), &[], &model_config(*size), &tc)?;
            let mut meta = serde_json::Map::new();
            meta.insert("train".into(), serde_json::to_value(&tc)?);
            meta.insert("final_loss".into(), serde_json::json!(log.losses.last()));
            checkpoint::save(&w, &out.path("model.json")?, meta)?;
            out.adopt("model.json")?;
            out.adopt("model.bin")?;
            Ok(w)
        }
    }
}

pub struct Artifact {
    pub path: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn json<T: Serialize>(path: &str, value: &T) -> Result<Self> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        Ok(Self { path: path.into(), bytes: text.into_bytes() })
    }
}

fn capped(v: Vec<Sample>, max: usize) -> Vec<Sample> {
    if max == 0 {
        v
    } else {
        v.into_iter().take(max).collect()
    }
}

pub fn run_experiment(exp: &Experiment, data: &SubtaskDataset, weights: Weights, seed: u64) -> Result<Vec<Artifact>> {
    match exp {
        Experiment::Sweep { methods, components, fit, max_fit, max_eval } => {
            let model = LanguageModel::new(weights, View::Standard);
            let fit_set = capped(data.train_samples(), *max_fit);
            let eval_set = capped(data.test_samples(), *max_eval);
            let mut fit_cfg = fit.clone();
            fit_cfg.seed = rng::split(seed, rng::tag("fit"));
            sweep(&model, methods, components, &fit_set, &eval_set, &fit_cfg, seed)
        }
        Experiment::Circuit(p) => {
            let model = LanguageModel::new(weights, View::ResidualRewrite);
            circuits(&model, p, data, seed)
        }
        Experiment::Trace(p) => {
            let model = LanguageModel::new(weights, View::Standard);
            trace(&model, p, data, seed)
        }
        Experiment::Lens(p) => {
            let model = LanguageModel::new(weights, View::Standard);
            lens(&model, p, data, seed)
        }
    }
}

#[derive(Serialize)]
struct ComponentDominance {
    component: String,
    checks: Vec<DominanceCheck>,
}

fn sweep(
    model: &LanguageModel,
    methods: &[MethodKind],
    components: &[String],
    fit: &[Sample],
    eval: &[Sample],
    fit_cfg: &ablation_core::ablation::FitConfig,
    seed: u64,
) -> Result<Vec<Artifact>> {
    let g = model.graph();
    let vertices: Vec<usize> = if components.is_empty() {
        g.components()
    } else {
        components
            .iter()
            .map(|c| g.find_by_name(c).ok_or_else(|| anyhow!("unknown component {c:?}")))
            .collect::<Result<_>>()?
    };
    let means = MeanCache::compute(model, fit, &vertices)?;
    let mut ablators = Vec::with_capacity(methods.len());
    for &m in methods {
        ablators.push(match m {
            MethodKind::Zero => Ablator::zero(model),
            MethodKind::Mean => Ablator::mean(model, means.clone()),
            MethodKind::CfMean => Ablator::cf_mean(model, MeanCache::compute_counterfactual(model, fit, &vertices)?),
            MethodKind::Resample => Ablator::resample(model, fit, rng::split(seed, rng::tag("resample")))?,
            MethodKind::Counterfactual => Ablator::counterfactual(model),
            MethodKind::GaussianNoise { scale } => Ablator::gaussian_noise(model, scale, rng::split(seed, rng::tag("noise")))?,
            MethodKind::Optimal => Ablator::optimal(model, fit_each(model, &vertices, fit, &means, fit_cfg)?.0),
        });
    }
    let r = single_component_sweep(&ablators, eval, &vertices)?;
    let mut csv = Vec::new();
    r.write_csv(&mut csv)?;
    let mut artifacts = vec![Artifact { path: "sweep.csv".into(), bytes: csv }, Artifact::json("sweep.json", &r)?];
    if let Some(opt) = methods.iter().position(|&m| m == MethodKind::Optimal) {
        let report = |c: usize, m: usize| DeltaReport {
            components: vec![r.components[c].clone()],
            method: methods[m],
            delta: r.delta[c][m],
            se: r.se[c][m],
            n: r.n,
            per_sample: Vec::new(),
        };
        let mut rows = Vec::new();
        for c in 0..r.components.len() {
            let others: Vec<DeltaReport> = (0..methods.len()).filter(|&m| m != opt).map(|m| report(c, m)).collect();
            rows.push(ComponentDominance { component: r.components[c].clone(), checks: verify_total_ablation_dominance(&report(c, opt), &others)? });
        }
        artifacts.push(Artifact::json("dominance.json", &rows)?);
    }
    Ok(artifacts)
}

#[derive(Serialize)]
struct RandomComparison {
    lambda: f64,
    method: MethodKind,
    delta: f64,
    z_score: Option<f64>,
    baseline: RandomBaseline,
}

fn circuits(model: &LanguageModel, p: &CircuitParams, data: &SubtaskDataset, seed: u64) -> Result<Vec<Artifact>> {
    let train = capped(data.train_samples(), p.max_train);
    let eval = capped(data.test_samples(), p.max_eval);
    let task = Task::new(model, &train, &eval, rng::split(seed, rng::tag("task")))?;
    let search_seed = rng::split(seed, rng::tag("search"));
    let eval_methods = if p.eval_methods.is_empty() { vec![p.method] } else { p.eval_methods.clone() };
    let mut results = Vec::new();
    for &lambda in &p.lambdas {
        let (circuit, config) = match p.algorithm {
            Algorithm::Ugs | Algorithm::Hcgs => {
                let sc = SearchConfig {
                    steps: p.steps,
                    regularizer: RegularizerParams::new(lambda, p.gamma)?,
                    tau: p.tau,
                    seed: search_seed,
                    ..SearchConfig::default()
                };
                let r = if p.algorithm == Algorithm::Ugs { ugs(&task, p.method, &sc)? } else { hcgs(&task, p.method, &sc)? };
                (r.circuit, serde_json::to_value(&sc)?)
            }
            Algorithm::Acdc => {
                let ac = AcdcConfig { threshold: lambda, ..AcdcConfig::default() };
                (acdc(&task, p.method, &ac)?.circuit, serde_json::to_value(&ac)?)
            }
            Algorithm::Eap => {
                if !(lambda >= 0.0 && lambda.fract() == 0.0) {
                    bail!("EAP edge budgets must be whole numbers, got {lambda}");
                }
                let ec = EapConfig { top_k: lambda as usize, ..EapConfig::default() };
                (eap(&task, p.method, &ec)?.circuit, serde_json::to_value(&ec)?)
            }
            Algorithm::Random | Algorithm::Manual => bail!("{} is not a search algorithm", p.algorithm),
        };
        let mut r = CircuitResult::new(p.algorithm, p.method, lambda, &circuit, config);
        for &m in &eval_methods {
            r.deltas.push(evaluate_circuit(&task, &circuit, m, &circuit_refit_defaults())?);
        }
        results.push(r);
    }
    results.sort_by(|a, b| a.n_edges.cmp(&b.n_edges).then(a.lambda.total_cmp(&b.lambda)));
    let mut csv = Vec::new();
    write_frontier_csv(&results, &mut csv)?;
    let mut artifacts = vec![Artifact::json("circuits.json", &results)?, Artifact { path: "frontier.csv".into(), bytes: csv }];
    if p.random_trials > 0 {
        let mut cmp = Vec::new();
        for r in &results {
            if r.n_edges == 0 {
                continue;
            }
            let rc = RandomConfig { trials: p.random_trials, ..RandomConfig::around(r.n_edges, rng::split(seed, rng::tag("random"))) };
            for d in &r.deltas {
                let baseline = random_circuit_baseline(&task, d.method, &rc)?;
                cmp.push(RandomComparison { lambda: r.lambda, method: d.method, delta: d.delta, z_score: baseline.z_score(d.delta), baseline });
            }
        }
        artifacts.push(Artifact::json("random.json", &cmp)?);
    }
    Ok(artifacts)
}

#[derive(Serialize)]
struct TraceSummary {
    corruption: &'static str,
    n_prompts: usize,
    mean_clean_prob: f64,
    mean_corrupted_prob: f64,
    fit_trace: Vec<f64>,
}

fn trace(model: &LanguageModel, p: &TraceParams, data: &SubtaskDataset, seed: u64) -> Result<Vec<Artifact>> {
    let set = TracingSet::correct_only(model, &data.test_samples())?;
    let (corruption, fit_trace) = match p.corruption {
        CorruptionKind::Gn => {
            let var = embedding_variance(model, &data.samples)?;
            (Corruption::gaussian(var, p.noise_scale, rng::split(seed, rng::tag("noise")))?, Vec::new())
        }
        CorruptionKind::Oa => {
            let train = TracingSet::correct_only(model, &data.train_samples())?;
            let mut fc = FitCorruptionConfig { seed: rng::split(seed, rng::tag("fit")), ..FitCorruptionConfig::default() };
            if let Some(s) = p.fit_steps {
                fc.steps = s;
            }
            fit_oa_corruption(&train, &fc)?
        }
    };
    let grid = tracing_sweep(&set, &corruption, &p.layer_kinds, &p.window_sizes, &p.positions)?;
    let mut csv = Vec::new();
    write_tracing_csv(&grid, &mut csv)?;
    let corrupted = set.corrupted_probs(&corruption)?;
    let summary = TraceSummary {
        corruption: corruption.name(),
        n_prompts: set.len(),
        mean_clean_prob: ablation_core::stats::mean(set.clean_probs()),
        mean_corrupted_prob: ablation_core::stats::mean(&corrupted),
        fit_trace,
    };
    let tag = match p.corruption {
        CorruptionKind::Gn => "gn",
        CorruptionKind::Oa => "oa",
    };
    Ok(vec![Artifact { path: format!("grid_{tag}.csv"), bytes: csv }, Artifact::json("trace.json", &summary)?])
}

#[derive(Serialize)]
struct LensOutput {
    losses: Vec<LensLayerReport>,
    faithfulness: Vec<LensFaithfulness>,
}

#[derive(Serialize)]
struct LensFaithfulness {
    kind: LensKind,
    report: FaithfulnessReport,
}

fn lens(model: &LanguageModel, p: &LensParams, data: &SubtaskDataset, seed: u64) -> Result<Vec<Artifact>> {
    let fit = LensCorpus::new(model, capped(data.train_samples(), p.max_fit))?;
    let eval = LensCorpus::new(model, capped(data.test_samples(), p.max_eval))?;
    let tuned = ablation_core::lens::LensTrainConfig { seed: rng::split(seed, rng::tag("tuned")), ..p.tuned.clone() };
    let oca = ablation_core::lens::LensTrainConfig { seed: rng::split(seed, rng::tag("oca")), ..p.oca.clone() };
    let mut losses = Vec::new();
    let mut faith = Vec::new();
    for &kind in &p.kinds {
        for layer in 0..=fit.n_layers() {
            let (l, report) = fit_and_score(&fit, &eval, kind, layer, &tuned, &oca)?;
            losses.push(report);
            if p.faithfulness_draws == 0 || !matches!(kind, LensKind::Tuned | LensKind::Oca) {
                continue;
            }
            for &iv in &p.interventions {
                let spec = InterventionSpec::new(iv, rng::split(seed, rng::tag(&format!("faithfulness/{kind}/{layer}/{iv}"))));
                faith.push(LensFaithfulness { kind, report: faithfulness(&eval, &l, &spec, p.faithfulness_draws)? });
            }
        }
    }
    let mut csv = String::from("layer,kind,loss\n");
    for r in &losses {
        csv.push_str(&format!("{},{},{:?}\n", r.layer, r.kind, r.loss));
    }
    Ok(vec![Artifact { path: "lens_losses.csv".into(), bytes: csv.into_bytes() }, Artifact::json("lens.json", &LensOutput { losses, faithfulness: faith })?])
}
