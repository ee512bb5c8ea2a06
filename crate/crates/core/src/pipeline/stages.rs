use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LoadedSpec, PipelineError, RunDir, STAGES};
use crate::attack::{self, AttackReport, Exposure, ScenarioSummary, VictimBundle};
use crate::latency::{latency_ceiling, parallel_latency, sequential_baseline_latency, simulate_schedule};
use crate::moo::{run_search, MooError, SearchJournal, SearchLogHeader, SearchOutcome, SearchProblem};
use crate::nn::checkpoint::{decode_checkpoint, encode_checkpoint, round_to_stored, CheckpointMeta};
use crate::nn::train::{backbone_accuracy, combined_accuracy, CandidateTrainer, EpochCurve, FeatureCache, TrainFailure, CURVE_HEADER};
use crate::nn::{generate, train_backbone, train_poisoned, Backbone, BackboneArch, ModelState, SgdOptions, SplitSizes, SyntheticDataset};
use crate::search_space::{estimate_memory, sample_random, Configuration, OpType};
use crate::seed;

use super::ExperimentSpec;

/// Tolerance on medians when judging the λ-sweep monotone.
const SWEEP_TOLERANCE: f64 = 0.02;
/// Closed form and event simulation must agree to this many milliseconds.
const ORACLE_TOLERANCE_MS: f64 = 1e-9;

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, PipelineError> {
    let mut out = serde_json::to_vec_pretty(v).map_err(|e| PipelineError::Spec(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(run: &RunDir, rel: &str) -> Result<T, PipelineError> {
    let bytes = std::fs::read(run.path(rel)).map_err(|source| PipelineError::Io { path: run.path(rel), source })?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Spec(format!("{rel}: {e}")))
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| PipelineError::Spec(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| PipelineError::Spec(e.to_string()))
}

pub fn arch(spec: &ExperimentSpec) -> Result<BackboneArch, PipelineError> {
    let r = &spec.data.recipe;
    Ok(BackboneArch::new(spec.backbone.depth, spec.backbone.width, r.resolution, r.channels, r.num_classes)?)
}

/// Shared starting point of defender and attacker: the task data and the public backbone.
#[derive(Debug, Clone)]
pub struct Fixtures {
    pub arch: BackboneArch,
    pub dataset: SyntheticDataset,
    pub public: Backbone,
}

pub fn build_dataset(spec: &ExperimentSpec) -> SyntheticDataset {
    let d = &spec.data;
    generate(&d.recipe, seed::derive(spec.seed, "data/task"), SplitSizes { train: d.train, val: d.val, test: d.test })
}

fn backbone_opts(spec: &ExperimentSpec, epochs: usize, label: &str) -> SgdOptions {
    let b = &spec.backbone;
    SgdOptions { learning_rate: b.learning_rate, epochs, batch_size: b.batch_size, clip_threshold: b.clip_threshold, seed: seed::derive(spec.seed, label) }
}

/// Pre-trains from scratch on held-out public data restricted to `public_classes` classes.
pub fn pretrain_public(spec: &ExperimentSpec, arch: &BackboneArch) -> Result<Backbone, PipelineError> {
    let d = &spec.data;
    let public = generate(&d.recipe, seed::derive(spec.seed, "data/public"), SplitSizes { train: d.public_train, val: 0, test: 0 });
    let keep: Vec<usize> = (0..public.train.len()).filter(|&i| public.train.labels[i] < d.public_classes).collect();
    let split = public.train.subset(&keep);
    let mut backbone = crate::nn::build_backbone(arch, seed::derive(spec.seed, "backbone/init"));
    train_backbone(&mut backbone, &split, &backbone_opts(spec, spec.backbone.pretrain_epochs, "backbone/pretrain"))?;
    Ok(round_backbone(&backbone))
}

fn round_backbone(b: &Backbone) -> Backbone {
    let mut b = b.clone();
    for t in b.params_mut() {
        t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    b
}

pub fn build_fixtures(spec: &ExperimentSpec) -> Result<Fixtures, PipelineError> {
    let arch = arch(spec)?;
    let public = pretrain_public(spec, &arch)?;
    Ok(Fixtures { arch, dataset: build_dataset(spec), public })
}

/// `M_t`: the public backbone fine-tuned with plain cross-entropy on the full train split.
pub fn train_teacher(spec: &ExperimentSpec, fx: &Fixtures) -> Result<Backbone, PipelineError> {
    let mut teacher = fx.public.clone();
    train_backbone(&mut teacher, &fx.dataset.train, &backbone_opts(spec, spec.backbone.teacher_epochs, "teacher"))?;
    Ok(round_backbone(&teacher))
}

/// Joint training of backbone and side branch from the public weights. The result is rounded
/// to checkpoint precision.
pub fn train_victim(spec: &ExperimentSpec, fx: &Fixtures, teacher: &Backbone, config: &Configuration, lambda: f64) -> Result<(ModelState, Vec<EpochCurve>), TrainFailure> {
    let fail = |reason: String, state: ModelState| TrainFailure { reason, epoch: 0, last_state: Box::new(state), curves: Vec::new() };
    let mut model = match ModelState::new(fx.public.clone(), config, seed::derive(spec.seed, "subnet/init")) {
        Ok(m) => m,
        Err(e) => {
            let empty = ModelState::new(fx.public.clone(), &empty_config(config), 0).expect("empty side branch");
            return Err(fail(e.to_string(), empty));
        }
    };
    model.teacher = Some(teacher.clone());
    model.frozen.ree_head = spec.train.freeze_ree_head;
    let (state, curves) = train_poisoned(&model, &fx.dataset, &spec.train_config(lambda))?;
    Ok((round_to_stored(&state), curves))
}

fn empty_config(like: &Configuration) -> Configuration {
    let mut c = like.clone();
    c.blocks.iter_mut().for_each(|b| b.op_type = OpType::Inactive);
    c
}

fn ckpt_meta(spec: &ExperimentSpec, model: &ModelState, lambda: Option<f64>) -> CheckpointMeta {
    let seeds = BTreeMap::from([("master".to_string(), spec.seed)]);
    CheckpointMeta::new(model, Some(spec.data.recipe.clone()), seeds, lambda.map(|l| spec.train_config(l)))
}

fn load_model(run: &RunDir, rel: &str) -> Result<ModelState, PipelineError> {
    let path = run.path(rel);
    let bytes = std::fs::read(&path).map_err(|_| PipelineError::Missing(format!("checkpoint {rel}")))?;
    Ok(decode_checkpoint(&bytes)?.0)
}

// ---------------------------------------------------------------- profile

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub rows: usize,
    pub backbone_ms: f64,
    pub max_oracle_diff_ms: f64,
    pub oracle_ok: bool,
    pub lower_bound_ok: bool,
    pub empty_equals_backbone: bool,
    /// Rows whose sequential baseline is at least the parallel latency.
    pub sequential_not_faster: usize,
}

/// Split for the sequential baseline that keeps as many trailing backbone blocks in the TEE
/// as the configuration has side-branch blocks (at least one).
pub fn matched_split(config: &Configuration) -> usize {
    config.blocks.len() - config.active_count().clamp(1, config.blocks.len())
}

pub const LATENCY_HEADER: [&str; 9] = ["row", "config", "active_blocks", "backbone_ms", "parallel_ms", "oracle_ms", "abs_diff_ms", "sequential_split", "sequential_ms"];

pub fn cmd_profile(loaded: &LoadedSpec, run: &mut RunDir) -> Result<ProfileSummary, PipelineError> {
    let spec = &loaded.spec;
    let io_dims = arch(spec)?.io_dims();
    let profile = &loaded.profile;
    let mut configs = vec![empty_config(&loaded.ranges.minimum())];
    configs.extend((0..spec.latency.samples).map(|i| sample_random(&loaded.ranges, seed::derive(spec.seed, &format!("profile/{i}")))));
    let backbone_ms = profile.backbone_ms();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut summary =
        ProfileSummary { rows: configs.len(), backbone_ms, max_oracle_diff_ms: 0.0, oracle_ok: true, lower_bound_ok: true, empty_equals_backbone: true, sequential_not_faster: 0 };
    for (i, c) in configs.iter().enumerate() {
        let g = parallel_latency(c, profile, &io_dims)?;
        let trace = simulate_schedule(c, profile, &io_dims)?;
        let diff = (g - trace.makespan).abs();
        let split = matched_split(c);
        let seq = sequential_baseline_latency(split, profile, &io_dims)?;
        summary.max_oracle_diff_ms = summary.max_oracle_diff_ms.max(diff);
        summary.oracle_ok &= diff < ORACLE_TOLERANCE_MS;
        summary.lower_bound_ok &= g >= backbone_ms;
        if c.active_count() == 0 {
            summary.empty_equals_backbone &= g == backbone_ms;
        }
        summary.sequential_not_faster += usize::from(seq >= g);
        rows.push(vec![
            i.to_string(),
            c.key(),
            c.active_count().to_string(),
            backbone_ms.to_string(),
            g.to_string(),
            trace.makespan.to_string(),
            diff.to_string(),
            split.to_string(),
            seq.to_string(),
        ]);
        let mut line = serde_json::to_vec(&trace).map_err(|e| PipelineError::Spec(e.to_string()))?;
        line.push(b'\n');
        traces.extend(line);
    }
    run.write("profile/latency.csv", &csv_bytes(&LATENCY_HEADER, &rows)?)?;
    run.write("profile/traces.jsonl", &traces)?;
    run.write("profile/summary.json", &json(&summary)?)?;
    if !summary.oracle_ok {
        return Err(PipelineError::OracleMismatch(format!("max |g - makespan| = {} ms", summary.max_oracle_diff_ms)));
    }
    if !summary.lower_bound_ok || !summary.empty_equals_backbone {
        return Err(PipelineError::OracleMismatch("parallel latency fell below the pure-backbone time".into()));
    }
    run.complete("profile", &["profile/latency.csv", "profile/traces.jsonl", "profile/summary.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub alpha: f64,
    pub h_limit_bytes: u64,
    pub evaluations: usize,
    pub failed: usize,
    pub infeasible_evaluated: usize,
    pub front_size: usize,
    pub hypervolume: f64,
    pub latency_ceiling_ms: f64,
    pub public_accuracy: f64,
    pub selected: String,
    pub selected_accuracy: f64,
    pub selected_latency_ms: f64,
    pub selected_memory_bytes: u64,
}

#[derive(Debug)]
pub struct SearchRun {
    pub outcome: SearchOutcome,
    pub summary: SearchSummary,
}

pub const FRONT_HEADER: [&str; 6] = ["index", "accuracy", "latency_ms", "memory_bytes", "score", "config"];

/// `stop_after` pauses deterministically after that many evaluations (the log stays
/// resumable); `resume` continues an existing log.
pub fn cmd_search(loaded: &LoadedSpec, run: &mut RunDir, resume: bool, stop_after: Option<usize>) -> Result<SearchRun, PipelineError> {
    let spec = &loaded.spec;
    let fx = build_fixtures(spec)?;
    let io_dims = fx.arch.io_dims();
    let public_model = ModelState::new(fx.public.clone(), &empty_config(&loaded.ranges.minimum()), 0)?;
    run.write("fixtures/public.ckpt", &encode_checkpoint(&public_model, &ckpt_meta(spec, &public_model, None))?)?;
    let cache = FeatureCache::build(&fx.public, &fx.dataset, Some(spec.search.train_subset))?;
    let evaluator = CandidateTrainer { cache: &cache, options: spec.search.candidate.clone() };
    let problem = SearchProblem { ranges: &loaded.ranges, profile: &loaded.profile, io_dims: &io_dims };
    let settings = spec.search_settings();
    let header = SearchLogHeader::new(&problem, &settings);
    let log = run.path("search/search_log.jsonl");
    std::fs::create_dir_all(run.path("search")).map_err(|source| PipelineError::Io { path: run.path("search"), source })?;
    let mut journal = if resume { SearchJournal::resume(&log, &header)? } else { SearchJournal::create(&log, &header)? };
    if let Some(n) = stop_after {
        journal = journal.stop_after(n);
    }
    let outcome = run_search(&problem, &evaluator, &settings, &mut journal)?;
    let scores = crate::moo::score(&outcome.front, settings.alpha);
    let rows: Vec<Vec<String>> = outcome
        .front
        .records
        .iter()
        .zip(&scores)
        .map(|(r, s)| {
            let o = r.objectives.expect("front members are evaluated");
            vec![r.index.to_string(), o.accuracy.to_string(), o.latency_ms.to_string(), r.memory.total.to_string(), s.to_string(), r.config.key()]
        })
        .collect();
    run.write("search/front.csv", &csv_bytes(&FRONT_HEADER, &rows)?)?;
    run.write("search/selected.toml", outcome.best.to_toml()?.as_bytes())?;
    let best = &outcome.front.records[outcome.best_position];
    let best_obj = best.objectives.expect("evaluated");
    let summary = SearchSummary {
        alpha: settings.alpha,
        h_limit_bytes: settings.h_limit_bytes,
        evaluations: outcome.records.len(),
        failed: outcome.records.iter().filter(|r| r.failure.is_some()).count(),
        infeasible_evaluated: outcome.records.iter().filter(|r| r.memory.total > settings.h_limit_bytes).count(),
        front_size: outcome.front.records.len(),
        hypervolume: outcome.hypervolume(),
        latency_ceiling_ms: latency_ceiling(&loaded.ranges, &loaded.profile, &io_dims)?,
        public_accuracy: backbone_accuracy(&fx.public, &fx.dataset.test)?,
        selected: outcome.best.key(),
        selected_accuracy: best_obj.accuracy,
        selected_latency_ms: best_obj.latency_ms,
        selected_memory_bytes: best.memory.total,
    };
    run.write("search/summary.json", &json(&summary)?)?;
    run.complete("search", &["fixtures/public.ckpt", "search/search_log.jsonl", "search/front.csv", "search/selected.toml", "search/summary.json"])?;
    Ok(SearchRun { outcome, summary })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub lambda: f64,
    pub chance: f64,
    pub public_accuracy: f64,
    pub teacher_accuracy: f64,
    pub victim_combined_accuracy: f64,
    pub victim_backbone_accuracy: f64,
    pub control_combined_accuracy: f64,
    pub control_backbone_accuracy: f64,
    /// Largest `|beta ce + (1 - beta) kd - lambda adv_ce - total|` over all logged epochs.
    pub bookkeeping_residual: f64,
}

fn curve_rows(curves: &[EpochCurve]) -> Vec<Vec<String>> {
    curves
        .iter()
        .map(|c| vec![c.epoch.to_string(), c.combined_acc.to_string(), c.backbone_acc.to_string(), c.ce.to_string(), c.kd.to_string(), c.adv_ce.to_string(), c.total.to_string()])
        .collect()
}

fn bookkeeping(curves: &[EpochCurve], beta: f64, lambda: f64) -> f64 {
    curves.iter().map(|c| (beta * c.ce + (1.0 - beta) * c.kd - lambda * c.adv_ce - c.total).abs()).fold(0.0, f64::max)
}

fn selected_config(run: &RunDir) -> Result<Configuration, PipelineError> {
    let text = std::fs::read_to_string(run.path("search/selected.toml")).map_err(|_| PipelineError::Missing("search/selected.toml".into()))?;
    Ok(Configuration::from_toml(&text)?)
}

fn load_fixtures(loaded: &LoadedSpec, run: &RunDir) -> Result<Fixtures, PipelineError> {
    run.require("search")?;
    let public = load_model(run, "fixtures/public.ckpt")?.backbone;
    Ok(Fixtures { arch: public.arch.clone(), dataset: build_dataset(&loaded.spec), public })
}

fn record_failure(run: &RunDir, spec: &ExperimentSpec, f: &TrainFailure, lambda: f64) -> PipelineError {
    let report = serde_json::json!({ "lambda": lambda, "epoch": f.epoch, "reason": f.reason, "completed_epochs": f.curves.len() });
    let _ = run.write("train/failure.json", &json(&report).unwrap_or_default());
    if let Ok(bytes) = encode_checkpoint(&f.last_state, &ckpt_meta(spec, &f.last_state, Some(lambda))) {
        let _ = run.write("train/failed.ckpt", &bytes);
    }
    PipelineError::Diverged(f.to_string())
}

pub fn cmd_train(loaded: &LoadedSpec, run: &mut RunDir) -> Result<TrainSummary, PipelineError> {
    let spec = &loaded.spec;
    let fx = load_fixtures(loaded, run)?;
    let config = selected_config(run)?;
    let teacher = train_teacher(spec, &fx)?;
    let lambda = spec.train.lambda;
    let (victim, curves) = train_victim(spec, &fx, &teacher, &config, lambda).map_err(|f| record_failure(run, spec, &f, lambda))?;
    let (control, control_curves) = train_victim(spec, &fx, &teacher, &config, 0.0).map_err(|f| record_failure(run, spec, &f, 0.0))?;
    run.write("train/victim.ckpt", &encode_checkpoint(&victim, &ckpt_meta(spec, &victim, Some(lambda)))?)?;
    run.write("train/control.ckpt", &encode_checkpoint(&control, &ckpt_meta(spec, &control, Some(0.0)))?)?;
    run.write("train/curves.csv", &csv_bytes(&CURVE_HEADER, &curve_rows(&curves))?)?;
    run.write("train/control_curves.csv", &csv_bytes(&CURVE_HEADER, &curve_rows(&control_curves))?)?;
    let test = &fx.dataset.test;
    let beta = spec.train.beta;
    let summary = TrainSummary {
        lambda,
        chance: 1.0 / spec.data.recipe.num_classes as f64,
        public_accuracy: backbone_accuracy(&fx.public, test)?,
        teacher_accuracy: backbone_accuracy(&teacher, test)?,
        victim_combined_accuracy: combined_accuracy(&victim, test)?,
        victim_backbone_accuracy: backbone_accuracy(&victim.backbone, test)?,
        control_combined_accuracy: combined_accuracy(&control, test)?,
        control_backbone_accuracy: backbone_accuracy(&control.backbone, test)?,
        bookkeeping_residual: bookkeeping(&curves, beta, lambda).max(bookkeeping(&control_curves, beta, 0.0)),
    };
    run.write("train/summary.json", &json(&summary)?)?;
    run.complete("train", &["train/victim.ckpt", "train/control.ckpt", "train/curves.csv", "train/control_curves.csv", "train/summary.json"])?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub median_backbone_accuracy: f64,
    pub median_combined_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub points: Vec<SweepPoint>,
    pub tolerance: f64,
    /// Median backbone accuracy never rises by more than `tolerance` as λ grows.
    pub monotone: bool,
}

/// λ-sweep over `train.lambda_sweep` (sorted) and `train.sweep_seeds`, on the selected
/// configuration. Each seed rebuilds its own fixtures.
pub fn cmd_sweep(loaded: &LoadedSpec, run: &mut RunDir) -> Result<SweepSummary, PipelineError> {
    run.require("search")?;
    let config = selected_config(run)?;
    let mut lambdas = loaded.spec.train.lambda_sweep.clone();
    lambdas.sort_by(f64::total_cmp);
    let mut rows = Vec::new();
    let mut per_lambda: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); lambdas.len()];
    for &s in &loaded.spec.train.sweep_seeds {
        let spec = ExperimentSpec { seed: seed::derive(loaded.spec.seed, &format!("sweep/{s}")), ..loaded.spec.clone() };
        let fx = build_fixtures(&spec)?;
        let teacher = train_teacher(&spec, &fx)?;
        for (i, &l) in lambdas.iter().enumerate() {
            let (m, _) = train_victim(&spec, &fx, &teacher, &config, l).map_err(|f| PipelineError::Diverged(f.to_string()))?;
            let b = backbone_accuracy(&m.backbone, &fx.dataset.test)?;
            let c = combined_accuracy(&m, &fx.dataset.test)?;
            per_lambda[i].0.push(b);
            per_lambda[i].1.push(c);
            rows.push(vec![l.to_string(), s.to_string(), c.to_string(), b.to_string()]);
        }
    }
    let points: Vec<SweepPoint> = lambdas
        .iter()
        .zip(&per_lambda)
        .map(|(&lambda, (b, c))| SweepPoint { lambda, median_backbone_accuracy: attack::median(b), median_combined_accuracy: attack::median(c) })
        .collect();
    let monotone = points.windows(2).all(|w| w[1].median_backbone_accuracy <= w[0].median_backbone_accuracy + SWEEP_TOLERANCE);
    let summary = SweepSummary { points, tolerance: SWEEP_TOLERANCE, monotone };
    run.write("sweep/lambda_sweep.csv", &csv_bytes(&["lambda", "seed", "combined_acc", "backbone_acc"], &rows)?)?;
    run.write("sweep/summary.json", &json(&summary)?)?;
    run.complete("sweep", &["sweep/lambda_sweep.csv", "sweep/summary.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- attack

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub query_count: usize,
    pub scenarios: Vec<ScenarioSummary>,
    /// PoisonedREE against the λ = 0 control victim.
    pub control: ScenarioSummary,
}

fn run_reports(bundle: &VictimBundle<'_>, scenarios: &[Exposure], spec: &ExperimentSpec) -> Result<Vec<AttackReport>, PipelineError> {
    let derived: Vec<u64> = spec.attack.seeds.iter().map(|s| seed::derive(spec.seed, &format!("attack/{s}"))).collect();
    let mut reports = attack::run_attack_suite(bundle, scenarios, &derived, &spec.attack_config())?;
    for (r, s) in reports.iter_mut().zip(spec.attack.seeds.iter().cycle()) {
        r.seed = *s;
    }
    Ok(reports)
}

fn report_rows(reports: &[AttackReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| vec![r.scenario.name().to_string(), r.seed.to_string(), r.query_count.to_string(), r.surrogate_accuracy.to_string(), r.victim_accuracy.to_string()])
        .collect()
}

pub fn cmd_attack(loaded: &LoadedSpec, run: &mut RunDir) -> Result<AttackSummary, PipelineError> {
    let spec = &loaded.spec;
    run.require("train")?;
    let fx = load_fixtures(loaded, run)?;
    let victim = load_model(run, "train/victim.ckpt")?;
    let control = load_model(run, "train/control.ckpt")?;
    let unprotected = victim.teacher.clone().ok_or_else(|| PipelineError::Missing("teacher weights in train/victim.ckpt".into()))?;
    let bundle = |v| VictimBundle {
        victim: v,
        unprotected: &unprotected,
        public: &fx.public,
        recipe: &spec.data.recipe,
        train_size: fx.dataset.train.len(),
        test: &fx.dataset.test,
    };
    let reports = run_reports(&bundle(&victim), &spec.attack.scenarios, spec)?;
    let control_reports = run_reports(&bundle(&control), &[Exposure::PoisonedREE], spec)?;
    run.write("attack/attack_report.csv", &csv_bytes(&attack::REPORT_HEADER, &report_rows(&reports))?)?;
    run.write("attack/control_report.csv", &csv_bytes(&attack::REPORT_HEADER, &report_rows(&control_reports))?)?;
    let summary = AttackSummary {
        query_count: spec.attack_config().query_count(fx.dataset.train.len()),
        scenarios: attack::summarize(&reports),
        control: attack::summarize(&control_reports).remove(0),
    };
    run.write("attack/summary.json", &json(&summary)?)?;
    run.complete("attack", &["attack/attack_report.csv", "attack/control_report.csv", "attack/summary.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceFlags {
    pub latency_lower_bound: bool,
    pub combined_accuracy_tolerance: bool,
    pub attack_ordering: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tool_version: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub profile: ProfileSummary,
    pub search: SearchSummary,
    pub selected_sequential_ms: f64,
    pub train: TrainSummary,
    pub attack: AttackSummary,
    pub flags: AcceptanceFlags,
}

fn scenario_median(a: &AttackSummary, e: Exposure) -> Option<f64> {
    a.scenarios.iter().find(|s| s.scenario == e).map(|s| s.median)
}

fn render_text(s: &RunSummary) -> String {
    let mut t = String::new();
    let pass = |b: bool| if b { "PASS" } else { "FAIL" };
    t.push_str(&format!("run summary (tool {})\n\n", s.tool_version));
    t.push_str("latency\n");
    t.push_str(&format!("  profiled configurations   {}\n", s.profile.rows));
    t.push_str(&format!("  max |closed - oracle| ms  {:e}\n", s.profile.max_oracle_diff_ms));
    t.push_str(&format!("  pure backbone ms          {:.4}\n", s.profile.backbone_ms));
    t.push_str(&format!("  selected parallel ms      {:.4}\n", s.search.selected_latency_ms));
    t.push_str(&format!("  selected sequential ms    {:.4}\n\n", s.selected_sequential_ms));
    t.push_str("search\n");
    t.push_str(&format!("  alpha {}  H_limit {} bytes\n", s.search.alpha, s.search.h_limit_bytes));
    t.push_str(&format!("  evaluations {}  front {}  hypervolume {:.6}\n", s.search.evaluations, s.search.front_size, s.search.hypervolume));
    t.push_str(&format!("  a* {}  acc {:.4}  mem {} bytes\n\n", s.search.selected, s.search.selected_accuracy, s.search.selected_memory_bytes));
    t.push_str("accuracy (test split)\n");
    t.push_str(&format!("  chance                    {:.4}\n", s.train.chance));
    t.push_str(&format!("  public backbone           {:.4}\n", s.train.public_accuracy));
    t.push_str(&format!("  teacher                   {:.4}\n", s.train.teacher_accuracy));
    t.push_str(&format!("  combined, lambda={:<8} {:.4}\n", s.train.lambda, s.train.victim_combined_accuracy));
    t.push_str(&format!("  backbone, lambda={:<8} {:.4}\n", s.train.lambda, s.train.victim_backbone_accuracy));
    t.push_str(&format!("  combined, lambda=0        {:.4}\n", s.train.control_combined_accuracy));
    t.push_str(&format!("  backbone, lambda=0        {:.4}\n\n", s.train.control_backbone_accuracy));
    t.push_str(&format!("attack ({} queries)\n", s.attack.query_count));
    for sc in &s.attack.scenarios {
        t.push_str(&format!("  {:<12} median {:.4}  [{:.4}, {:.4}]  n={}\n", sc.scenario.name(), sc.median, sc.min, sc.max, sc.runs));
    }
    let c = &s.attack.control;
    t.push_str(&format!("  lambda=0 exposed trunk median {:.4}  [{:.4}, {:.4}]\n\n", c.median, c.min, c.max));
    t.push_str("checks\n");
    t.push_str(&format!("  latency lower bound          {}\n", pass(s.flags.latency_lower_bound)));
    t.push_str(&format!("  combined accuracy tolerance  {}\n", pass(s.flags.combined_accuracy_tolerance)));
    t.push_str(&format!("  attack ordering              {}\n\n", pass(s.flags.attack_ordering)));
    t.push_str("artifacts\n");
    for (k, v) in &s.artifacts {
        t.push_str(&format!("  {v}  {k}\n"));
    }
    t
}

/// Merges the stage outputs of `run` into `report/summary.json` and `report/summary.txt`.
pub fn cmd_report(run: &mut RunDir) -> Result<RunSummary, PipelineError> {
    let missing: Vec<String> = STAGES[..4].iter().filter(|s| !run.manifest.stages.get(**s).is_some_and(|r| r.complete)).map(|s| s.to_string()).collect();
    if !missing.is_empty() {
        return Err(PipelineError::Incomplete(missing));
    }
    for s in &STAGES[..4] {
        run.require(s)?;
    }
    let profile: ProfileSummary = read_json(run, "profile/summary.json")?;
    let search: SearchSummary = read_json(run, "search/summary.json")?;
    let train: TrainSummary = read_json(run, "train/summary.json")?;
    let attack: AttackSummary = read_json(run, "attack/summary.json")?;
    let header: SearchLogHeader = {
        let text = std::fs::read_to_string(run.path("search/search_log.jsonl")).map_err(|source| PipelineError::Io { path: run.path("search/search_log.jsonl"), source })?;
        let first = text.lines().next().ok_or_else(|| PipelineError::Missing("search log header".into()))?;
        serde_json::from_str(first).map_err(|e| PipelineError::Search(MooError::Journal(e.to_string())))?
    };
    let selected = selected_config(run)?;
    let selected_sequential_ms = sequential_baseline_latency(matched_split(&selected), &header.profile, &header.io_dims)?;
    let selected_parallel = parallel_latency(&selected, &header.profile, &header.io_dims)?;
    estimate_memory(&selected, &header.io_dims).map_err(MooError::from)?;
    let ordering = match (scenario_median(&attack, Exposure::PoisonedREE), scenario_median(&attack, Exposure::BlackBox), scenario_median(&attack, Exposure::NoShield)) {
        (Some(p), Some(b), Some(n)) => p < b && b < n,
        _ => false,
    };
    let flags = AcceptanceFlags {
        latency_lower_bound: profile.lower_bound_ok && profile.empty_equals_backbone && selected_parallel >= profile.backbone_ms,
        combined_accuracy_tolerance: train.victim_combined_accuracy >= train.control_combined_accuracy - 0.03,
        attack_ordering: ordering,
    };
    let mut artifacts = BTreeMap::new();
    for s in &STAGES[..4] {
        for (k, v) in &run.manifest.stages[*s].artifacts {
            artifacts.insert(k.clone(), v.clone());
        }
    }
    let summary = RunSummary {
        tool_version: run.manifest.tool_version.clone(),
        inputs: run.manifest.inputs.clone(),
        artifacts,
        profile,
        search,
        selected_sequential_ms,
        train,
        attack,
        flags,
    };
    run.write("report/summary.json", &json(&summary)?)?;
    run.write("report/summary.txt", render_text(&summary).as_bytes())?;
    run.complete("report", &["report/summary.json", "report/summary.txt"])?;
    Ok(summary)
}
