//! Batch Bayesian optimization loop with an append-only, resumable record log.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gp::{fit_gp_records, GpFitOptions, GpSurrogate, Objective};
use super::pareto::{pareto_front, select_index};
use super::{nehvi_acquisition, EvaluationRecord, MooError, ObjectivePoint, ParetoFront, ReferencePoint, SearchSettings};
use crate::latency::{latency_ceiling, parallel_latency, CostProfile};
use crate::search_space::{encode, estimate_memory, sample_with, BackboneDims, Configuration, SearchFactorRanges};
use crate::seed;

pub const SEARCH_LOG_VERSION: u32 = 1;

/// Draw attempts per requested candidate before the feasible region counts as exhausted.
const DRAWS_PER_CANDIDATE: usize = 64;

/// Accuracy of one candidate. Must be a pure function of `(config, seed)`.
pub trait CandidateEvaluator: Sync {
    fn evaluate(&self, config: &Configuration, seed: u64) -> Result<f64, String>;
}

impl<F> CandidateEvaluator for F
where
    F: Fn(&Configuration, u64) -> Result<f64, String> + Sync,
{
    fn evaluate(&self, config: &Configuration, seed: u64) -> Result<f64, String> {
        self(config, seed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SearchProblem<'a> {
    pub ranges: &'a SearchFactorRanges,
    pub profile: &'a CostProfile,
    pub io_dims: &'a BackboneDims,
}

impl SearchProblem<'_> {
    pub fn check(&self) -> Result<(), MooError> {
        self.ranges.check()?;
        self.profile.check()?;
        if self.io_dims.blocks.len() != self.ranges.num_blocks || self.profile.num_blocks() != self.ranges.num_blocks {
            return Err(MooError::InvalidSettings(format!(
                "ranges have {} blocks, profile {}, io dims {}",
                self.ranges.num_blocks,
                self.profile.num_blocks(),
                self.io_dims.blocks.len()
            )));
        }
        Ok(())
    }

    /// Accuracy floor 0 and the worst-case latency of the space.
    pub fn reference_point(&self) -> Result<ReferencePoint, MooError> {
        Ok(ReferencePoint { accuracy_floor: 0.0, latency_ceiling: latency_ceiling(self.ranges, self.profile, self.io_dims)? })
    }

    fn is_feasible(&self, config: &Configuration, h_limit: u64) -> bool {
        estimate_memory(config, self.io_dims).map(|m| m.total <= h_limit).unwrap_or(false)
    }
}

/// Everything `propose_batch` needs between rounds.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub records: Vec<EvaluationRecord>,
    pub reference: ReferencePoint,
    pub gp_accuracy: Option<GpSurrogate>,
    pub gp_latency: Option<GpSurrogate>,
    evaluated: HashSet<String>,
}

impl SearchState {
    pub fn new(reference: ReferencePoint) -> Self {
        SearchState { records: Vec::new(), reference, gp_accuracy: None, gp_latency: None, evaluated: HashSet::new() }
    }

    pub fn push(&mut self, record: EvaluationRecord) {
        self.evaluated.insert(record.config.key());
        self.records.push(record);
    }

    pub fn was_evaluated(&self, config: &Configuration) -> bool {
        self.evaluated.contains(&config.key())
    }

    fn refit(&mut self, settings: &SearchSettings, round: usize) -> Result<(), MooError> {
        let usable = self.records.iter().filter(|r| r.is_usable()).count();
        if usable < 2 {
            self.gp_accuracy = None;
            self.gp_latency = None;
            return Ok(());
        }
        let fit = |objective: Objective, prev: &Option<GpSurrogate>, label: &str| {
            let opts = GpFitOptions {
                sparsity_tau: settings.sparsity_tau,
                seed: seed::derive(settings.seed, &format!("gp/{label}/{round}")),
                warm_start: prev.as_ref().map(|g| g.log_hyperparameters()),
                ..GpFitOptions::default()
            };
            fit_gp_records(&self.records, objective, &opts)
        };
        let a = fit(Objective::Accuracy, &self.gp_accuracy, "accuracy")?;
        let l = fit(Objective::Latency, &self.gp_latency, "latency")?;
        self.gp_accuracy = Some(a);
        self.gp_latency = Some(l);
        Ok(())
    }
}

/// Up to `count` distinct, feasible, not yet evaluated configurations in canonical form.
fn feasible_pool(
    problem: &SearchProblem,
    state: &SearchState,
    h_limit: u64,
    count: usize,
    rng: &mut seed::Rng,
) -> Result<Vec<Configuration>, MooError> {
    let draws = count * DRAWS_PER_CANDIDATE;
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    for _ in 0..draws {
        let c = sample_with(problem.ranges, rng).canonical(problem.ranges);
        if state.was_evaluated(&c) || !problem.is_feasible(&c, h_limit) || !seen.insert(c.key()) {
            continue;
        }
        pool.push(c);
        if pool.len() == count {
            break;
        }
    }
    if pool.is_empty() {
        return Err(MooError::Exhausted { draws });
    }
    Ok(pool)
}

/// Next batch of candidates. Without fitted surrogates this is a feasible random sample;
/// otherwise a sequential-greedy NEHVI argmax over a random feasible pool, each pick
/// conditioned on posterior-mean fantasies of the earlier ones. Never repeats an evaluated
/// configuration and never returns duplicates; may return fewer than `batch_size` when the
/// pool runs dry.
pub fn propose_batch(
    problem: &SearchProblem,
    state: &SearchState,
    settings: &SearchSettings,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Configuration>, MooError> {
    let mut rng = seed::rng(seed, "search/pool");
    let (gp_a, gp_l) = match (&state.gp_accuracy, &state.gp_latency) {
        (Some(a), Some(l)) => (a.clone(), l.clone()),
        _ => return feasible_pool(problem, state, settings.h_limit_bytes, batch_size, &mut rng),
    };
    let mut pool = feasible_pool(problem, state, settings.h_limit_bytes, settings.pool_size.max(batch_size), &mut rng)?;
    let mut encoded: Vec<Vec<f64>> = pool.iter().map(|c| encode(c, problem.ranges)).collect::<Result<_, _>>()?;
    let mut baseline: Vec<Vec<f64>> = match pareto_front(&state.records, state.reference) {
        Ok(front) => front.records.iter().map(|r| r.encoded.clone()).collect(),
        Err(MooError::EmptyFront) => Vec::new(),
        Err(e) => return Err(e),
    };
    let (mut gp_a, mut gp_l) = (gp_a, gp_l);
    let mut batch = Vec::with_capacity(batch_size);
    for j in 0..batch_size {
        if pool.is_empty() {
            break;
        }
        let scores = nehvi_acquisition(
            &gp_a,
            &gp_l,
            &encoded,
            &baseline,
            state.reference,
            settings.mc_samples,
            seed::derive(seed, &format!("search/nehvi/{j}")),
        )?;
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        let x = encoded.swap_remove(best);
        batch.push(pool.swap_remove(best));
        if j + 1 < batch_size {
            let (ma, _) = gp_a.predict(&x)?;
            let (ml, _) = gp_l.predict(&x)?;
            gp_a = gp_a.condition_on(&x, ma)?;
            gp_l = gp_l.condition_on(&x, ml)?;
        }
        baseline.push(x);
    }
    Ok(batch)
}

/// First line of a search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchLogHeader {
    pub version: u32,
    pub settings: SearchSettings,
    pub ranges: SearchFactorRanges,
    pub profile: CostProfile,
    pub io_dims: BackboneDims,
}

impl SearchLogHeader {
    pub fn new(problem: &SearchProblem, settings: &SearchSettings) -> Self {
        SearchLogHeader {
            version: SEARCH_LOG_VERSION,
            settings: settings.clone(),
            ranges: problem.ranges.clone(),
            profile: problem.profile.clone(),
            io_dims: problem.io_dims.clone(),
        }
    }
}

/// Record sink plus the records recovered from an earlier, interrupted run.
pub struct SearchJournal {
    replay: Vec<EvaluationRecord>,
    sink: Option<BufWriter<File>>,
    stop_after: Option<usize>,
}

fn journal_err(e: impl std::fmt::Display) -> MooError {
    MooError::Journal(e.to_string())
}

impl SearchJournal {
    /// Keeps nothing on disk.
    pub fn in_memory() -> Self {
        SearchJournal { replay: Vec::new(), sink: None, stop_after: None }
    }

    /// Starts a fresh log at `path`, replacing any existing file.
    pub fn create(path: &Path, header: &SearchLogHeader) -> Result<Self, MooError> {
        let mut w = BufWriter::new(File::create(path).map_err(journal_err)?);
        writeln!(w, "{}", serde_json::to_string(header).map_err(journal_err)?).map_err(journal_err)?;
        w.flush().map_err(journal_err)?;
        Ok(SearchJournal { replay: Vec::new(), sink: Some(w), stop_after: None })
    }

    /// Reopens the log at `path` for appending. The header must match; a torn final line
    /// is dropped. A missing file starts a fresh log.
    pub fn resume(path: &Path, header: &SearchLogHeader) -> Result<Self, MooError> {
        if !path.exists() {
            return Self::create(path, header);
        }
        let lines: Vec<String> =
            BufReader::new(File::open(path).map_err(journal_err)?).lines().collect::<Result<_, _>>().map_err(journal_err)?;
        let first = lines.first().ok_or_else(|| journal_err("empty log"))?;
        let found: SearchLogHeader = serde_json::from_str(first).map_err(|e| journal_err(format!("bad header: {e}")))?;
        if found.version != SEARCH_LOG_VERSION {
            return Err(journal_err(format!("log version {} is not {SEARCH_LOG_VERSION}", found.version)));
        }
        if &found != header {
            return Err(journal_err("log header does not match the current inputs"));
        }
        let mut replay = Vec::new();
        for (n, line) in lines.iter().enumerate().skip(1) {
            match serde_json::from_str::<EvaluationRecord>(line) {
                Ok(r) if r.index == replay.len() => replay.push(r),
                Ok(r) => return Err(journal_err(format!("record {} found at position {}", r.index, replay.len()))),
                Err(_) if n + 1 == lines.len() => break,
                Err(e) => return Err(journal_err(format!("line {}: {e}", n + 1))),
            }
        }
        // rewrite without any torn tail, then append from there
        let mut body = String::new();
        body.push_str(first);
        body.push('\n');
        for r in &replay {
            body.push_str(&serde_json::to_string(r).map_err(journal_err)?);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(journal_err)?;
        let file = OpenOptions::new().append(true).open(path).map_err(journal_err)?;
        Ok(SearchJournal { replay, sink: Some(BufWriter::new(file)), stop_after: None })
    }

    /// Makes the search stop with [`MooError::Paused`] once `n` records exist in total.
    pub fn stop_after(mut self, n: usize) -> Self {
        self.stop_after = Some(n);
        self
    }

    pub fn replayed(&self) -> usize {
        self.replay.len()
    }

    fn append(&mut self, record: &EvaluationRecord) -> Result<(), MooError> {
        if let Some(w) = self.sink.as_mut() {
            writeln!(w, "{}", serde_json::to_string(record).map_err(journal_err)?).map_err(journal_err)?;
            w.flush().map_err(journal_err)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub records: Vec<EvaluationRecord>,
    pub front: ParetoFront,
    /// Index into `front.records` of `best`.
    pub best_position: usize,
    pub best: Configuration,
}

impl SearchOutcome {
    pub fn hypervolume(&self) -> f64 {
        super::hypervolume_clipped(&self.front.points(), self.front.reference_point)
    }
}

fn evaluate_one(
    problem: &SearchProblem,
    evaluator: &dyn CandidateEvaluator,
    settings: &SearchSettings,
    config: &Configuration,
    index: usize,
) -> Result<EvaluationRecord, MooError> {
    let memory = estimate_memory(config, problem.io_dims)?;
    let encoded = encode(config, problem.ranges)?;
    let epoch_seed = seed::derive(settings.seed, &format!("search/eval/{index}"));
    let feasible = memory.total <= settings.h_limit_bytes;
    let mut record =
        EvaluationRecord { index, config: config.clone(), encoded, objectives: None, memory, feasible, failure: None, epoch_seed };
    if !feasible {
        return Ok(record);
    }
    let latency = parallel_latency(config, problem.profile, problem.io_dims)?;
    match evaluator.evaluate(config, epoch_seed) {
        Ok(a) if a.is_finite() && (0.0..=1.0).contains(&a) => record.objectives = Some(ObjectivePoint::new(a, latency)),
        Ok(a) => record.failure = Some(format!("accuracy {a} outside [0, 1]")),
        Err(e) => record.failure = Some(e),
    }
    Ok(record)
}

/// Evaluates a batch concurrently and merges results in candidate order. Records already
/// present in the journal are taken from it after checking they describe the same candidate.
fn run_batch(
    problem: &SearchProblem,
    evaluator: &dyn CandidateEvaluator,
    settings: &SearchSettings,
    state: &mut SearchState,
    journal: &mut SearchJournal,
    batch: Vec<Configuration>,
) -> Result<(), MooError> {
    let start = state.records.len();
    let mut batch = batch;
    if let Some(stop) = journal.stop_after {
        batch.truncate(stop.saturating_sub(start));
    }
    let fresh: Vec<Result<EvaluationRecord, MooError>> = batch
        .par_iter()
        .enumerate()
        .map(|(j, c)| match journal.replay.get(start + j) {
            Some(r) => {
                if r.config != *c {
                    return Err(journal_err(format!("record {} does not match the replayed proposal", start + j)));
                }
                Ok(r.clone())
            }
            None => evaluate_one(problem, evaluator, settings, c, start + j),
        })
        .collect();
    for (j, r) in fresh.into_iter().enumerate() {
        let r = r?;
        if start + j >= journal.replay.len() {
            journal.append(&r)?;
        }
        state.push(r);
    }
    if journal.stop_after.is_some_and(|s| state.records.len() >= s) {
        return Err(MooError::Paused { evaluations: state.records.len() });
    }
    Ok(())
}

/// `init_samples` random feasible evaluations, then `iterations` rounds of
/// propose, evaluate and refit. Stops early if the feasible space is used up.
pub fn run_search(
    problem: &SearchProblem,
    evaluator: &dyn CandidateEvaluator,
    settings: &SearchSettings,
    journal: &mut SearchJournal,
) -> Result<SearchOutcome, MooError> {
    settings.check()?;
    problem.check()?;
    let mut state = SearchState::new(problem.reference_point()?);
    match propose_batch(problem, &state, settings, settings.init_samples, seed::derive(settings.seed, "search/init")) {
        Ok(batch) => run_batch(problem, evaluator, settings, &mut state, journal, batch)?,
        Err(MooError::Exhausted { .. }) => return Err(MooError::EmptyFront),
        Err(e) => return Err(e),
    }
    for round in 0..settings.iterations {
        state.refit(settings, round)?;
        let batch =
            match propose_batch(problem, &state, settings, settings.batch_size, seed::derive(settings.seed, &format!("search/round/{round}"))) {
                Ok(b) => b,
                Err(MooError::Exhausted { .. }) => break,
                Err(e) => return Err(e),
            };
        run_batch(problem, evaluator, settings, &mut state, journal, batch)?;
    }
    if journal.replay.len() > state.records.len() {
        return Err(journal_err(format!("log holds {} records but the run produced {}", journal.replay.len(), state.records.len())));
    }
    let front = pareto_front(&state.records, state.reference)?;
    let best_position = select_index(&front, settings.alpha)?;
    let best = front.records[best_position].config.clone();
    Ok(SearchOutcome { records: state.records, front, best_position, best })
}

/// Random-search baseline: `budget` feasible random evaluations with no surrogate.
pub fn random_search(
    problem: &SearchProblem,
    evaluator: &dyn CandidateEvaluator,
    settings: &SearchSettings,
    budget: usize,
) -> Result<SearchOutcome, MooError> {
    let s = SearchSettings { init_samples: budget, iterations: 0, ..settings.clone() };
    run_search(problem, evaluator, &s, &mut SearchJournal::in_memory())
}
