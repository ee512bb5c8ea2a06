//! Two-step model stealing: build a shadow from public and exposed weights, then fine-tune it
//! on hard labels obtained by querying the deployed model.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::model::argmax_rows;
use crate::nn::train::backbone_accuracy;
use crate::nn::{forward_combined, generate_pool, train_backbone, Backbone, DataRecipe, ModelState, NnError, SgdOptions, Split};
use crate::seed;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("query fraction {0} outside (0, 1]")]
    QueryFraction(f64),
    #[error("query pool holds {available} inputs, {requested} requested")]
    PoolExhausted { requested: usize, available: usize },
    #[error("empty query set")]
    NoQueries,
    #[error("surrogate training failed: {0}")]
    Training(#[from] NnError),
    #[error("report io: {0}")]
    Io(String),
}

/// What the attacker can read before querying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Exposure {
    /// Everything runs in the REE: the unprotected model is copied verbatim.
    NoShield,
    /// Nothing leaks: public pre-trained weights only.
    BlackBox,
    /// The REE-resident backbone of the protected model leaks.
    PoisonedREE,
}

impl Exposure {
    pub const ALL: [Exposure; 3] = [Exposure::NoShield, Exposure::BlackBox, Exposure::PoisonedREE];

    pub fn name(self) -> &'static str {
        match self {
            Exposure::NoShield => "NoShield",
            Exposure::BlackBox => "BlackBox",
            Exposure::PoisonedREE => "PoisonedREE",
        }
    }
}

impl std::str::FromStr for Exposure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Exposure::ALL.into_iter().find(|e| e.name().eq_ignore_ascii_case(s)).ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

/// Attacker budget. The surrogate is trained with the same plain gradient descent as the
/// defender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub query_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_threshold: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { query_fraction: 0.01, epochs: 20, learning_rate: 0.1, batch_size: 32, clip_threshold: 2.0 }
    }
}

impl AttackConfig {
    pub fn check(&self) -> Result<(), AttackError> {
        if !(self.query_fraction > 0.0 && self.query_fraction <= 1.0) {
            return Err(AttackError::QueryFraction(self.query_fraction));
        }
        Ok(())
    }

    /// `round(query_fraction * train_size)`.
    pub fn query_count(&self, train_size: usize) -> usize {
        (self.query_fraction * train_size as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario: Exposure,
    pub seed: u64,
    pub query_count: usize,
    pub surrogate_accuracy: f64,
    pub victim_accuracy: f64,
}

/// Everything an attack run needs. `unprotected` is the model a NoShield deployment would
/// expose; `victim` is the protected deployment whose REE backbone leaks under PoisonedREE.
pub struct VictimBundle<'a> {
    pub victim: &'a ModelState,
    pub unprotected: &'a Backbone,
    pub public: &'a Backbone,
    pub recipe: &'a DataRecipe,
    pub train_size: usize,
    pub test: &'a Split,
}

fn same_arch(a: &Backbone, b: &Backbone) -> Result<(), AttackError> {
    if a.arch != b.arch {
        return Err(AttackError::Architecture(format!("{:?} vs {:?}", a.arch, b.arch)));
    }
    Ok(())
}

/// Step 1. `exposed` is the REE-visible backbone of the scenario's deployment.
pub fn init_shadow(public: &Backbone, exposed: &Backbone, exposure: Exposure) -> Result<Backbone, AttackError> {
    same_arch(public, exposed)?;
    Ok(match exposure {
        Exposure::NoShield => exposed.clone(),
        Exposure::BlackBox => public.clone(),
        Exposure::PoisonedREE => {
            let mut shadow = public.clone();
            shadow.blocks = exposed.blocks.clone();
            shadow.head = exposed.head.clone();
            shadow
        }
    })
}

/// Step 2a: hard labels from the protected model's full forward path for the first `count`
/// pool inputs.
pub fn query_victim(victim: &ModelState, pool: &Split, count: usize) -> Result<Split, AttackError> {
    if count > pool.len() {
        return Err(AttackError::PoolExhausted { requested: count, available: pool.len() });
    }
    let idx: Vec<usize> = (0..count).collect();
    let inputs = pool.inputs.gather_rows(&idx);
    let labels = if count == 0 { Vec::new() } else { argmax_rows(&forward_combined(victim, &inputs)?) };
    Ok(Split { inputs, labels })
}

/// Step 2b: fine-tunes every shadow parameter with cross-entropy on the queried labels.
pub fn train_surrogate(shadow: &Backbone, queries: &Split, config: &AttackConfig, seed: u64) -> Result<Backbone, AttackError> {
    if queries.is_empty() {
        return Err(AttackError::NoQueries);
    }
    let mut surrogate = shadow.clone();
    let opts = SgdOptions {
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        batch_size: config.batch_size,
        clip_threshold: config.clip_threshold,
        seed,
    };
    train_backbone(&mut surrogate, queries, &opts)?;
    Ok(surrogate)
}

/// One scenario and seed.
pub fn run_attack(bundle: &VictimBundle<'_>, exposure: Exposure, config: &AttackConfig, attack_seed: u64) -> Result<AttackReport, AttackError> {
    config.check()?;
    let query_count = config.query_count(bundle.train_size);
    let (surrogate_accuracy, victim_accuracy) = match exposure {
        Exposure::NoShield => {
            // direct copy, no training needed
            let shadow = init_shadow(bundle.public, bundle.unprotected, exposure)?;
            let acc = backbone_accuracy(&shadow, bundle.test)?;
            (acc, acc)
        }
        _ => {
            let shadow = init_shadow(bundle.public, &bundle.victim.backbone, exposure)?;
            let pool = generate_pool(bundle.recipe, seed::derive(attack_seed, "attack/aux"), query_count);
            let queries = query_victim(bundle.victim, &pool, query_count)?;
            let surrogate = train_surrogate(&shadow, &queries, config, seed::derive(attack_seed, "attack/surrogate"))?;
            let victim_acc = crate::nn::combined_accuracy(bundle.victim, bundle.test)?;
            (backbone_accuracy(&surrogate, bundle.test)?, victim_acc)
        }
    };
    Ok(AttackReport { scenario: exposure, seed: attack_seed, query_count, surrogate_accuracy, victim_accuracy })
}

/// Every scenario under every seed, in scenario-major order.
pub fn run_attack_suite(bundle: &VictimBundle<'_>, scenarios: &[Exposure], seeds: &[u64], config: &AttackConfig) -> Result<Vec<AttackReport>, AttackError> {
    let jobs: Vec<(Exposure, u64)> = scenarios.iter().flat_map(|&e| seeds.iter().map(move |&s| (e, s))).collect();
    jobs.par_iter().map(|&(e, s)| run_attack(bundle, e, config, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Exposure,
    pub runs: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median and spread of surrogate accuracy per scenario, in first-seen order.
pub fn summarize(reports: &[AttackReport]) -> Vec<ScenarioSummary> {
    let mut order: Vec<Exposure> = Vec::new();
    for r in reports {
        if !order.contains(&r.scenario) {
            order.push(r.scenario);
        }
    }
    order
        .into_iter()
        .map(|s| {
            let accs: Vec<f64> = reports.iter().filter(|r| r.scenario == s).map(|r| r.surrogate_accuracy).collect();
            ScenarioSummary {
                scenario: s,
                runs: accs.len(),
                median: median(&accs),
                min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

pub const REPORT_HEADER: [&str; 5] = ["scenario", "seed", "query_count", "surrogate_acc", "victim_acc"];

pub fn write_report_csv(path: &Path, reports: &[AttackReport]) -> Result<(), AttackError> {
    let io = |e: csv::Error| AttackError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(REPORT_HEADER).map_err(io)?;
    for r in reports {
        w.write_record([r.scenario.name().to_string(), r.seed.to_string(), r.query_count.to_string(), r.surrogate_accuracy.to_string(), r.victim_accuracy.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| AttackError::Io(e.to_string()))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<AttackReport>, AttackError> {
    let io = |e: csv::Error| AttackError::Io(e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(io)?;
        let field = |i: usize| row.get(i).ok_or_else(|| AttackError::Io(format!("missing column {}", REPORT_HEADER[i])));
        let num = |i: usize| -> Result<f64, AttackError> { field(i)?.parse().map_err(|e| AttackError::Io(format!("{}: {e}", REPORT_HEADER[i]))) };
        out.push(AttackReport {
            scenario: field(0)?.parse().map_err(AttackError::Io)?,
            seed: num(1)? as u64,
            query_count: num(2)? as usize,
            surrogate_accuracy: num(3)?,
            victim_accuracy: num(4)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_count_rounds() {
        let c = AttackConfig::default();
        assert_eq!(c.query_count(1600), 16);
        assert_eq!(c.query_count(1650), 17);
        assert!(AttackConfig { query_fraction: 0.0, ..c.clone() }.check().is_err());
        assert!(AttackConfig { query_fraction: 1.5, ..c }.check().is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn scenario_names_parse() {
        for e in Exposure::ALL {
            assert_eq!(e.name().parse::<Exposure>().unwrap(), e);
        }
        assert!("open".parse::<Exposure>().is_err());
    }
}
