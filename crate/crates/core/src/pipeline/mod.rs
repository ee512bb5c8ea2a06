//! End-to-end orchestration: profile, search, train, attack and report, each reading its
//! inputs from the run directory and recording its outputs in a digest manifest.

mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{AttackConfig, AttackError, Exposure};
use crate::docfile::DocError;
use crate::latency::{CostProfile, LatencyError};
use crate::moo::{MooError, SearchSettings};
use crate::nn::{CandidateOptions, DataRecipe, NnError, TrainConfig};
use crate::search_space::SearchFactorRanges;
use crate::seed;

pub use stages::{
    build_dataset, build_fixtures, cmd_attack, cmd_profile, cmd_report, cmd_search, cmd_sweep, cmd_train, matched_split, pretrain_public, train_teacher,
    train_victim, AcceptanceFlags, AttackSummary, Fixtures, ProfileSummary, RunSummary, SearchRun, SearchSummary, SweepPoint, SweepSummary, TrainSummary,
};

pub const SPEC_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("search found no feasible configuration: {0}")]
    Infeasible(MooError),
    #[error(transparent)]
    Search(MooError),
    #[error("latency oracle mismatch: {0}")]
    OracleMismatch(String),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Nn(NnError),
    #[error(transparent)]
    Attack(AttackError),
    #[error("missing stage output: {0}")]
    Missing(String),
    #[error("artifact {path} does not match its manifest digest")]
    Digest { path: String },
    #[error("incomplete run, missing stages: {0:?}")]
    Incomplete(Vec<String>),
}

impl PipelineError {
    /// Process exit status: 0 is success, distinct codes for the gating failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Spec(_) | PipelineError::Doc(_) => 2,
            PipelineError::Infeasible(_) => 3,
            PipelineError::Diverged(_) => 4,
            PipelineError::OracleMismatch(_) => 5,
            PipelineError::Missing(_) | PipelineError::Digest { .. } | PipelineError::Incomplete(_) => 6,
            _ => 1,
        }
    }
}

impl From<MooError> for PipelineError {
    fn from(e: MooError) -> Self {
        match e {
            MooError::EmptyFront => PipelineError::Infeasible(e),
            e => PipelineError::Search(e),
        }
    }
}

impl From<NnError> for PipelineError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Diverged { .. } => PipelineError::Diverged(e.to_string()),
            e => PipelineError::Nn(e),
        }
    }
}

impl From<AttackError> for PipelineError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Training(NnError::Diverged { .. }) => PipelineError::Diverged(e.to_string()),
            e => PipelineError::Attack(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub recipe: DataRecipe,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Held-out public pre-training set size (before class filtering).
    pub public_train: usize,
    /// Public pre-training sees only classes `0..public_classes`.
    pub public_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub depth: usize,
    pub width: usize,
    pub pretrain_epochs: usize,
    pub teacher_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    pub alpha: f64,
    pub h_limit_bytes: u64,
    pub batch_size: usize,
    pub iterations: usize,
    pub init_samples: usize,
    pub mc_samples: usize,
    pub pool_size: usize,
    pub sparsity_tau: f64,
    /// Training samples used to score each candidate.
    pub train_subset: usize,
    pub candidate: CandidateOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub beta: f64,
    pub lambda: f64,
    pub kd_temperature: f64,
    pub learning_rate: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Keep the REE head at its public weights during joint training.
    pub freeze_ree_head: bool,
    pub lambda_sweep: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub scenarios: Vec<Exposure>,
    pub seeds: Vec<u64>,
    pub query_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    /// Random configurations profiled in addition to the empty one.
    pub samples: usize,
}

/// The single experiment file. Paths are relative to the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub ranges: PathBuf,
    pub profile: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub data: DataSpec,
    pub backbone: BackboneSpec,
    pub latency: ProfileSpec,
    pub search: SearchSpec,
    pub train: TrainSpec,
    pub attack: AttackSpec,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, DocError> {
        crate::docfile::parse(text, "experiment spec", SPEC_VERSION)
    }

    pub fn to_toml(&self) -> Result<String, DocError> {
        crate::docfile::render(self, "experiment spec", SPEC_VERSION)
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Spec(m));
        let d = &self.data;
        if d.train == 0 || d.val == 0 || d.test == 0 || d.public_train == 0 {
            return bad("data split sizes must be positive".into());
        }
        if d.public_classes == 0 || d.public_classes > d.recipe.num_classes {
            return bad(format!("public_classes must lie in 1..={}", d.recipe.num_classes));
        }
        if self.backbone.depth == 0 || self.backbone.width == 0 || self.backbone.batch_size == 0 {
            return bad("backbone depth, width and batch_size must be positive".into());
        }
        if self.search.train_subset == 0 || self.search.candidate.batch_size == 0 {
            return bad("search.train_subset and candidate batch_size must be positive".into());
        }
        self.train_config(self.train.lambda).check().map_err(|e| PipelineError::Spec(e.to_string()))?;
        if self.train.lambda_sweep.iter().any(|l| !(*l >= 0.0)) {
            return bad("lambda_sweep values must be >= 0".into());
        }
        self.attack_config().check().map_err(|e| PipelineError::Spec(e.to_string()))?;
        if self.attack.seeds.is_empty() || self.attack.scenarios.is_empty() {
            return bad("attack needs at least one scenario and one seed".into());
        }
        self.search_settings().check().map_err(|e| PipelineError::Spec(e.to_string()))
    }

    pub fn search_settings(&self) -> SearchSettings {
        let s = &self.search;
        SearchSettings {
            alpha: s.alpha,
            h_limit_bytes: s.h_limit_bytes,
            batch_size: s.batch_size,
            iterations: s.iterations,
            init_samples: s.init_samples,
            mc_samples: s.mc_samples,
            seed: seed::derive(self.seed, "search"),
            pool_size: s.pool_size,
            sparsity_tau: s.sparsity_tau,
        }
    }

    pub fn train_config(&self, lambda: f64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            beta: t.beta,
            lambda,
            kd_temperature: t.kd_temperature,
            learning_rate: t.learning_rate,
            clip_threshold: t.clip_threshold,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: seed::derive(self.seed, "train/poison"),
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.attack;
        AttackConfig {
            query_fraction: a.query_fraction,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            batch_size: a.batch_size,
            clip_threshold: a.clip_threshold,
        }
    }
}

/// A spec with its referenced documents resolved and digested.
#[derive(Debug, Clone)]
pub struct LoadedSpec {
    pub spec: ExperimentSpec,
    pub ranges: SearchFactorRanges,
    pub profile: CostProfile,
    /// Digests of the effective spec and every referenced input.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, PipelineError> {
    std::fs::read(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    String::from_utf8(read(path)?).map_err(|e| PipelineError::Spec(format!("{}: {e}", path.display())))
}

impl LoadedSpec {
    /// Reads the spec and the files it references. `seed_override` replaces the master seed.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, PipelineError> {
        let mut spec = ExperimentSpec::from_toml(&read_text(path)?)?;
        if let Some(s) = seed_override {
            spec.seed = s;
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let ranges_path = dir.join(&spec.ranges);
        let profile_path = dir.join(&spec.profile);
        let ranges_text = read_text(&ranges_path)?;
        let profile_text = read_text(&profile_path)?;
        let ranges = SearchFactorRanges::from_toml(&ranges_text)?;
        let profile = CostProfile::from_toml(&profile_text)?;
        Self::from_parts(spec, ranges, profile, &ranges_text, &profile_text)
    }

    /// In-memory variant used by tests and embedders.
    pub fn from_parts(spec: ExperimentSpec, ranges: SearchFactorRanges, profile: CostProfile, ranges_text: &str, profile_text: &str) -> Result<Self, PipelineError> {
        spec.check()?;
        ranges.check().map_err(|e| PipelineError::Spec(format!("ranges: {e}")))?;
        profile.check()?;
        if ranges.num_blocks != spec.backbone.depth || profile.num_blocks() != spec.backbone.depth {
            return Err(PipelineError::Spec(format!(
                "backbone depth {} but ranges cover {} blocks and the profile {}",
                spec.backbone.depth,
                ranges.num_blocks,
                profile.num_blocks()
            )));
        }
        let inputs = BTreeMap::from([
            ("spec".to_string(), sha256_hex(spec.to_toml()?.as_bytes())),
            ("ranges".to_string(), sha256_hex(ranges_text.as_bytes())),
            ("profile".to_string(), sha256_hex(profile_text.as_bytes())),
        ]);
        Ok(LoadedSpec { spec, ranges, profile, inputs })
    }
}

pub const STAGES: [&str; 5] = ["profile", "search", "train", "attack", "report"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub complete: bool,
    /// Run-relative path to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Output directory plus its manifest. All artifact writes go through here.
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Opens `root`, starting a fresh manifest when none exists. A manifest written for
    /// different inputs is rejected.
    pub fn open(root: &Path, loaded: &LoadedSpec) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(root).map_err(|source| PipelineError::Io { path: root.to_path_buf(), source })?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let m: RunManifest = serde_json::from_slice(&read(&path)?).map_err(|e| PipelineError::Spec(format!("{}: {e}", path.display())))?;
            if m.inputs != loaded.inputs {
                return Err(PipelineError::Spec(format!("{} was produced from different inputs; use a fresh output directory", root.display())));
            }
            m
        } else {
            RunManifest { tool_version: TOOL_VERSION.to_string(), inputs: loaded.inputs.clone(), stages: BTreeMap::new() }
        };
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    /// Opens an existing run for reading only (the report stage).
    pub fn open_existing(root: &Path) -> Result<Self, PipelineError> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(PipelineError::Missing(format!("{} has no {MANIFEST_FILE}", root.display())));
        }
        let manifest = serde_json::from_slice(&read(&path)?).map_err(|e| PipelineError::Spec(format!("{}: {e}", path.display())))?;
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<String, PipelineError> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| PipelineError::Io { path: parent.to_path_buf(), source })?;
        }
        std::fs::write(&path, bytes).map_err(|source| PipelineError::Io { path, source })?;
        Ok(sha256_hex(bytes))
    }

    pub fn digest_file(&self, rel: &str) -> Result<String, PipelineError> {
        Ok(sha256_hex(&read(&self.path(rel))?))
    }

    /// Marks `stage` complete with the digests of `artifacts` as they are on disk now.
    pub fn complete(&mut self, stage: &str, artifacts: &[&str]) -> Result<(), PipelineError> {
        let mut rec = StageRecord { complete: true, artifacts: BTreeMap::new() };
        for a in artifacts {
            rec.artifacts.insert(a.to_string(), self.digest_file(a)?);
        }
        self.manifest.stages.insert(stage.to_string(), rec);
        self.save()
    }

    pub fn save(&self) -> Result<(), PipelineError> {
        let json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| PipelineError::Spec(e.to_string()))?;
        self.write(MANIFEST_FILE, &json).map(|_| ())
    }

    /// Checks that `stage` completed and its artifacts still match their digests.
    pub fn require(&self, stage: &str) -> Result<&StageRecord, PipelineError> {
        let rec = self
            .manifest
            .stages
            .get(stage)
            .filter(|r| r.complete)
            .ok_or_else(|| PipelineError::Missing(format!("stage `{stage}` has not completed in {}", self.root.display())))?;
        for (rel, digest) in &rec.artifacts {
            let path = self.path(rel);
            if !path.exists() {
                return Err(PipelineError::Missing(format!("{rel} (from stage `{stage}`)")));
            }
            if &self.digest_file(rel)? != digest {
                return Err(PipelineError::Digest { path: rel.clone() });
            }
        }
        Ok(rec)
    }
}
