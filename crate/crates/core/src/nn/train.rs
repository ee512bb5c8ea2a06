//! Plain minibatch gradient descent: backbone pre-training, candidate scoring for the
//! search, and joint self-poisoning training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{Split, SyntheticDataset};
use super::model::{
    accuracy, backbone_features, backbone_forward, build_subnetwork, forward_backbone, forward_combined, forward_on_tape, register,
    subnetwork_forward, Backbone, BackboneArch, ModelState,
};
use super::tape::{Tape, Tensor};
use super::NnError;
use crate::search_space::Configuration;
use crate::seed;

/// Joint-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub kd_temperature: f64,
    pub learning_rate: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { beta: 0.5, lambda: 0.0, kd_temperature: 4.0, learning_rate: 0.05, clip_threshold: 2.0, epochs: 12, batch_size: 32, seed: 0 }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.kd_temperature > 0.0) {
            return bad("kd_temperature must be > 0");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_threshold > 0.0) {
            return bad("learning_rate and clip_threshold must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Scales all gradients by `threshold / n` when their global L2 norm `n` exceeds `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], threshold: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > threshold {
        let s = threshold / norm;
        grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

fn sgd(params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
    for (p, g) in params.into_iter().zip(grads) {
        p.data.iter_mut().zip(&g.data).for_each(|(p, g)| *p -= lr * g);
    }
}

fn shuffled_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &format!("nn/epoch/{epoch}")));
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Loss components of `beta CE(M_c) + (1 - beta) KD(M_c, M_t) - lambda CE(M_b)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub kd: f64,
    pub adv_ce: f64,
    pub total: f64,
}

impl LossParts {
    fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.kd.is_finite() && self.adv_ce.is_finite() && self.total.is_finite()
    }
}

/// Loss and gradients for one batch. Gradient lists follow `Backbone::params` and
/// `SubNetwork::params`; a frozen group gets an empty list.
pub struct PoisonStep {
    pub parts: LossParts,
    pub backbone_grads: Vec<Tensor>,
    pub subnet_grads: Vec<Tensor>,
}

pub fn total_poison_loss(model: &ModelState, x: &Tensor, labels: &[usize], teacher_logits: &Tensor, tc: &TrainConfig) -> Result<PoisonStep, NnError> {
    let mut tape = Tape::new();
    let f = forward_on_tape(&mut tape, model, x)?;
    let ce = tape.cross_entropy(f.combined, labels);
    let kd = tape.kd_loss(f.combined, teacher_logits, tc.kd_temperature);
    let adv = tape.cross_entropy(f.backbone, labels);
    let total = tape.weighted_sum(&[(ce, tc.beta), (kd, 1.0 - tc.beta), (adv, -tc.lambda)]);
    let parts = LossParts { ce: tape.value(ce).item(), kd: tape.value(kd).item(), adv_ce: tape.value(adv).item(), total: tape.value(total).item() };
    let mut g = tape.backward(total);
    let mut collect = |vars: &[super::tape::Var], frozen: bool, model_params: Vec<&Tensor>| -> Vec<Tensor> {
        if frozen {
            return Vec::new();
        }
        vars.iter().zip(model_params).map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(&p.shape))).collect()
    };
    let backbone_grads = collect(&f.backbone_vars, model.frozen.backbone, model.backbone.params());
    let subnet_grads = collect(&f.subnet_vars, model.frozen.subnet, model.subnet.params());
    Ok(PoisonStep { parts, backbone_grads, subnet_grads })
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochCurve {
    pub epoch: usize,
    pub combined_acc: f64,
    pub backbone_acc: f64,
    pub ce: f64,
    pub kd: f64,
    pub adv_ce: f64,
    pub total: f64,
}

pub const CURVE_HEADER: [&str; 7] = ["epoch", "combined_acc", "backbone_acc", "ce", "kd", "adv_ce", "total"];

/// Batched logits over a whole split.
fn predict(split: &Split, f: impl Fn(&Tensor) -> Result<Tensor, NnError>) -> Result<Tensor, NnError> {
    let mut out: Option<Tensor> = None;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(256) {
        let logits = f(&split.inputs.gather_rows(chunk))?;
        match out.as_mut() {
            None => out = Some(logits),
            Some(o) => {
                o.shape[0] += logits.shape[0];
                o.data.extend(logits.data);
            }
        }
    }
    out.ok_or_else(|| NnError::Shape("empty split".into()))
}

pub fn combined_logits(model: &ModelState, split: &Split) -> Result<Tensor, NnError> {
    predict(split, |x| forward_combined(model, x))
}

pub fn backbone_logits(backbone: &Backbone, split: &Split) -> Result<Tensor, NnError> {
    predict(split, |x| forward_backbone(backbone, x))
}

pub fn combined_accuracy(model: &ModelState, split: &Split) -> Result<f64, NnError> {
    Ok(accuracy(&combined_logits(model, split)?, &split.labels))
}

pub fn backbone_accuracy(backbone: &Backbone, split: &Split) -> Result<f64, NnError> {
    Ok(accuracy(&backbone_logits(backbone, split)?, &split.labels))
}

/// Plain-CE optimizer settings for backbone training and attacker fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdOptions {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_threshold: f64,
    pub seed: u64,
}

impl Default for SgdOptions {
    fn default() -> Self {
        SgdOptions { learning_rate: 0.05, epochs: 10, batch_size: 32, clip_threshold: 2.0, seed: 0 }
    }
}

/// Trains every backbone parameter with cross-entropy on `split`. Returns the mean loss
/// per epoch.
pub fn train_backbone(backbone: &mut Backbone, split: &Split, opts: &SgdOptions) -> Result<Vec<f64>, NnError> {
    let mut losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut sum = 0.0;
        for batch in shuffled_batches(split.len(), opts.batch_size, opts.seed, epoch) {
            let labels: Vec<usize> = batch.iter().map(|&i| split.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(split.inputs.gather_rows(&batch));
            let vars = register(&mut tape, &backbone.params(), true);
            let (_, logits) = backbone_forward(&mut tape, &backbone.arch, &vars, x);
            let loss = tape.cross_entropy(logits, &labels);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(NnError::Diverged { epoch, reason: "non-finite backbone loss".into() });
            }
            sum += value * batch.len() as f64;
            let mut g = tape.backward(loss);
            let mut grads: Vec<Tensor> = vars.iter().map(|v| g.take(*v).expect("trainable")).collect();
            clip_gradients(&mut grads, opts.clip_threshold);
            sgd(backbone.params_mut(), &grads, opts.learning_rate);
        }
        losses.push(sum / split.len() as f64);
    }
    Ok(losses)
}

/// Failed joint training: the reason plus the last finite state and its curves.
#[derive(Debug)]
pub struct TrainFailure {
    pub reason: String,
    pub epoch: usize,
    pub last_state: Box<ModelState>,
    pub curves: Vec<EpochCurve>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training failed in epoch {}: {}", self.epoch, self.reason)
    }
}

impl std::error::Error for TrainFailure {}

/// Consecutive non-finite steps tolerated before aborting.
const DIVERGENCE_STEPS: usize = 3;

/// Joint training on `beta CE + (1 - beta) KD - lambda CE_b` with clipping. The teacher
/// must already be trained; its logits are fixed. Curves are measured on the validation split.
pub fn train_poisoned(model: &ModelState, dataset: &SyntheticDataset, tc: &TrainConfig) -> Result<(ModelState, Vec<EpochCurve>), TrainFailure> {
    let fail = |reason: String, epoch: usize, state: &ModelState, curves: &[EpochCurve]| TrainFailure {
        reason,
        epoch,
        last_state: Box::new(state.clone()),
        curves: curves.to_vec(),
    };
    let mut state = model.clone();
    if let Err(e) = tc.check() {
        return Err(fail(e.to_string(), 0, &state, &[]));
    }
    let Some(teacher) = state.teacher.clone() else {
        return Err(fail("teacher must be trained before joint training".into(), 0, &state, &[]));
    };
    let train = &dataset.train;
    let teacher_logits = match backbone_logits(&teacher, train) {
        Ok(t) => t,
        Err(e) => return Err(fail(e.to_string(), 0, &state, &[])),
    };
    let mut curves = Vec::with_capacity(tc.epochs);
    let mut bad = 0;
    for epoch in 0..tc.epochs {
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        for batch in shuffled_batches(train.len(), tc.batch_size, tc.seed, epoch) {
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let x = train.inputs.gather_rows(&batch);
            let t = teacher_logits.gather_rows(&batch);
            let step = match total_poison_loss(&state, &x, &labels, &t, tc) {
                Ok(s) => s,
                Err(e) => return Err(fail(e.to_string(), epoch, &state, &curves)),
            };
            let finite = step.parts.is_finite()
                && step.backbone_grads.iter().chain(&step.subnet_grads).all(|g| g.data.iter().all(|v| v.is_finite()));
            if !finite {
                bad += 1;
                if bad >= DIVERGENCE_STEPS {
                    return Err(fail(format!("loss non-finite for {DIVERGENCE_STEPS} consecutive steps"), epoch, &state, &curves));
                }
                continue;
            }
            bad = 0;
            let n = batch.len() as f64;
            sums.ce += step.parts.ce * n;
            sums.kd += step.parts.kd * n;
            sums.adv_ce += step.parts.adv_ce * n;
            sums.total += step.parts.total * n;
            seen += batch.len();
            let nb = step.backbone_grads.len();
            let mut grads: Vec<Tensor> = step.backbone_grads.into_iter().chain(step.subnet_grads).collect();
            clip_gradients(&mut grads, tc.clip_threshold);
            if nb > 0 {
                sgd(state.backbone.params_mut(), &grads[..nb], tc.learning_rate);
            }
            if !state.frozen.subnet {
                sgd(state.subnet.params_mut(), &grads[nb..], tc.learning_rate);
            }
        }
        let denom = seen.max(1) as f64;
        let eval = || -> Result<(f64, f64), NnError> {
            Ok((combined_accuracy(&state, &dataset.val)?, backbone_accuracy(&state.backbone, &dataset.val)?))
        };
        let (combined_acc, backbone_acc) = match eval() {
            Ok(v) => v,
            Err(e) => return Err(fail(e.to_string(), epoch, &state, &curves)),
        };
        curves.push(EpochCurve {
            epoch,
            combined_acc,
            backbone_acc,
            ce: sums.ce / denom,
            kd: sums.kd / denom,
            adv_ce: sums.adv_ce / denom,
            total: sums.total / denom,
        });
    }
    Ok((state, curves))
}

/// Frozen-backbone trunk features of the training and validation splits, computed once so
/// that many candidates can be scored cheaply.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub arch: BackboneArch,
    pub train_features: Vec<Tensor>,
    pub train_labels: Vec<usize>,
    pub val_features: Vec<Tensor>,
    pub val_labels: Vec<usize>,
    /// Validation accuracy of the backbone head (the answer for configurations with no block).
    pub backbone_val_accuracy: f64,
}

fn split_features(backbone: &Backbone, split: &Split) -> Result<(Vec<Tensor>, Tensor), NnError> {
    let mut feats: Vec<Tensor> = Vec::new();
    let mut logits: Option<Tensor> = None;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(256) {
        let (f, l) = backbone_features(backbone, &split.inputs.gather_rows(chunk))?;
        if feats.is_empty() {
            feats = f;
            logits = Some(l);
        } else {
            for (acc, part) in feats.iter_mut().zip(f) {
                acc.shape[0] += part.shape[0];
                acc.data.extend(part.data);
            }
            let lg = logits.as_mut().expect("set with feats");
            lg.shape[0] += l.shape[0];
            lg.data.extend(l.data);
        }
    }
    Ok((feats, logits.ok_or_else(|| NnError::Shape("empty split".into()))?))
}

impl FeatureCache {
    /// Uses the first `train_limit` training samples when given (the search's subset knob).
    pub fn build(backbone: &Backbone, dataset: &SyntheticDataset, train_limit: Option<usize>) -> Result<Self, NnError> {
        let train = match train_limit {
            Some(n) if n < dataset.train.len() => dataset.train.subset(&(0..n).collect::<Vec<_>>()),
            _ => dataset.train.clone(),
        };
        let (train_features, _) = split_features(backbone, &train)?;
        let (val_features, val_logits) = split_features(backbone, &dataset.val)?;
        Ok(FeatureCache {
            arch: backbone.arch.clone(),
            train_features,
            train_labels: train.labels,
            val_features,
            backbone_val_accuracy: accuracy(&val_logits, &dataset.val.labels),
            val_labels: dataset.val.labels.clone(),
        })
    }
}

/// Settings for scoring one search candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateOptions {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_threshold: f64,
}

impl Default for CandidateOptions {
    fn default() -> Self {
        CandidateOptions { learning_rate: 0.1, batch_size: 32, epochs: 1, clip_threshold: 2.0 }
    }
}

/// Trains only the side branch and TEE classifier on frozen features with plain CE and
/// returns validation accuracy. No active block: the backbone head's accuracy.
pub fn train_candidate(config: &Configuration, cache: &FeatureCache, opts: &CandidateOptions, seed: u64) -> Result<f64, NnError> {
    let mut subnet = build_subnetwork(config, &cache.arch.io_dims(), seed)?;
    if subnet.active_count() == 0 {
        return Ok(cache.backbone_val_accuracy);
    }
    let n = cache.train_labels.len();
    for epoch in 0..opts.epochs {
        for batch in shuffled_batches(n, opts.batch_size, seed, epoch) {
            let labels: Vec<usize> = batch.iter().map(|&i| cache.train_labels[i]).collect();
            let mut tape = Tape::new();
            let feats: Vec<_> = cache.train_features.iter().map(|f| tape.constant(f.gather_rows(&batch))).collect();
            let vars = register(&mut tape, &subnet.params(), true);
            let logits = subnetwork_forward(&mut tape, &subnet, &vars, &feats).expect("active block");
            let loss = tape.cross_entropy(logits, &labels);
            if !tape.value(loss).item().is_finite() {
                return Err(NnError::Diverged { epoch, reason: "non-finite candidate loss".into() });
            }
            let mut g = tape.backward(loss);
            let mut grads: Vec<Tensor> = vars.iter().map(|v| g.take(*v).expect("trainable")).collect();
            clip_gradients(&mut grads, opts.clip_threshold);
            sgd(subnet.params_mut(), &grads, opts.learning_rate);
        }
    }
    let mut correct = 0usize;
    let nv = cache.val_labels.len();
    let idx: Vec<usize> = (0..nv).collect();
    for chunk in idx.chunks(256) {
        let mut tape = Tape::new();
        let feats: Vec<_> = cache.val_features.iter().map(|f| tape.constant(f.gather_rows(chunk))).collect();
        let vars = register(&mut tape, &subnet.params(), false);
        let logits = subnetwork_forward(&mut tape, &subnet, &vars, &feats).expect("active block");
        let labels: Vec<usize> = chunk.iter().map(|&i| cache.val_labels[i]).collect();
        correct += (accuracy(tape.value(logits), &labels) * labels.len() as f64).round() as usize;
    }
    Ok(correct as f64 / nv.max(1) as f64)
}

/// Search evaluator backed by [`train_candidate`].
pub struct CandidateTrainer<'a> {
    pub cache: &'a FeatureCache,
    pub options: CandidateOptions,
}

impl crate::moo::CandidateEvaluator for CandidateTrainer<'_> {
    fn evaluate(&self, config: &Configuration, seed: u64) -> Result<f64, String> {
        train_candidate(config, self.cache, &self.options, seed).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_scales_or_keeps() {
        let mut g = vec![Tensor::new(&[2], vec![2.0, 2.0]).unwrap(), Tensor::new(&[2], vec![2.0, 2.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 2.0), 4.0);
        assert!(g.iter().all(|t| t.data == vec![1.0, 1.0]));
        let mut g = vec![Tensor::new(&[1], vec![1.0]).unwrap()];
        clip_gradients(&mut g, 2.0);
        assert_eq!(g[0].data, vec![1.0]);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().check().is_ok());
        assert!(TrainConfig { beta: 1.5, ..Default::default() }.check().is_err());
        assert!(TrainConfig { lambda: -0.1, ..Default::default() }.check().is_err());
        assert!(TrainConfig { kd_temperature: 0.0, ..Default::default() }.check().is_err());
    }
}
