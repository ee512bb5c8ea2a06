//! Backbone trunk and REE head, parameter-free adapters, and the TEE side branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Tensor, Var};
use super::NnError;
use crate::search_space::{BackboneDims, Configuration, FeatureDims, OpType};
use crate::seed;

/// Backbone shape: block `l` (0-based) is an optional 2x2 average pool (for `l > 0`), a 3x3
/// convolution and GELU; the head is a linear map on the globally pooled last feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneArch {
    pub input_resolution: usize,
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl BackboneArch {
    /// `depth` blocks whose widths double from `width`, capped at `4 * width`.
    pub fn new(depth: usize, width: usize, input_resolution: usize, input_channels: usize, num_classes: usize) -> Result<Self, NnError> {
        if depth == 0 || width == 0 || num_classes < 2 {
            return Err(NnError::Shape("backbone needs depth >= 1, width >= 1 and at least two classes".into()));
        }
        if input_resolution >> (depth - 1) == 0 {
            return Err(NnError::Shape(format!("resolution {input_resolution} too small for {depth} blocks")));
        }
        let channels = (0..depth).map(|l| (width << l.min(2)).min(4 * width)).collect();
        Ok(BackboneArch { input_resolution, input_channels, channels, num_classes })
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn resolution(&self, block: usize) -> usize {
        self.input_resolution >> block
    }

    pub fn io_dims(&self) -> BackboneDims {
        BackboneDims {
            blocks: (0..self.depth()).map(|l| FeatureDims { channels: self.channels[l], resolution: self.resolution(l) }).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`.
    pub w: Tensor,
    pub b: Tensor,
}

fn uniform(rng: &mut seed::Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-bound..bound)).collect() }
}

impl Linear {
    fn init(rng: &mut seed::Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear { w: uniform(rng, &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt()), b: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Linear { w: Tensor::zeros(&[fan_in, fan_out]), b: Tensor::zeros(&[fan_out]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub arch: BackboneArch,
    /// Per block `(w [9 C_in, C_out], b [C_out])`.
    pub blocks: Vec<(Tensor, Tensor)>,
    pub head: Linear,
}

/// Deterministic initialization of a backbone (not yet pre-trained).
pub fn build_backbone(arch: &BackboneArch, seed: u64) -> Backbone {
    let mut rng = seed::rng(seed, "nn/backbone");
    let mut c_in = arch.input_channels;
    let blocks = arch
        .channels
        .iter()
        .map(|&c| {
            let fan_in = 9 * c_in;
            let w = uniform(&mut rng, &[fan_in, c], (6.0 / fan_in as f64).sqrt());
            c_in = c;
            (w, Tensor::zeros(&[c]))
        })
        .collect();
    let head = Linear::init(&mut rng, c_in, arch.num_classes);
    Backbone { arch: arch.clone(), blocks, head }
}

impl Backbone {
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.blocks.iter().flat_map(|(w, b)| [w, b]).collect();
        v.extend([&self.head.w, &self.head.b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(|(w, b)| [w, b]).collect();
        v.extend([&mut self.head.w, &mut self.head.b]);
        v
    }

    /// Trunk parameters only (every block, no head).
    pub fn trunk_params(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (l, (w, b)) in self.blocks.iter().enumerate() {
            v.push((format!("{prefix}.block{l}.w"), w));
            v.push((format!("{prefix}.block{l}.b"), b));
        }
        v.push((format!("{prefix}.head.w"), &self.head.w));
        v.push((format!("{prefix}.head.b"), &self.head.b));
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Registers `params` on the tape, trainable or constant.
pub fn register(tape: &mut Tape, params: &[&Tensor], trainable: bool) -> Vec<Var> {
    params.iter().map(|t| if trainable { tape.param(t) } else { tape.constant((*t).clone()) }).collect()
}

/// Trunk features per block and head logits; `vars` in [`Backbone::params`] order.
pub fn backbone_forward(tape: &mut Tape, arch: &BackboneArch, vars: &[Var], x: Var) -> (Vec<Var>, Var) {
    let mut h = x;
    let mut features = Vec::with_capacity(arch.depth());
    for l in 0..arch.depth() {
        if l > 0 {
            h = tape.avg_pool2(h);
        }
        let z = tape.conv3x3(h, vars[2 * l], vars[2 * l + 1]);
        let z = tape.channel_norm(z);
        h = tape.gelu(z);
        features.push(h);
    }
    let shape = tape.value(h).shape.clone();
    let tokens = tape.reshape(h, &[shape[0], shape[1] * shape[2], shape[3]]);
    let pooled = tape.mean_tokens(tokens);
    let n = 2 * arch.depth();
    let z = tape.channel_map(pooled, vars[n]);
    let logits = tape.bias_last(z, vars[n + 1]);
    (features, logits)
}

/// Half-pixel bilinear weights mapping `src` samples to `dst` samples (`dst x src`).
fn interp_1d(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let frac = s - i0 as f64;
        m[d * src + i0] += 1.0 - frac;
        m[d * src + i1] += frac;
    }
    m
}

/// Token map `[target^2, source^2]` of bilinear resizing on a row-major grid.
pub fn bilinear_matrix(source: usize, target: usize) -> Result<Tensor, NnError> {
    if source == 0 || target == 0 {
        return Err(NnError::Shape(format!("bilinear resize {source} -> {target} needs positive sizes")));
    }
    let r = interp_1d(source, target);
    let (p, q) = (target * target, source * source);
    let mut data = vec![0.0; p * q];
    for i in 0..target {
        for j in 0..target {
            for y in 0..source {
                for x in 0..source {
                    data[(i * target + j) * q + y * source + x] = r[i * source + y] * r[j * source + x];
                }
            }
        }
    }
    Tensor::new(&[p, q], data)
}

/// Bilinear resize of `feature [N, H, W, C]` (square) to `[N, target, target, C]`.
/// Parameter-free; identity when `target == H`.
pub fn adapter_forward(feature: &Tensor, target: usize) -> Result<Tensor, NnError> {
    if feature.shape.len() != 4 || feature.shape[1] != feature.shape[2] {
        return Err(NnError::Shape(format!("adapter expects a square [N, H, W, C] feature, got {:?}", feature.shape)));
    }
    let (n, h, c) = (feature.shape[0], feature.shape[1], feature.shape[3]);
    if target == h {
        return Ok(feature.clone());
    }
    let mut tape = Tape::new();
    let m = tape.constant(bilinear_matrix(h, target)?);
    let x = tape.constant(Tensor { shape: vec![n, h * h, c], data: feature.data.clone() });
    let y = tape.token_map(m, x);
    Ok(Tensor { shape: vec![n, target, target, c], data: tape.value(y).data.clone() })
}

/// Adaptive average pooling of `c_in` channels to `c_out`, as a channel map `[c_in, c_out]`.
pub fn channel_pool_matrix(c_in: usize, c_out: usize) -> Tensor {
    let mut m = vec![0.0; c_in * c_out];
    for d in 0..c_out {
        let lo = d * c_in / c_out;
        let hi = ((d + 1) * c_in).div_ceil(c_out);
        for c in lo..hi {
            m[c * c_out + d] = 1.0 / (hi - lo) as f64;
        }
    }
    Tensor { shape: vec![c_in, c_out], data: m }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBlock {
    pub op_type: OpType,
    /// Spatial: `[S^h, P]` token map; channel: `[C^d, C^h]` channel map.
    pub mix_w: Tensor,
    pub mix_b: Tensor,
    /// `[S^u, t]`, no bias.
    pub up_tokens: Tensor,
    /// `[c, C^u]`.
    pub up_channels: Tensor,
    pub up_bias: Tensor,
}

impl SubBlock {
    fn params(&self) -> [&Tensor; 5] {
        [&self.mix_w, &self.mix_b, &self.up_tokens, &self.up_channels, &self.up_bias]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.mix_w, &mut self.mix_b, &mut self.up_tokens, &mut self.up_channels, &mut self.up_bias]
    }
}

/// TEE side branch: one optional block per backbone block plus the TEE classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SubNetwork {
    pub config: Configuration,
    pub blocks: Vec<Option<SubBlock>>,
    pub classifier: Linear,
}

/// Sub-network for `config`, sized from the backbone feature dims.
pub fn build_subnetwork(config: &Configuration, io_dims: &BackboneDims, seed: u64) -> Result<SubNetwork, NnError> {
    if config.blocks.len() != io_dims.blocks.len() {
        return Err(NnError::Shape(format!("config has {} blocks, backbone {}", config.blocks.len(), io_dims.blocks.len())));
    }
    let (su, cu) = (config.spatial_up, config.channel_up);
    let mut rng = seed::rng(seed, "nn/subnetwork");
    let mut blocks = Vec::with_capacity(config.blocks.len());
    for b in &config.blocks {
        if !b.is_active() {
            blocks.push(None);
            continue;
        }
        if [b.spatial_down, b.channel_down, b.spatial_hidden, b.channel_hidden, su, cu].contains(&0) {
            return Err(NnError::Shape("sub-network dims must be positive".into()));
        }
        let p = b.tokens();
        let (mix_w, mix_b) = match b.op_type {
            OpType::SpatialMixing => (uniform(&mut rng, &[b.spatial_hidden, p], (6.0 / p as f64).sqrt()), Tensor::zeros(&[b.spatial_hidden])),
            _ => (
                uniform(&mut rng, &[b.channel_down, b.channel_hidden], (6.0 / b.channel_down as f64).sqrt()),
                Tensor::zeros(&[b.channel_hidden]),
            ),
        };
        let (t, c) = b.mixed_shape();
        blocks.push(Some(SubBlock {
            op_type: b.op_type,
            mix_w,
            mix_b,
            up_tokens: uniform(&mut rng, &[su, t], (3.0 / t as f64).sqrt()),
            up_channels: uniform(&mut rng, &[c, cu], (3.0 / c as f64).sqrt()),
            up_bias: Tensor::zeros(&[cu]),
        }));
    }
    let classifier = Linear::init(&mut rng, cu, io_dims.num_classes);
    Ok(SubNetwork { config: config.clone(), blocks, classifier })
}

impl SubNetwork {
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.blocks.iter().flatten().flat_map(|b| b.params()).collect();
        v.extend([&self.classifier.w, &self.classifier.b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.blocks.iter_mut().flatten().flat_map(|b| b.params_mut()).collect();
        v.extend([&mut self.classifier.w, &mut self.classifier.b]);
        v
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            if let Some(b) = b {
                for (name, t) in ["mix_w", "mix_b", "up_tokens", "up_channels", "up_bias"].iter().zip(b.params()) {
                    v.push((format!("tee.block{k}.{name}"), t));
                }
            }
        }
        v.push(("tee.classifier.w".into(), &self.classifier.w));
        v.push(("tee.classifier.b".into(), &self.classifier.b));
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn active_count(&self) -> usize {
        self.blocks.iter().flatten().count()
    }
}

/// Side-branch logits from backbone features, or `None` when no block is active.
/// `vars` in [`SubNetwork::params`] order.
pub fn subnetwork_forward(tape: &mut Tape, subnet: &SubNetwork, vars: &[Var], features: &[Var]) -> Option<Var> {
    let mut agg: Option<Var> = None;
    let mut i = 0;
    for (k, block) in subnet.blocks.iter().enumerate() {
        let Some(block) = block else { continue };
        let spec = &subnet.config.blocks[k];
        let fv = tape.value(features[k]);
        let (n, h, c_in) = (fv.shape[0], fv.shape[1], fv.shape[3]);
        let tokens = tape.reshape(features[k], &[n, h * h, c_in]);
        let resized = if spec.spatial_down == h {
            tokens
        } else {
            let m = tape.constant(bilinear_matrix(h, spec.spatial_down).expect("positive sizes"));
            tape.token_map(m, tokens)
        };
        let pool = tape.constant(channel_pool_matrix(c_in, spec.channel_down));
        let down = tape.channel_map(resized, pool);
        let (mw, mb, ut, uc, ub) = (vars[i], vars[i + 1], vars[i + 2], vars[i + 3], vars[i + 4]);
        i += 5;
        let mixed = match block.op_type {
            OpType::SpatialMixing => {
                let z = tape.token_map(mw, down);
                tape.bias_token(z, mb)
            }
            _ => {
                let z = tape.channel_map(down, mw);
                tape.bias_last(z, mb)
            }
        };
        let act = tape.gelu(mixed);
        let ch = tape.channel_map(act, uc);
        let ch = tape.bias_last(ch, ub);
        let out = tape.token_map(ut, ch);
        agg = Some(match agg {
            Some(a) => tape.add(a, out),
            None => out,
        });
    }
    let agg = agg?;
    let pooled = tape.mean_tokens(agg);
    let z = tape.channel_map(pooled, vars[i]);
    Some(tape.bias_last(z, vars[i + 1]))
}

/// Defender-side model: backbone `M_b` (REE), side branch plus TEE classifier (completing
/// `M_c`), and the frozen teacher `M_t` once trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone,
    pub subnet: SubNetwork,
    pub teacher: Option<Backbone>,
    pub frozen: FrozenGroups,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrozenGroups {
    /// The whole REE backbone, trunk and head.
    pub backbone: bool,
    /// Only the REE head; the trunk stays trainable unless `backbone` is set.
    pub ree_head: bool,
    pub subnet: bool,
}

impl ModelState {
    pub fn new(backbone: Backbone, config: &Configuration, seed: u64) -> Result<Self, NnError> {
        let subnet = build_subnetwork(config, &backbone.arch.io_dims(), seed)?;
        Ok(ModelState { backbone, subnet, teacher: None, frozen: FrozenGroups::default() })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named_params("ree");
        v.extend(self.subnet.named_params());
        if let Some(t) = &self.teacher {
            v.extend(t.named_params("teacher"));
        }
        v
    }
}

/// Outputs of one combined forward pass.
pub struct Forward {
    pub combined: Var,
    pub backbone: Var,
    pub backbone_vars: Vec<Var>,
    pub subnet_vars: Vec<Var>,
}

/// `M_c(x)` and `M_b(x)` on a fresh tape. With no active block, `M_c` is the backbone head.
pub fn forward_on_tape(tape: &mut Tape, model: &ModelState, x: &Tensor) -> Result<Forward, NnError> {
    let arch = &model.backbone.arch;
    let want = [arch.input_resolution, arch.input_resolution, arch.input_channels];
    if x.shape.len() != 4 || x.shape[1..] != want {
        return Err(NnError::Shape(format!("input {:?} does not match [N, {}, {}, {}]", x.shape, want[0], want[1], want[2])));
    }
    let xv = tape.constant(x.clone());
    let params = model.backbone.params();
    let head_from = params.len() - 2;
    let backbone_vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if model.frozen.backbone || (model.frozen.ree_head && i >= head_from) {
                tape.constant((*t).clone())
            } else {
                tape.param(t)
            }
        })
        .collect();
    let subnet_vars = register(tape, &model.subnet.params(), !model.frozen.subnet);
    let (features, backbone) = backbone_forward(tape, arch, &backbone_vars, xv);
    let combined = subnetwork_forward(tape, &model.subnet, &subnet_vars, &features).unwrap_or(backbone);
    Ok(Forward { combined, backbone, backbone_vars, subnet_vars })
}

/// Combined-model logits `M_c(x)`.
pub fn forward_combined(model: &ModelState, x: &Tensor) -> Result<Tensor, NnError> {
    let mut tape = Tape::new();
    let f = forward_on_tape(&mut tape, &model_frozen(model), x)?;
    Ok(tape.value(f.combined).clone())
}

fn model_frozen(model: &ModelState) -> ModelState {
    let mut m = model.clone();
    m.frozen = FrozenGroups { backbone: true, ree_head: true, subnet: true };
    m
}

/// Backbone-head logits `M_b(x)`.
pub fn forward_backbone(backbone: &Backbone, x: &Tensor) -> Result<Tensor, NnError> {
    Ok(backbone_features(backbone, x)?.1)
}

/// Trunk features per block and head logits, without gradient tracking.
pub fn backbone_features(backbone: &Backbone, x: &Tensor) -> Result<(Vec<Tensor>, Tensor), NnError> {
    let arch = &backbone.arch;
    if x.shape.len() != 4 || x.shape[1..] != [arch.input_resolution, arch.input_resolution, arch.input_channels] {
        return Err(NnError::Shape(format!("input {:?} does not match the backbone", x.shape)));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = register(&mut tape, &backbone.params(), false);
    let (features, logits) = backbone_forward(&mut tape, arch, &vars, xv);
    Ok((features.iter().map(|f| tape.value(*f).clone()).collect(), tape.value(logits).clone()))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape[1];
    logits
        .data
        .chunks(k)
        .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0)
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let pred = argmax_rows(logits);
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}
