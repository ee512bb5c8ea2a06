//! TEE sub-network configurations: factor ranges, validation, the `[0,1]^D` encoding used
//! by the surrogate models, random sampling and secure-memory accounting.
//!
//! A configuration carries two global up-sampling factors (`spatial_up`, `channel_up`) and
//! one [`BlockSpec`] per backbone block. Sub-network block `k` consumes the output of
//! backbone block `k`, so the transfer points are exactly the indices of active blocks.
//!
//! Block geometry (per sample, tokens x channels):
//!
//! * the adapter resizes the tapped feature to `spatial_down x spatial_down`, giving
//!   `P = spatial_down^2` tokens with the backbone's channel count;
//! * channels are average-pooled to `channel_down`;
//! * spatial mixing maps `P` tokens to `spatial_hidden` tokens (dense + bias, ReLU);
//!   channel mixing maps `channel_down` channels to `channel_hidden` (dense + bias, ReLU);
//! * `W^u` projects tokens to `spatial_up` and channels to `channel_up` (plus a channel bias).

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Bytes per stored parameter or activation element (single precision).
pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SearchSpaceError {
    #[error("invalid factor ranges: {0}")]
    InvalidRanges(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(Violation),
    #[error("encoded vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("backbone dims describe {got} blocks, expected {expected}")]
    IoDims { expected: usize, got: usize },
    #[error("unknown operation type {0}")]
    OpType(u8),
}

/// First violated constraint reported by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BlockCount { expected: usize, got: usize },
    SpatialUp,
    ChannelUp,
    OpType { block: usize },
    SpatialDown { block: usize },
    ChannelDown { block: usize },
    SpatialHidden { block: usize },
    ChannelHidden { block: usize },
}

impl Violation {
    /// Short name of the violated constraint.
    pub fn identity(&self) -> &'static str {
        match self {
            Violation::BlockCount { .. } => "block count",
            Violation::SpatialUp => "spatial_up",
            Violation::ChannelUp => "channel_up",
            Violation::OpType { .. } => "op_type",
            Violation::SpatialDown { .. } => "spatial_down",
            Violation::ChannelDown { .. } => "channel_down",
            Violation::SpatialHidden { .. } => "spatial_hidden",
            Violation::ChannelHidden { .. } => "channel_hidden",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::BlockCount { expected, got } => write!(f, "block count: expected {expected}, got {got}"),
            Violation::SpatialUp | Violation::ChannelUp => write!(f, "{}", self.identity()),
            Violation::OpType { block }
            | Violation::SpatialDown { block }
            | Violation::ChannelDown { block }
            | Violation::SpatialHidden { block }
            | Violation::ChannelHidden { block } => write!(f, "{} (block {})", self.identity(), block + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum OpType {
    Inactive = 0,
    SpatialMixing = 1,
    ChannelMixing = 2,
}

impl OpType {
    pub fn is_active(self) -> bool {
        self != OpType::Inactive
    }
}

impl TryFrom<u8> for OpType {
    type Error = SearchSpaceError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(OpType::Inactive),
            1 => Ok(OpType::SpatialMixing),
            2 => Ok(OpType::ChannelMixing),
            other => Err(SearchSpaceError::OpType(other)),
        }
    }
}

impl From<OpType> for u8 {
    fn from(t: OpType) -> u8 {
        t as u8
    }
}

/// Admissible values of every search factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchFactorRanges {
    pub su_choices: Vec<usize>,
    pub cu_choices: Vec<usize>,
    pub type_choices: Vec<OpType>,
    pub sd_choices: Vec<usize>,
    pub cd_choices: Vec<usize>,
    pub sh_choices: Vec<usize>,
    pub ch_choices: Vec<usize>,
    pub num_blocks: usize,
}

impl SearchFactorRanges {
    pub fn with_blocks(num_blocks: usize) -> Self {
        SearchFactorRanges {
            su_choices: vec![4, 8, 16],
            cu_choices: vec![16, 32, 64],
            type_choices: vec![OpType::Inactive, OpType::SpatialMixing, OpType::ChannelMixing],
            sd_choices: vec![2, 4, 8],
            cd_choices: vec![2, 4, 8],
            sh_choices: vec![8, 16, 32, 64],
            ch_choices: vec![8, 16, 32, 64],
            num_blocks,
        }
    }

    pub fn check(&self) -> Result<(), SearchSpaceError> {
        fn increasing<T: PartialOrd>(name: &str, v: &[T]) -> Result<(), SearchSpaceError> {
            if v.is_empty() {
                return Err(SearchSpaceError::InvalidRanges(format!("{name} is empty")));
            }
            if v.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SearchSpaceError::InvalidRanges(format!("{name} is not strictly increasing")));
            }
            Ok(())
        }
        for (name, list) in self.dim_lists() {
            increasing(name, list)?;
            if list[0] == 0 {
                return Err(SearchSpaceError::InvalidRanges(format!("{name} contains zero")));
            }
        }
        increasing("type_choices", &self.type_choices)?;
        if self.num_blocks == 0 {
            return Err(SearchSpaceError::InvalidRanges("num_blocks must be at least 1".into()));
        }
        Ok(())
    }

    fn dim_lists(&self) -> [(&'static str, &[usize]); 6] {
        [
            ("su_choices", &self.su_choices),
            ("cu_choices", &self.cu_choices),
            ("sd_choices", &self.sd_choices),
            ("cd_choices", &self.cd_choices),
            ("sh_choices", &self.sh_choices),
            ("ch_choices", &self.ch_choices),
        ]
    }

    /// Encoded dimension `2 + 5 L`.
    pub fn encoded_dim(&self) -> usize {
        2 + 5 * self.num_blocks
    }

    /// Configuration taking the first entry of every choice list.
    pub fn minimum(&self) -> Configuration {
        let block = BlockSpec {
            op_type: self.type_choices[0],
            spatial_down: self.sd_choices[0],
            channel_down: self.cd_choices[0],
            spatial_hidden: self.sh_choices[0],
            channel_hidden: self.ch_choices[0],
        };
        Configuration {
            spatial_up: self.su_choices[0],
            channel_up: self.cu_choices[0],
            blocks: vec![block; self.num_blocks],
        }
    }
}

impl Default for SearchFactorRanges {
    fn default() -> Self {
        Self::with_blocks(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub op_type: OpType,
    pub spatial_down: usize,
    pub channel_down: usize,
    pub spatial_hidden: usize,
    pub channel_hidden: usize,
}

impl BlockSpec {
    pub fn is_active(&self) -> bool {
        self.op_type.is_active()
    }

    /// Tokens after the adapter (`spatial_down^2`).
    pub fn tokens(&self) -> usize {
        self.spatial_down * self.spatial_down
    }

    /// (tokens, channels) of the mixed representation fed to `W^u`.
    pub fn mixed_shape(&self) -> (usize, usize) {
        match self.op_type {
            OpType::SpatialMixing => (self.spatial_hidden, self.channel_down),
            OpType::ChannelMixing => (self.tokens(), self.channel_hidden),
            OpType::Inactive => (0, 0),
        }
    }

    /// Learnable parameters: mixing weights and bias plus the two-sided `W^u` and its bias.
    pub fn param_count(&self, spatial_up: usize, channel_up: usize) -> u64 {
        let mixing = match self.op_type {
            OpType::Inactive => return 0,
            OpType::SpatialMixing => self.tokens() * self.spatial_hidden + self.spatial_hidden,
            OpType::ChannelMixing => self.channel_down * self.channel_hidden + self.channel_hidden,
        };
        let (t, c) = self.mixed_shape();
        (mixing + t * spatial_up + c * channel_up + channel_up) as u64
    }

    /// Multiply-accumulates of one forward pass. Pooling is free.
    pub fn mac_count(&self, spatial_up: usize, channel_up: usize) -> u64 {
        let mixing = match self.op_type {
            OpType::Inactive => return 0,
            OpType::SpatialMixing => self.tokens() * self.spatial_hidden * self.channel_down,
            OpType::ChannelMixing => self.tokens() * self.channel_down * self.channel_hidden,
        };
        let (t, c) = self.mixed_shape();
        // channel projection first, then token projection
        (mixing + t * c * channel_up + t * spatial_up * channel_up) as u64
    }

    /// Input, hidden and output element counts for a backbone feature with `in_channels`.
    pub fn activation_elements(&self, in_channels: usize, spatial_up: usize, channel_up: usize) -> u64 {
        if !self.is_active() {
            return 0;
        }
        let (t, c) = self.mixed_shape();
        (self.tokens() * in_channels + t * c + spatial_up * channel_up) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Configuration {
    pub spatial_up: usize,
    pub channel_up: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Configuration {
    /// Number of active blocks `K`.
    pub fn active_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_active()).count()
    }

    /// Zero-based indices of active blocks, increasing. Transfer point `p_k` is entry `k-1` plus one.
    pub fn transfer_points(&self) -> Vec<usize> {
        self.blocks.iter().enumerate().filter(|(_, b)| b.is_active()).map(|(i, _)| i).collect()
    }

    /// Same configuration with every inactive block's dims reset to the minimum choices.
    /// Two configurations with equal canonical forms build identical sub-networks.
    pub fn canonical(&self, ranges: &SearchFactorRanges) -> Configuration {
        let mut c = self.clone();
        for b in c.blocks.iter_mut().filter(|b| !b.is_active()) {
            b.spatial_down = ranges.sd_choices[0];
            b.channel_down = ranges.cd_choices[0];
            b.spatial_hidden = ranges.sh_choices[0];
            b.channel_hidden = ranges.ch_choices[0];
        }
        c
    }

    /// Stable textual key used for deduplication and digests.
    pub fn key(&self) -> String {
        let mut s = format!("su{}-cu{}", self.spatial_up, self.channel_up);
        for b in &self.blocks {
            if b.is_active() {
                s.push_str(&format!(
                    "|t{}:{}:{}:{}:{}",
                    b.op_type as u8, b.spatial_down, b.channel_down, b.spatial_hidden, b.channel_hidden
                ));
            } else {
                s.push_str("|t0");
            }
        }
        s
    }
}

/// Per-block backbone output shape (square spatial grid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDims {
    pub channels: usize,
    pub resolution: usize,
}

impl FeatureDims {
    pub fn elements(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }
}

/// Backbone feature dimensions per block plus the task's class count (sizes the TEE classifier).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneDims {
    pub blocks: Vec<FeatureDims>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub parameter_bytes: u64,
    pub peak_activation_bytes: u64,
    pub total: u64,
}

pub const RANGES_VERSION: u32 = 1;
pub const CONFIG_VERSION: u32 = 1;

impl SearchFactorRanges {
    pub fn from_toml(text: &str) -> Result<Self, crate::docfile::DocError> {
        crate::docfile::parse(text, "search factor ranges", RANGES_VERSION)
    }

    pub fn to_toml(&self) -> Result<String, crate::docfile::DocError> {
        crate::docfile::render(self, "search factor ranges", RANGES_VERSION)
    }
}

impl Configuration {
    pub fn from_toml(text: &str) -> Result<Self, crate::docfile::DocError> {
        crate::docfile::parse(text, "configuration", CONFIG_VERSION)
    }

    pub fn to_toml(&self) -> Result<String, crate::docfile::DocError> {
        crate::docfile::render(self, "configuration", CONFIG_VERSION)
    }
}

pub fn validate(config: &Configuration, ranges: &SearchFactorRanges) -> Result<(), Violation> {
    if config.blocks.len() != ranges.num_blocks {
        return Err(Violation::BlockCount { expected: ranges.num_blocks, got: config.blocks.len() });
    }
    if !ranges.su_choices.contains(&config.spatial_up) {
        return Err(Violation::SpatialUp);
    }
    if !ranges.cu_choices.contains(&config.channel_up) {
        return Err(Violation::ChannelUp);
    }
    for (block, b) in config.blocks.iter().enumerate() {
        if !ranges.type_choices.contains(&b.op_type) {
            return Err(Violation::OpType { block });
        }
        if !b.is_active() {
            continue;
        }
        if !ranges.sd_choices.contains(&b.spatial_down) {
            return Err(Violation::SpatialDown { block });
        }
        if !ranges.cd_choices.contains(&b.channel_down) {
            return Err(Violation::ChannelDown { block });
        }
        if !ranges.sh_choices.contains(&b.spatial_hidden) {
            return Err(Violation::SpatialHidden { block });
        }
        if !ranges.ch_choices.contains(&b.channel_hidden) {
            return Err(Violation::ChannelHidden { block });
        }
    }
    Ok(())
}

fn unit(index: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        index as f64 / (len - 1) as f64
    }
}

fn index_of<T: PartialEq>(list: &[T], v: &T) -> Result<usize, SearchSpaceError> {
    list.iter()
        .position(|x| x == v)
        .ok_or_else(|| SearchSpaceError::InvalidRanges("value outside its choice list".into()))
}

fn snap(x: f64, len: usize) -> usize {
    if len <= 1 {
        return 0;
    }
    let scaled = (x * (len - 1) as f64 + 0.5).floor();
    scaled.clamp(0.0, (len - 1) as f64) as usize
}

/// Maps a valid configuration into `[0,1]^D`, `D = 2 + 5 L`.
///
/// Layout: `[S^u, C^u]` then per block `[T, S^d, C^d, S^h, C^h]`. Dims of inactive blocks are
/// encoded too (they must still lie in their choice lists) so decoding is exact.
pub fn encode(config: &Configuration, ranges: &SearchFactorRanges) -> Result<Vec<f64>, SearchSpaceError> {
    validate(config, ranges).map_err(SearchSpaceError::InvalidConfig)?;
    let mut x = Vec::with_capacity(ranges.encoded_dim());
    x.push(unit(index_of(&ranges.su_choices, &config.spatial_up)?, ranges.su_choices.len()));
    x.push(unit(index_of(&ranges.cu_choices, &config.channel_up)?, ranges.cu_choices.len()));
    for b in &config.blocks {
        x.push(unit(index_of(&ranges.type_choices, &b.op_type)?, ranges.type_choices.len()));
        x.push(unit(index_of(&ranges.sd_choices, &b.spatial_down)?, ranges.sd_choices.len()));
        x.push(unit(index_of(&ranges.cd_choices, &b.channel_down)?, ranges.cd_choices.len()));
        x.push(unit(index_of(&ranges.sh_choices, &b.spatial_hidden)?, ranges.sh_choices.len()));
        x.push(unit(index_of(&ranges.ch_choices, &b.channel_hidden)?, ranges.ch_choices.len()));
    }
    Ok(x)
}

/// Snaps each coordinate to the nearest choice (round half up, clamped).
pub fn decode(x: &[f64], ranges: &SearchFactorRanges) -> Result<Configuration, SearchSpaceError> {
    let expected = ranges.encoded_dim();
    if x.len() != expected {
        return Err(SearchSpaceError::Dimension { expected, got: x.len() });
    }
    let pick = |v: f64, list: &[usize]| list[snap(v, list.len())];
    let blocks = x[2..]
        .chunks_exact(5)
        .map(|c| BlockSpec {
            op_type: ranges.type_choices[snap(c[0], ranges.type_choices.len())],
            spatial_down: pick(c[1], &ranges.sd_choices),
            channel_down: pick(c[2], &ranges.cd_choices),
            spatial_hidden: pick(c[3], &ranges.sh_choices),
            channel_hidden: pick(c[4], &ranges.ch_choices),
        })
        .collect();
    Ok(Configuration {
        spatial_up: pick(x[0], &ranges.su_choices),
        channel_up: pick(x[1], &ranges.cu_choices),
        blocks,
    })
}

/// Uniform independent draw of every factor.
pub fn sample_random(ranges: &SearchFactorRanges, seed: u64) -> Configuration {
    let mut rng = seed::rng(seed, "search-space/sample");
    sample_with(ranges, &mut rng)
}

pub(crate) fn sample_with(ranges: &SearchFactorRanges, rng: &mut seed::Rng) -> Configuration {
    fn pick<T: Copy>(rng: &mut seed::Rng, list: &[T]) -> T {
        list[rng.random_range(0..list.len())]
    }
    let spatial_up = pick(rng, &ranges.su_choices);
    let channel_up = pick(rng, &ranges.cu_choices);
    let blocks = (0..ranges.num_blocks)
        .map(|_| BlockSpec {
            op_type: pick(rng, &ranges.type_choices),
            spatial_down: pick(rng, &ranges.sd_choices),
            channel_down: pick(rng, &ranges.cd_choices),
            spatial_hidden: pick(rng, &ranges.sh_choices),
            channel_hidden: pick(rng, &ranges.ch_choices),
        })
        .collect();
    Configuration { spatial_up, channel_up, blocks }
}

/// Parameters of the TEE classifier over the `channel_up` aggregate.
pub fn classifier_param_count(channel_up: usize, num_classes: usize) -> u64 {
    (channel_up * num_classes + num_classes) as u64
}

/// Learnable TEE parameters (all active blocks plus the classifier).
pub fn tee_param_count(config: &Configuration, num_classes: usize) -> u64 {
    config
        .blocks
        .iter()
        .map(|b| b.param_count(config.spatial_up, config.channel_up))
        .sum::<u64>()
        + classifier_param_count(config.channel_up, num_classes)
}

/// Secure-memory footprint `H(a)`: 4-byte parameters plus the largest single-block activation set.
pub fn estimate_memory(config: &Configuration, io_dims: &BackboneDims) -> Result<MemoryFootprint, SearchSpaceError> {
    if io_dims.blocks.len() != config.blocks.len() {
        return Err(SearchSpaceError::IoDims { expected: config.blocks.len(), got: io_dims.blocks.len() });
    }
    let parameter_bytes = BYTES_PER_ELEMENT * tee_param_count(config, io_dims.num_classes);
    let peak = config
        .blocks
        .iter()
        .zip(&io_dims.blocks)
        .map(|(b, d)| b.activation_elements(d.channels, config.spatial_up, config.channel_up))
        .max()
        .unwrap_or(0);
    let peak_activation_bytes = BYTES_PER_ELEMENT * peak;
    Ok(MemoryFootprint { parameter_bytes, peak_activation_bytes, total: parameter_bytes + peak_activation_bytes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> BackboneDims {
        BackboneDims {
            blocks: vec![
                FeatureDims { channels: 8, resolution: 6 },
                FeatureDims { channels: 16, resolution: 3 },
                FeatureDims { channels: 16, resolution: 3 },
                FeatureDims { channels: 16, resolution: 3 },
            ],
            num_classes: 8,
        }
    }

    fn inactive(r: &SearchFactorRanges) -> Configuration {
        r.minimum()
    }

    #[test]
    fn all_inactive_is_valid_with_no_transfers() {
        let r = SearchFactorRanges::default();
        let c = inactive(&r);
        assert_eq!(validate(&c, &r), Ok(()));
        assert_eq!(c.active_count(), 0);
        assert!(c.transfer_points().is_empty());
    }

    #[test]
    fn block_count_mismatch() {
        let r = SearchFactorRanges::default();
        let mut c = inactive(&r);
        c.blocks.pop();
        assert_eq!(validate(&c, &r).unwrap_err().identity(), "block count");
    }

    #[test]
    fn mutated_spatial_down_is_reported() {
        let r = SearchFactorRanges::default();
        let mut c = sample_random(&r, 3);
        c.blocks[1].op_type = OpType::ChannelMixing;
        c.blocks[1].spatial_down = 3;
        assert_eq!(validate(&c, &r), Err(Violation::SpatialDown { block: 1 }));
        // ignored when the block is inactive
        c.blocks[1].op_type = OpType::Inactive;
        assert_eq!(validate(&c, &r), Ok(()));
    }

    #[test]
    fn minimum_encodes_to_zero_and_back() {
        let r = SearchFactorRanges::default();
        let x = encode(&r.minimum(), &r).unwrap();
        assert_eq!(x.len(), 2 + 5 * 4);
        assert!(x.iter().all(|&v| v == 0.0));
        assert_eq!(decode(&x, &r).unwrap(), r.minimum());
    }

    #[test]
    fn single_type_coordinate_changes() {
        let r = SearchFactorRanges::default();
        let a = sample_random(&r, 11);
        let mut b = a.clone();
        b.blocks[2].op_type = match a.blocks[2].op_type {
            OpType::ChannelMixing => OpType::SpatialMixing,
            _ => OpType::ChannelMixing,
        };
        let (xa, xb) = (encode(&a, &r).unwrap(), encode(&b, &r).unwrap());
        let diff: Vec<usize> = (0..xa.len()).filter(|&i| xa[i] != xb[i]).collect();
        assert_eq!(diff, vec![2 + 5 * 2]);
    }

    #[test]
    fn decode_rounds_half_up() {
        let mut r = SearchFactorRanges::default();
        r.su_choices = vec![4, 8];
        let mut x = vec![0.0; r.encoded_dim()];
        x[0] = 0.49;
        assert_eq!(decode(&x, &r).unwrap().spatial_up, 4);
        x[0] = 0.51;
        assert_eq!(decode(&x, &r).unwrap().spatial_up, 8);
        x[0] = 0.5;
        assert_eq!(decode(&x, &r).unwrap().spatial_up, 8);
        x[0] = 7.0;
        assert_eq!(decode(&x, &r).unwrap().spatial_up, 8);
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let r = SearchFactorRanges::default();
        assert!(matches!(decode(&[0.0; 3], &r), Err(SearchSpaceError::Dimension { expected: 22, got: 3 })));
    }

    #[test]
    fn sampling_is_deterministic() {
        let r = SearchFactorRanges::default();
        assert_eq!(sample_random(&r, 42), sample_random(&r, 42));
    }

    #[test]
    fn single_choice_list_always_taken() {
        let mut r = SearchFactorRanges::default();
        r.sh_choices = vec![16];
        let mut rng = seed::rng(5, "t");
        for _ in 0..10_000 {
            let c = sample_with(&r, &mut rng);
            assert!(c.blocks.iter().all(|b| b.spatial_hidden == 16));
        }
    }

    #[test]
    fn op_type_frequencies_within_three_sigma() {
        let r = SearchFactorRanges::default();
        let mut rng = seed::rng(9, "freq");
        let n = 10_000;
        let mut counts = [[0usize; 3]; 4];
        for _ in 0..n {
            let c = sample_with(&r, &mut rng);
            for (k, b) in c.blocks.iter().enumerate() {
                counts[k][b.op_type as usize] += 1;
            }
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for block in counts {
            for c in block {
                assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "count {c}");
            }
        }
    }

    #[test]
    fn classifier_only_when_no_blocks_active() {
        let r = SearchFactorRanges::default();
        let c = inactive(&r);
        let m = estimate_memory(&c, &dims()).unwrap();
        assert_eq!(m.parameter_bytes, 4 * (16 * 8 + 8));
        assert_eq!(m.peak_activation_bytes, 0);
        assert_eq!(m.total, m.parameter_bytes);
    }

    #[test]
    fn channel_block_bytes_match_hand_count() {
        let r = SearchFactorRanges::default();
        let mut c = inactive(&r);
        c.spatial_up = 4;
        c.channel_up = 16;
        c.blocks[1] = BlockSpec {
            op_type: OpType::ChannelMixing,
            spatial_down: 2,
            channel_down: 2,
            spatial_hidden: 8,
            channel_hidden: 8,
        };
        // mixing 2x8 + 8, token up 4x4, channel up 8x16 + 16, classifier 16x8 + 8
        let params = (2 * 8 + 8) + 4 * 4 + (8 * 16 + 16) + (16 * 8 + 8);
        // input 4 tokens x 16 channels, hidden 4x8, output 4x16
        let act = 4 * 16 + 4 * 8 + 4 * 16;
        let m = estimate_memory(&c, &dims()).unwrap();
        assert_eq!(m.parameter_bytes, 4 * params as u64);
        assert_eq!(m.peak_activation_bytes, 4 * act as u64);
    }

    #[test]
    fn doubling_channel_hidden_grows_footprint() {
        let r = SearchFactorRanges::default();
        let mut c = inactive(&r);
        c.blocks[0] = BlockSpec {
            op_type: OpType::ChannelMixing,
            spatial_down: 4,
            channel_down: 4,
            spatial_hidden: 8,
            channel_hidden: 16,
        };
        let before = estimate_memory(&c, &dims()).unwrap().total;
        c.blocks[0].channel_hidden = 32;
        assert!(estimate_memory(&c, &dims()).unwrap().total > before);
    }

    #[test]
    fn io_dims_length_checked() {
        let r = SearchFactorRanges::default();
        let mut d = dims();
        d.blocks.pop();
        assert!(matches!(estimate_memory(&r.minimum(), &d), Err(SearchSpaceError::IoDims { .. })));
    }

    #[test]
    fn ranges_check_rejects_bad_lists() {
        let mut r = SearchFactorRanges::default();
        assert!(r.check().is_ok());
        r.sd_choices = vec![4, 2];
        assert!(r.check().is_err());
        r = SearchFactorRanges::default();
        r.ch_choices.clear();
        assert!(r.check().is_err());
        r = SearchFactorRanges::default();
        r.num_blocks = 0;
        assert!(r.check().is_err());
    }

    #[test]
    fn op_type_serializes_as_integer() {
        let b = BlockSpec { op_type: OpType::SpatialMixing, spatial_down: 2, channel_down: 2, spatial_hidden: 8, channel_hidden: 8 };
        let s = serde_json::to_string(&b).unwrap();
        assert!(s.contains("\"op_type\":1"));
        assert!(serde_json::from_str::<BlockSpec>(&s.replace(":1,", ":5,")).is_err());
    }
}
