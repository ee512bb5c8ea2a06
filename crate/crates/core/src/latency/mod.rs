//! Parallel REE/TEE inference latency.
//!
//! The backbone runs block by block on the GPU. At each transfer point the adapter output
//! is shipped over the link and consumed by one TEE sub-network block on the CPU. Execution
//! proceeds in handshake intervals whose length is the slower of the two sides, so the
//! closed form is a sum of `max` terms. [`simulate_schedule`] replays the same semantics as
//! an event-driven simulation and serves as the oracle for [`parallel_latency`].

mod schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{BackboneDims, BlockSpec, Configuration, SearchFactorRanges, BYTES_PER_ELEMENT};

pub use schedule::{simulate_schedule, Resource, ScheduleEvent, ScheduleTrace};

pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatencyError {
    #[error("invalid cost profile: {0}")]
    InvalidProfile(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("block {0} is inactive")]
    InactiveBlock(usize),
    #[error("split layer {split} out of range 0..={blocks}")]
    SplitOutOfRange { split: usize, blocks: usize },
}

/// Cost model of the TEE CPU: `c^C = ms_per_mac * MACs + overhead_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeeCostCoeffs {
    pub ms_per_mac: f64,
    pub overhead_ms: f64,
}

/// Calibrated per-block costs (milliseconds) feeding `g(a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    pub gpu_block_ms: Vec<f64>,
    pub adapter_ms: Vec<f64>,
    pub transfer_base_ms: f64,
    pub transfer_bandwidth_bytes_per_ms: f64,
    pub tee_cost_coeffs: TeeCostCoeffs,
    #[serde(default)]
    pub classifier_ms: f64,
    /// CPU/GPU slowdown applied to backbone blocks that run in the TEE in the
    /// sequential-partition baseline.
    #[serde(default = "default_slowdown")]
    pub cpu_slowdown: f64,
}

fn default_slowdown() -> f64 {
    8.0
}

impl CostProfile {
    pub fn num_blocks(&self) -> usize {
        self.gpu_block_ms.len()
    }

    pub fn check(&self) -> Result<(), LatencyError> {
        let bad = |m: &str| Err(LatencyError::InvalidProfile(m.to_string()));
        if self.gpu_block_ms.is_empty() {
            return bad("gpu_block_ms is empty");
        }
        if self.adapter_ms.len() != self.gpu_block_ms.len() {
            return bad("adapter_ms length differs from gpu_block_ms");
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !self.gpu_block_ms.iter().chain(&self.adapter_ms).all(|&v| nonneg(v)) {
            return bad("block durations must be finite and non-negative");
        }
        if !nonneg(self.transfer_base_ms) || !nonneg(self.classifier_ms) {
            return bad("transfer_base_ms and classifier_ms must be finite and non-negative");
        }
        if !nonneg(self.tee_cost_coeffs.ms_per_mac) || !nonneg(self.tee_cost_coeffs.overhead_ms) {
            return bad("tee_cost_coeffs must be finite and non-negative");
        }
        if !(self.transfer_bandwidth_bytes_per_ms > 0.0) {
            return bad("transfer_bandwidth_bytes_per_ms must be positive");
        }
        if !(self.cpu_slowdown.is_finite() && self.cpu_slowdown > 0.0) {
            return bad("cpu_slowdown must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, crate::docfile::DocError> {
        crate::docfile::parse(text, "cost profile", PROFILE_VERSION)
    }

    pub fn to_toml(&self) -> Result<String, crate::docfile::DocError> {
        crate::docfile::render(self, "cost profile", PROFILE_VERSION)
    }

    /// Pure-backbone execution time `sum c^G`.
    pub fn backbone_ms(&self) -> f64 {
        self.gpu_block_ms.iter().sum()
    }
}

fn check_inputs(config: &Configuration, profile: &CostProfile, io_dims: &BackboneDims) -> Result<(), LatencyError> {
    profile.check()?;
    let l = profile.num_blocks();
    if config.blocks.len() != l {
        return Err(LatencyError::InvalidConfig(format!("{} blocks for a {l}-block profile", config.blocks.len())));
    }
    if io_dims.blocks.len() != l {
        return Err(LatencyError::InvalidConfig(format!("{} io dims for a {l}-block profile", io_dims.blocks.len())));
    }
    if config.spatial_up == 0 || config.channel_up == 0 {
        return Err(LatencyError::InvalidConfig("zero global up-sampling dim".into()));
    }
    for (i, b) in config.blocks.iter().enumerate().filter(|(_, b)| b.is_active()) {
        if b.spatial_down == 0 || b.channel_down == 0 || b.spatial_hidden == 0 || b.channel_hidden == 0 {
            return Err(LatencyError::InvalidConfig(format!("zero dim in block {}", i + 1)));
        }
    }
    Ok(())
}

/// `c^C(a_k)`: TEE CPU time of one active sub-network block.
pub fn tee_block_cost(block: &BlockSpec, globals: (usize, usize), profile: &CostProfile) -> Result<f64, LatencyError> {
    if !block.is_active() {
        return Err(LatencyError::InactiveBlock(0));
    }
    let macs = block.mac_count(globals.0, globals.1) as f64;
    Ok(profile.tee_cost_coeffs.ms_per_mac * macs + profile.tee_cost_coeffs.overhead_ms)
}

fn payload_ms(bytes: f64, profile: &CostProfile) -> f64 {
    profile.transfer_base_ms + bytes / profile.transfer_bandwidth_bytes_per_ms
}

/// `c^T(a_k)` for the block at zero-based index `block_index`: the adapter output
/// (`spatial_down^2` positions, all backbone channels) crosses the link.
pub fn transfer_cost(
    block_index: usize,
    config: &Configuration,
    io_dims: &BackboneDims,
    profile: &CostProfile,
) -> Result<f64, LatencyError> {
    let block = config
        .blocks
        .get(block_index)
        .ok_or_else(|| LatencyError::InvalidConfig(format!("no block {}", block_index + 1)))?;
    if !block.is_active() {
        return Err(LatencyError::InactiveBlock(block_index));
    }
    let dims = io_dims
        .blocks
        .get(block_index)
        .ok_or_else(|| LatencyError::InvalidConfig(format!("no io dims for block {}", block_index + 1)))?;
    let elements = (block.tokens() * dims.channels) as f64;
    Ok(payload_ms(BYTES_PER_ELEMENT as f64 * elements, profile))
}

/// Combined `c^T + c^C` per active block, in transfer order.
pub(crate) fn tee_segment_costs(
    config: &Configuration,
    profile: &CostProfile,
    io_dims: &BackboneDims,
) -> Result<Vec<(usize, f64, f64)>, LatencyError> {
    config
        .transfer_points()
        .into_iter()
        .map(|k| {
            let t = transfer_cost(k, config, io_dims, profile)?;
            let c = tee_block_cost(&config.blocks[k], (config.spatial_up, config.channel_up), profile)?;
            Ok((k, t, c))
        })
        .collect()
}

/// Closed-form parallel latency `g(a)`.
///
/// With transfer points `p_1 < ... < p_K`:
/// `sum_{l<=p_1} c^G_l + c^A_{p_1} + sum_k max(c^T_k + c^C_k, sum_{p_k<l<=p_{k+1}} c^G_l + c^A_{p_{k+1}})
///  + max(c^T_K + c^C_K, sum_{l>p_K} c^G_l) + classifier`. With no transfers it is `sum c^G`.
pub fn parallel_latency(config: &Configuration, profile: &CostProfile, io_dims: &BackboneDims) -> Result<f64, LatencyError> {
    check_inputs(config, profile, io_dims)?;
    let g = &profile.gpu_block_ms;
    let segments = tee_segment_costs(config, profile, io_dims)?;
    if segments.is_empty() {
        return Ok(profile.backbone_ms());
    }
    let gpu_sum = |from: usize, to: usize| g[from..to].iter().sum::<f64>();
    let p1 = segments[0].0;
    let mut total = gpu_sum(0, p1 + 1) + profile.adapter_ms[p1];
    for pair in segments.windows(2) {
        let (pk, t, c) = pair[0];
        let pnext = pair[1].0;
        let gpu_side = gpu_sum(pk + 1, pnext + 1) + profile.adapter_ms[pnext];
        total += (t + c).max(gpu_side);
    }
    let &(pk, t, c) = segments.last().expect("non-empty");
    total += (t + c).max(gpu_sum(pk + 1, g.len()));
    Ok(total + profile.classifier_ms)
}

/// Split-partition baseline: blocks `1..=split` on the GPU, the rest on the TEE CPU at
/// `cpu_slowdown` times their GPU cost, one transfer in between. Purely sequential.
pub fn sequential_baseline_latency(split_layer: usize, profile: &CostProfile, io_dims: &BackboneDims) -> Result<f64, LatencyError> {
    profile.check()?;
    let l = profile.num_blocks();
    if split_layer > l {
        return Err(LatencyError::SplitOutOfRange { split: split_layer, blocks: l });
    }
    if io_dims.blocks.len() != l {
        return Err(LatencyError::InvalidConfig(format!("{} io dims for a {l}-block profile", io_dims.blocks.len())));
    }
    let g = &profile.gpu_block_ms;
    let gpu: f64 = g[..split_layer].iter().sum();
    let tee: f64 = profile.cpu_slowdown * g[split_layer..].iter().sum::<f64>();
    let transfer = if split_layer == 0 || split_layer == l {
        0.0
    } else {
        payload_ms((BYTES_PER_ELEMENT as usize * io_dims.blocks[split_layer - 1].elements()) as f64, profile)
    };
    Ok(gpu + transfer + tee)
}

/// Worst `c^T + c^C` any admissible block at index `k` can incur.
fn worst_tee_segment(k: usize, ranges: &SearchFactorRanges, profile: &CostProfile, io_dims: &BackboneDims) -> f64 {
    let su = *ranges.su_choices.last().expect("non-empty");
    let cu = *ranges.cu_choices.last().expect("non-empty");
    let mut worst = 0.0f64;
    for &op_type in ranges.type_choices.iter().filter(|t| t.is_active()) {
        for &sd in &ranges.sd_choices {
            for &cd in &ranges.cd_choices {
                for &sh in &ranges.sh_choices {
                    for &ch in &ranges.ch_choices {
                        let b = BlockSpec { op_type, spatial_down: sd, channel_down: cd, spatial_hidden: sh, channel_hidden: ch };
                        let c = profile.tee_cost_coeffs.ms_per_mac * b.mac_count(su, cu) as f64 + profile.tee_cost_coeffs.overhead_ms;
                        let t = payload_ms((BYTES_PER_ELEMENT as usize * b.tokens() * io_dims.blocks[k].channels) as f64, profile);
                        worst = worst.max(t + c);
                    }
                }
            }
        }
    }
    worst
}

/// Latency ceiling of the hypervolume reference point:
/// `2 sum c^G + sum c^A + sum_k worst(c^T + c^C) + classifier`, which every admissible
/// configuration stays below.
pub fn latency_ceiling(ranges: &SearchFactorRanges, profile: &CostProfile, io_dims: &BackboneDims) -> Result<f64, LatencyError> {
    profile.check()?;
    if io_dims.blocks.len() != profile.num_blocks() || ranges.num_blocks != profile.num_blocks() {
        return Err(LatencyError::InvalidConfig("ranges, profile and io dims disagree on block count".into()));
    }
    let tee: f64 = (0..profile.num_blocks()).map(|k| worst_tee_segment(k, ranges, profile, io_dims)).sum();
    Ok(2.0 * profile.backbone_ms() + profile.adapter_ms.iter().sum::<f64>() + tee + profile.classifier_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{FeatureDims, OpType};

    pub(crate) fn dims4() -> BackboneDims {
        BackboneDims { blocks: vec![FeatureDims { channels: 10, resolution: 4 }; 4], num_classes: 8 }
    }

    fn profile4() -> CostProfile {
        CostProfile {
            gpu_block_ms: vec![2.0; 4],
            adapter_ms: vec![1.0; 4],
            transfer_base_ms: 1.0,
            transfer_bandwidth_bytes_per_ms: 4000.0,
            tee_cost_coeffs: TeeCostCoeffs { ms_per_mac: 0.0, overhead_ms: 1.0 },
            classifier_ms: 0.0,
            cpu_slowdown: 4.0,
        }
    }

    fn block(op_type: OpType, sd: usize) -> BlockSpec {
        BlockSpec { op_type, spatial_down: sd, channel_down: 2, spatial_hidden: 8, channel_hidden: 8 }
    }

    fn config_with(active: &[(usize, BlockSpec)]) -> Configuration {
        let mut c = Configuration { spatial_up: 4, channel_up: 16, blocks: vec![block(OpType::Inactive, 2); 4] };
        for &(i, b) in active {
            c.blocks[i] = b;
        }
        c
    }

    #[test]
    fn no_transfers_is_pure_backbone() {
        let p = profile4();
        assert_eq!(parallel_latency(&config_with(&[]), &p, &dims4()).unwrap(), 8.0);
    }

    #[test]
    fn hand_example_nine_ms() {
        // p_1 = 2, c^A_2 = 1, c^T = 2 (4000 bytes / 4000 + 1), c^C = 1 -> (2+2)+1+max(3, 2+2) = 9
        let p = profile4();
        let b = BlockSpec { op_type: OpType::ChannelMixing, spatial_down: 10, channel_down: 2, spatial_hidden: 8, channel_hidden: 8 };
        let c = config_with(&[(1, b)]);
        let dims = BackboneDims { blocks: vec![FeatureDims { channels: 10, resolution: 4 }; 4], num_classes: 8 };
        assert_eq!(transfer_cost(1, &c, &dims, &p).unwrap(), 2.0);
        assert_eq!(parallel_latency(&c, &p, &dims).unwrap(), 9.0);
    }

    #[test]
    fn zero_mac_rate_leaves_overhead() {
        let p = profile4();
        assert_eq!(tee_block_cost(&block(OpType::SpatialMixing, 4), (8, 32), &p).unwrap(), 1.0);
        assert!(tee_block_cost(&block(OpType::Inactive, 4), (8, 32), &p).is_err());
    }

    #[test]
    fn channel_block_macs_match_hand_count() {
        // C^d = 2, C^h = 8, C^u = 16, S^d = 2 (4 tokens), S^u = 4:
        // mixing 4*2*8 = 64, channel up 4*8*16 = 512, token up 4*4*16 = 256
        let mut p = profile4();
        p.tee_cost_coeffs = TeeCostCoeffs { ms_per_mac: 1.0, overhead_ms: 0.0 };
        let b = BlockSpec { op_type: OpType::ChannelMixing, spatial_down: 2, channel_down: 2, spatial_hidden: 64, channel_hidden: 8 };
        assert_eq!(tee_block_cost(&b, (4, 16), &p).unwrap(), (64 + 512 + 256) as f64);
    }

    #[test]
    fn spatial_hidden_raises_tee_cost() {
        let mut p = profile4();
        p.tee_cost_coeffs.ms_per_mac = 1e-3;
        let mut b = block(OpType::SpatialMixing, 4);
        let before = tee_block_cost(&b, (8, 32), &p).unwrap();
        b.spatial_hidden *= 2;
        assert!(tee_block_cost(&b, (8, 32), &p).unwrap() > before);
    }

    #[test]
    fn transfer_cost_limits_and_monotonicity() {
        let mut p = profile4();
        p.transfer_bandwidth_bytes_per_ms = 1e18;
        let c = config_with(&[(0, block(OpType::ChannelMixing, 8))]);
        assert!((transfer_cost(0, &c, &dims4(), &p).unwrap() - 1.0).abs() < 1e-12);
        let p = profile4();
        let small = config_with(&[(0, block(OpType::ChannelMixing, 4))]);
        assert!(transfer_cost(0, &small, &dims4(), &p).unwrap() < transfer_cost(0, &c, &dims4(), &p).unwrap());
        assert_eq!(transfer_cost(1, &c, &dims4(), &p), Err(LatencyError::InactiveBlock(1)));
    }

    #[test]
    fn sequential_baseline_cases() {
        let p = profile4();
        let d = dims4();
        assert_eq!(sequential_baseline_latency(4, &p, &d).unwrap(), 8.0);
        assert_eq!(sequential_baseline_latency(0, &p, &d).unwrap(), 32.0);
        for split in 1..4 {
            assert!(sequential_baseline_latency(split, &p, &d).unwrap() > 8.0);
        }
        assert!(matches!(sequential_baseline_latency(5, &p, &d), Err(LatencyError::SplitOutOfRange { .. })));
    }

    #[test]
    fn classifier_appended_after_final_max() {
        let mut p = profile4();
        p.classifier_ms = 0.5;
        let c = config_with(&[(3, block(OpType::SpatialMixing, 2))]);
        let t = transfer_cost(3, &c, &dims4(), &p).unwrap();
        let expected = 8.0 + 1.0 + (t + 1.0) + 0.5;
        assert!((parallel_latency(&c, &p, &dims4()).unwrap() - expected).abs() < 1e-12);
        // classifier is not charged without a sub-network
        assert_eq!(parallel_latency(&config_with(&[]), &p, &dims4()).unwrap(), 8.0);
    }

    #[test]
    fn invalid_profile_rejected() {
        let mut p = profile4();
        p.transfer_bandwidth_bytes_per_ms = 0.0;
        assert!(parallel_latency(&config_with(&[]), &p, &dims4()).is_err());
        let mut p = profile4();
        p.adapter_ms.pop();
        assert!(p.check().is_err());
    }

    #[test]
    fn ceiling_dominates_samples() {
        let ranges = SearchFactorRanges::default();
        let mut p = profile4();
        p.tee_cost_coeffs.ms_per_mac = 1e-4;
        let ceiling = latency_ceiling(&ranges, &p, &dims4()).unwrap();
        for s in 0..200 {
            let c = crate::search_space::sample_random(&ranges, s);
            assert!(parallel_latency(&c, &p, &dims4()).unwrap() < ceiling);
        }
    }

    #[test]
    fn profile_toml_round_trip() {
        let p = profile4();
        let text = p.to_toml().unwrap();
        assert!(text.starts_with("version = 1"));
        assert_eq!(CostProfile::from_toml(&text).unwrap(), p);
        assert!(CostProfile::from_toml(&text.replace("version = 1", "version = 2")).is_err());
        assert!(CostProfile::from_toml(&format!("{text}\nbogus = 3\n")).is_err());
    }
}
