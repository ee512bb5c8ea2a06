//! Event-driven replay of the handshake execution schedule.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{check_inputs, tee_segment_costs, CostProfile, LatencyError};
use crate::search_space::{BackboneDims, Configuration};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resource {
    Gpu,
    Link,
    Cpu,
}

impl Resource {
    pub fn name(self) -> &'static str {
        match self {
            Resource::Gpu => "GPU",
            Resource::Link => "LINK",
            Resource::Cpu => "CPU",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub resource: Resource,
    pub label: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    /// Ordered by start time, then resource.
    pub events: Vec<ScheduleEvent>,
    pub makespan: f64,
}

impl ScheduleTrace {
    pub fn on(&self, resource: Resource) -> impl Iterator<Item = &ScheduleEvent> {
        self.events.iter().filter(move |e| e.resource == resource)
    }

    /// `resource,label,start,end` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("resource,label,start,end\n");
        for e in &self.events {
            let _ = writeln!(s, "{},{},{},{}", e.resource.name(), e.label, e.start, e.end);
        }
        s
    }
}

struct Task {
    resource: Resource,
    label: String,
    duration: f64,
    deps: Vec<usize>,
}

#[derive(PartialEq)]
struct Completion {
    time: f64,
    task: usize,
}

impl Eq for Completion {}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on time, ties by task index
        other.time.total_cmp(&self.time).then_with(|| other.task.cmp(&self.task))
    }
}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Runs tasks on their resources in submission order; a task starts once its resource is
/// free and all dependencies have completed.
fn run(tasks: &[Task]) -> Vec<(f64, f64)> {
    let mut queues: [VecDeque<usize>; 3] = Default::default();
    for (i, t) in tasks.iter().enumerate() {
        queues[t.resource.slot()].push_back(i);
    }
    let mut busy = [false; 3];
    let mut finished: Vec<Option<f64>> = vec![None; tasks.len()];
    let mut times = vec![(0.0, 0.0); tasks.len()];
    let mut heap = BinaryHeap::new();
    let mut now = 0.0f64;
    loop {
        for slot in 0..3 {
            if busy[slot] {
                continue;
            }
            let Some(&next) = queues[slot].front() else { continue };
            if tasks[next].deps.iter().all(|&d| finished[d].is_some()) {
                queues[slot].pop_front();
                busy[slot] = true;
                let end = now + tasks[next].duration;
                times[next] = (now, end);
                heap.push(Completion { time: end, task: next });
            }
        }
        let Some(done) = heap.pop() else { break };
        now = done.time;
        finished[done.task] = Some(done.time);
        busy[tasks[done.task].resource.slot()] = false;
    }
    assert!(finished.iter().all(Option::is_some), "schedule deadlocked");
    times
}

/// Discrete-event simulation of the parallel schedule.
///
/// Transfer `k+1` (and the GPU block following adapter `p_{k+1}`) waits for both the adapter
/// output and the CPU's completion of sub-network block `k`. Transfer and TEE compute of one
/// block are serialized. The TEE classifier runs after the last sub-network block and the
/// last backbone block.
pub fn simulate_schedule(config: &Configuration, profile: &CostProfile, io_dims: &BackboneDims) -> Result<ScheduleTrace, LatencyError> {
    check_inputs(config, profile, io_dims)?;
    let segments = tee_segment_costs(config, profile, io_dims)?;
    let l = profile.num_blocks();
    let mut tasks: Vec<Task> = Vec::new();
    let push = |tasks: &mut Vec<Task>, resource, label: String, duration, deps| {
        tasks.push(Task { resource, label, duration, deps });
        tasks.len() - 1
    };

    // GPU timeline with adapters inserted after tapped blocks.
    let mut adapter_task = vec![None; l];
    let mut gpu_tasks = vec![0; l];
    for b in 0..l {
        gpu_tasks[b] = push(&mut tasks, Resource::Gpu, format!("gpu_block_{}", b + 1), profile.gpu_block_ms[b], vec![]);
        if segments.iter().any(|s| s.0 == b) {
            adapter_task[b] = Some(push(&mut tasks, Resource::Gpu, format!("adapter_{}", b + 1), profile.adapter_ms[b], vec![]));
        }
    }
    let mut prev_cpu: Option<usize> = None;
    for (k, &(p, t, c)) in segments.iter().enumerate() {
        let adapter = adapter_task[p].expect("adapter for active block");
        let mut deps = vec![adapter];
        deps.extend(prev_cpu);
        if p + 1 < l {
            // handshake: GPU resumes when the transfer can start
            tasks[gpu_tasks[p + 1]].deps = deps.clone();
        }
        let link = push(&mut tasks, Resource::Link, format!("transfer_{}", k + 1), t, deps);
        prev_cpu = Some(push(&mut tasks, Resource::Cpu, format!("tee_block_{}", k + 1), c, vec![link]));
    }
    if let Some(last) = prev_cpu {
        push(&mut tasks, Resource::Cpu, "tee_classifier".to_string(), profile.classifier_ms, vec![last, gpu_tasks[l - 1]]);
    }

    let times = run(&tasks);
    let mut events: Vec<ScheduleEvent> = tasks
        .iter()
        .zip(&times)
        .map(|(t, &(start, end))| ScheduleEvent { resource: t.resource, label: t.label.clone(), start, end })
        .collect();
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.resource.slot().cmp(&b.resource.slot())));
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    Ok(ScheduleTrace { events, makespan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{parallel_latency, TeeCostCoeffs};
    use crate::search_space::{BlockSpec, FeatureDims, OpType};

    fn busy(trace: &ScheduleTrace, rs: &[Resource], prefix: &str) -> Vec<(f64, f64)> {
        let mut iv: Vec<(f64, f64)> = trace
            .events
            .iter()
            .filter(|e| rs.contains(&e.resource) && e.end > e.start && e.label.starts_with(prefix))
            .map(|e| (e.start, e.end))
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (s, e) in iv {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        merged
    }

    fn setup() -> (Configuration, CostProfile, BackboneDims) {
        let profile = CostProfile {
            gpu_block_ms: vec![2.0; 4],
            adapter_ms: vec![1.0; 4],
            transfer_base_ms: 1.0,
            transfer_bandwidth_bytes_per_ms: 4000.0,
            tee_cost_coeffs: TeeCostCoeffs { ms_per_mac: 0.0, overhead_ms: 1.0 },
            classifier_ms: 0.0,
            cpu_slowdown: 4.0,
        };
        let dims = BackboneDims { blocks: vec![FeatureDims { channels: 10, resolution: 4 }; 4], num_classes: 8 };
        let off = BlockSpec { op_type: OpType::Inactive, spatial_down: 2, channel_down: 2, spatial_hidden: 8, channel_hidden: 8 };
        let mut config = Configuration { spatial_up: 4, channel_up: 16, blocks: vec![off; 4] };
        config.blocks[1] = BlockSpec { op_type: OpType::ChannelMixing, spatial_down: 10, ..off };
        (config, profile, dims)
    }

    #[test]
    fn hand_constructed_trace() {
        let (config, profile, dims) = setup();
        let trace = simulate_schedule(&config, &profile, &dims).unwrap();
        assert_eq!(trace.makespan, 9.0);
        assert_eq!(busy(&trace, &[Resource::Gpu], "gpu_block"), vec![(0.0, 4.0), (5.0, 9.0)]);
        assert_eq!(busy(&trace, &[Resource::Gpu], "adapter"), vec![(4.0, 5.0)]);
        assert_eq!(busy(&trace, &[Resource::Cpu, Resource::Link], ""), vec![(5.0, 8.0)]);
        assert_eq!(trace.on(Resource::Link).count(), 1);
        assert_eq!(trace.on(Resource::Cpu).filter(|e| e.label.starts_with("tee_block")).count(), 1);
    }

    #[test]
    fn no_transfers_gives_gpu_only_trace() {
        let (mut config, profile, dims) = setup();
        config.blocks[1].op_type = OpType::Inactive;
        let trace = simulate_schedule(&config, &profile, &dims).unwrap();
        assert!(trace.events.iter().all(|e| e.resource == Resource::Gpu));
        assert_eq!(trace.makespan, 8.0);
    }

    #[test]
    fn gpu_waits_at_handshake() {
        // two transfers with a slow CPU: the GPU must stall before block 3
        let (mut config, mut profile, dims) = setup();
        profile.tee_cost_coeffs.overhead_ms = 10.0;
        config.blocks[0] = config.blocks[1];
        let trace = simulate_schedule(&config, &profile, &dims).unwrap();
        let g3 = trace.events.iter().find(|e| e.label == "gpu_block_3").unwrap();
        let cpu1 = trace.events.iter().find(|e| e.label == "tee_block_1").unwrap();
        assert_eq!(g3.start, cpu1.end);
        assert_eq!(trace.makespan, parallel_latency(&config, &profile, &dims).unwrap());
    }

    #[test]
    fn csv_export() {
        let (config, profile, dims) = setup();
        let csv = simulate_schedule(&config, &profile, &dims).unwrap().to_csv();
        assert!(csv.starts_with("resource,label,start,end\nGPU,gpu_block_1,0,2\n"));
        assert!(csv.contains("LINK,transfer_1,5,7"));
    }
}
