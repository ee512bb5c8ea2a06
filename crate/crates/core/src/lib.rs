//! Search-before-training toolkit for TEE side-branch sub-networks.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`search_space`] describes sub-network configurations and their secure-memory footprint.
//! * [`latency`] prices a configuration under parallel REE/TEE execution, with a
//!   discrete-event oracle and a sequential-partition baseline.
//! * [`moo`] runs constrained bi-objective Bayesian optimization over configurations.
//! * [`nn`] is the neural substrate: reverse-mode autodiff, backbone/sub-network models,
//!   candidate training and self-poisoning joint training.
//! * [`attack`] measures how well a model-stealing adversary clones the deployed model.
//! * [`pipeline`] wires the stages together behind a single experiment file.

pub mod attack;
pub mod docfile;
pub mod latency;
pub mod moo;
pub mod nn;
pub mod pipeline;
pub mod search_space;
pub mod seed;

pub use latency::{CostProfile, ScheduleTrace};
pub use moo::{EvaluationRecord, ObjectivePoint, ParetoFront, ReferencePoint, SearchSettings};

pub use search_space::{BackboneDims, BlockSpec, Configuration, FeatureDims, MemoryFootprint, OpType, SearchFactorRanges};
