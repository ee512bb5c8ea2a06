//! Criterion benchmarks for the latency model and the Pareto utilities; see `benches/`.
