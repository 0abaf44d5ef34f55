//! Criterion benchmarks for chemoplan; see `benches/`.
