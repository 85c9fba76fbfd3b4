//! Criterion benchmarks for the hot loops of the pipeline; see `benches/`.
