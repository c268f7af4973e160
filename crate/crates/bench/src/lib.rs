//! Criterion benchmarks for the ttsa kernels live in `benches/`.
