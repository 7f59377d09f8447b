//! Criterion benchmarks for the autodiff kernels and a pre-training step; see `benches/`.
