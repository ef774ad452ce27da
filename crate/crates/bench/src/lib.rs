//! Criterion benchmarks for the mobiflow kernels live in `benches/`.
