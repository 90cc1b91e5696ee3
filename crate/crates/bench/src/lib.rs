//! Criterion benchmarks for the skewprune kernels; see `benches/`.
