//! Criterion benchmarks for the denoising kernels; see `benches/`.
