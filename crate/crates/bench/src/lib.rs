//! Criterion benchmarks for the core kernels; see the `benches` directory.
