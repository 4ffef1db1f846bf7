//! Criterion benchmarks for the diffusion core live in `benches/`.
