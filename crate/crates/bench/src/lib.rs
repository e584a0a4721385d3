//! Criterion benchmarks for slicewise live in `benches/`.
