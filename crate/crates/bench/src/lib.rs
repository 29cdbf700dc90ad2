//! Criterion benchmarks for the enhancement pipeline live in `benches/`.
