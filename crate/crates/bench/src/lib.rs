//! Criterion benchmarks for segvid live in `benches/`.
