//! Criterion benchmarks for the clustering core; see `benches/`.
