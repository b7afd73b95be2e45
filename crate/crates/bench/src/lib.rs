//! Criterion benchmarks for the solvers and the path simulator; see `benches/`.
