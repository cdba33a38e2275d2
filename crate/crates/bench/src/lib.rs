//! Criterion benchmarks for the hot paths of `pgsgan-core`; see `benches/`.
