//! Criterion benchmarks for `hte-core`; see `benches/pipeline.rs`.
