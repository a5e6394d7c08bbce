//! Criterion benchmarks for the engine live in `benches/`; this crate has no API.
