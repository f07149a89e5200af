//! Benchmarks live in `benches/`; run them with `cargo bench -p sonar-histnet-bench`.
