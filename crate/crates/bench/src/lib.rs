//! Benchmarks only; run `cargo bench -p vinet-bench`.
