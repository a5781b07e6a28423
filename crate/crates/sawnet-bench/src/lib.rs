//! Benchmarks only; see `benches/kernels.rs`. The crate itself is empty.
