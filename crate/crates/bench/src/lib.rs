//! Fixtures shared by the criterion benches.

use tvl_core::{RunConfig, Tensor};

/// Deterministic pseudo-random fill in [-1, 1).
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let x = (i ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
            (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// The default run configuration without any file I/O.
pub fn bench_config() -> RunConfig {
    RunConfig::with_output_dir(std::env::temp_dir().join("tvl-bench"))
}
