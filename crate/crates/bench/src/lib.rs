//! Fixtures shared by the kernel benchmarks.

use flylora::adapters::FlyAdapter;
use flylora::linalg::SeededStream;
use flylora::{AdapterConfig, DenseMatrix, Variant};

/// FlyLoRA adapter with random base weight and `B` at the toy scale
/// (`p = n/4`).
pub fn fly_adapter(m: usize, n: usize, r: usize, k: usize, seed: u64) -> FlyAdapter {
    let mut s = SeededStream::new(seed, 99);
    let base = DenseMatrix::from_vec(m, n, s.normal_vec(m * n)).expect("finite");
    let mut a = FlyAdapter::new(AdapterConfig::new(Variant::FlyLora, m, n, r, k), base, seed).expect("valid config");
    a.b = DenseMatrix::from_vec(m, r, s.normal_vec(m * r)).expect("finite");
    a
}

pub fn input(n: usize, seed: u64) -> Vec<f64> {
    SeededStream::new(seed, 7).normal_vec(n)
}
