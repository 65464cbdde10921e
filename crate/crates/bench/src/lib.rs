//! Shared fixtures for the criterion benchmarks.

use vscout_core::numerics::{DataMatrix, RngStream};

/// Standard-normal matrix with a deterministic seed.
pub fn gaussian_matrix(n: usize, p: usize, seed: u64) -> DataMatrix {
    let mut rng = RngStream::new(seed);
    let values: Vec<f64> = (0..n * p).map(|_| rng.normal()).collect();
    DataMatrix::new(n, p, values).expect("gaussian matrix")
}

/// Piecewise-constant series with additive noise; `levels` holds the
/// (segment length, mean) pairs.
pub fn step_series(levels: &[(usize, f64)], noise: f64, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed);
    let mut out = Vec::new();
    for &(len, mean) in levels {
        for _ in 0..len {
            out.push(mean + noise * rng.normal());
        }
    }
    out
}
