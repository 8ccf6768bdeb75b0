//! Fixtures shared by the benchmarks.

use polar_core::dataset::{generate_synthetic, SynthConfig};
use polar_core::Dataset;

/// Synthetic data with three sources, the shape used throughout the benchmarks.
pub fn synthetic(n: usize, d: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig::new(n, 2, d, vec![0.85, 0.75, 0.7], vec![0.9, 0.6, 0.5]);
    generate_synthetic(&cfg, seed).expect("valid synthetic config").dataset
}

/// Symmetric positive-definite matrix with unit diagonal and decaying correlations.
pub fn correlation_matrix(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| 0.6f64.powi((i as i32 - j as i32).abs())).collect()).collect()
}
