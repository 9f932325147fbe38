#![allow(dead_code)]

use addq_core::{CodebookSet, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

pub fn random_codebooks(rng: &mut ChaCha8Rng, m: usize, k: usize, g: usize) -> CodebookSet {
    let entries = (0..m * k * g)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    CodebookSet::new(m, k, g, entries).unwrap()
}

/// Random symmetric positive definite `g×g` matrix `AᵀA + 0.1 I`.
pub fn random_spd(rng: &mut ChaCha8Rng, g: usize) -> Vec<f64> {
    let a = random_vec(rng, g * g, 1.0);
    let mut h = vec![0.0; g * g];
    for p in 0..g {
        for q in 0..g {
            h[p * g + q] = (0..g).map(|r| a[r * g + p] * a[r * g + q]).sum::<f64>();
        }
        h[p * g + p] += 0.1;
    }
    h
}

pub fn identity(g: usize) -> Vec<f64> {
    let mut h = vec![0.0; g * g];
    for p in 0..g {
        h[p * g + p] = 1.0;
    }
    h
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
