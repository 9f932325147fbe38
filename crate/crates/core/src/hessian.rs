//! Damped block-diagonal Hessian `H_j = X_jᵀ X_j + λ I`, one block per
//! column block of width `g`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quantcore::{check_symmetric, GroupLayout};
use crate::tensor_io::DenseMatrix;

pub const DEFAULT_DAMP_FACTOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct HessianBank {
    g: usize,
    blocks: Vec<f64>,
    lambda: f64,
}

impl HessianBank {
    /// Wraps precomputed (already damped) blocks after checking they are
    /// symmetric positive definite.
    pub fn from_blocks(g: usize, blocks: Vec<f64>, lambda: f64) -> Result<Self> {
        if g == 0 || !blocks.len().is_multiple_of(g * g) {
            return Err(Error::Dimension(format!(
                "{} values do not form {g}x{g} blocks",
                blocks.len()
            )));
        }
        let bank = Self { g, blocks, lambda };
        for j in 0..bank.num_blocks() {
            let b = bank.block(j);
            check_symmetric(b, g, 1e-6)?;
            if DMatrix::from_row_slice(g, g, b).cholesky().is_none() {
                return Err(Error::Contract(format!(
                    "block {j} is not positive definite"
                )));
            }
        }
        Ok(bank)
    }

    /// Identity blocks: the Hessian metric degenerates to squared Euclidean.
    pub fn identity(num_blocks: usize, g: usize) -> Self {
        let mut blocks = vec![0.0; num_blocks * g * g];
        for j in 0..num_blocks {
            for a in 0..g {
                blocks[j * g * g + a * g + a] = 1.0;
            }
        }
        Self {
            g,
            blocks,
            lambda: 0.0,
        }
    }

    pub fn group_size(&self) -> usize {
        self.g
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len() / (self.g * self.g)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn block(&self, j: usize) -> &[f64] {
        let s = self.g * self.g;
        &self.blocks[j * s..(j + 1) * s]
    }

    /// Block for group `i`, which is shared by every row.
    #[inline]
    pub fn block_for(&self, layout: &GroupLayout, i: usize) -> &[f64] {
        self.block(layout.block_of(i))
    }

    pub fn block_for_group(&self, layout: &GroupLayout, group_index: usize) -> Result<&[f64]> {
        if group_index >= layout.num_groups() {
            return Err(Error::Domain(format!(
                "group {group_index} out of range for {} groups",
                layout.num_groups()
            )));
        }
        if layout.g != self.g || layout.blocks_per_row() != self.num_blocks() {
            return Err(Error::Dimension(format!(
                "bank has {} blocks of size {}, layout needs {} of size {}",
                self.num_blocks(),
                self.g,
                layout.blocks_per_row(),
                layout.g
            )));
        }
        Ok(self.block_for(layout, group_index))
    }

    pub fn check_layout(&self, layout: &GroupLayout) -> Result<()> {
        if layout.g != self.g || layout.blocks_per_row() != self.num_blocks() {
            return Err(Error::Dimension(format!(
                "bank has {} blocks of size {}, layout needs {} of size {}",
                self.num_blocks(),
                self.g,
                layout.blocks_per_row(),
                layout.g
            )));
        }
        Ok(())
    }
}

/// Builds the damped bank from calibration activations `x` (`n × d_in`).
///
/// λ is `damp_factor` times the mean of all `d_in` undamped diagonal
/// entries, shared by every block.
pub fn build_hessian_bank(x: &DenseMatrix, g: usize, damp_factor: f64) -> Result<HessianBank> {
    let d_in = x.cols();
    if g == 0 || d_in == 0 || !d_in.is_multiple_of(g) {
        return Err(Error::Dimension(format!(
            "group size {g} does not divide {d_in} columns"
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Domain("calibration matrix has no rows".into()));
    }
    if !(damp_factor > 0.0 && damp_factor.is_finite()) {
        return Err(Error::Domain(format!(
            "damp factor {damp_factor} must be positive"
        )));
    }
    let nb = d_in / g;
    let mut blocks: Vec<f64> = (0..nb)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut h = vec![0.0f64; g * g];
            for s in 0..x.rows() {
                let xs = &x.row(s)[j * g..(j + 1) * g];
                for a in 0..g {
                    let xa = xs[a] as f64;
                    for b in 0..g {
                        h[a * g + b] += xa * xs[b] as f64;
                    }
                }
            }
            h
        })
        .collect();

    let diag_sum: f64 = (0..nb)
        .flat_map(|j| (0..g).map(move |a| (j, a)))
        .map(|(j, a)| blocks[j * g * g + a * g + a])
        .sum();
    let lambda = damp_factor * diag_sum / d_in as f64;
    if lambda <= 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    for j in 0..nb {
        for a in 0..g {
            blocks[j * g * g + a * g + a] += lambda;
        }
    }
    HessianBank::from_blocks(g, blocks, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_activations() {
        let bank = build_hessian_bank(&DenseMatrix::identity(2), 2, DEFAULT_DAMP_FACTOR).unwrap();
        assert_eq!(bank.num_blocks(), 1);
        assert!((bank.lambda() - 0.01).abs() < 1e-15);
        assert_eq!(bank.block(0), &[1.01, 0.0, 0.0, 1.01]);
    }

    #[test]
    fn zero_activations_refused() {
        let x = DenseMatrix::zeros(4, 4);
        assert!(matches!(
            build_hessian_bank(&x, 2, 0.01),
            Err(Error::DegenerateCalibration)
        ));
    }

    #[test]
    fn lambda_is_linear_in_damp_factor() {
        let x = DenseMatrix::new(3, 4, (0..12).map(|v| (v as f32 - 5.0) * 0.3).collect()).unwrap();
        let a = build_hessian_bank(&x, 2, 0.01).unwrap();
        let b = build_hessian_bank(&x, 2, 0.02).unwrap();
        assert_eq!(b.lambda(), 2.0 * a.lambda());
    }

    #[test]
    fn block_lookup_follows_layout() {
        let x = DenseMatrix::new(5, 6, (0..30).map(|v| ((v * 7) % 11) as f32).collect()).unwrap();
        let bank = build_hessian_bank(&x, 2, 0.01).unwrap();
        let layout = GroupLayout::new(7, 6, 2).unwrap();
        assert_eq!(bank.block_for_group(&layout, 0).unwrap(), bank.block(0));
        let j = 2;
        assert_eq!(
            bank.block_for_group(&layout, layout.group_index(0, j))
                .unwrap(),
            bank.block_for_group(&layout, layout.group_index(5, j))
                .unwrap()
        );
        for i in 0..layout.num_groups() {
            let expected = i - (i / 3) * 3;
            assert_eq!(
                bank.block_for_group(&layout, i).unwrap(),
                bank.block(expected)
            );
        }
        assert!(bank.block_for_group(&layout, layout.num_groups()).is_err());
    }

    #[test]
    fn from_blocks_rejects_indefinite() {
        assert!(HessianBank::from_blocks(2, vec![1.0, 2.0, 2.0, 1.0], 0.0).is_err());
        assert!(HessianBank::from_blocks(2, vec![2.0, 1.0, 1.0, 2.0], 0.0).is_ok());
    }
}
