//! Seeded synthetic layers: Gaussian weights with whole-group outliers and
//! Gaussian calibration activations with an optional covariance shift.
//!
//! All randomness comes from ChaCha8 substreams. A substream is selected by
//! the run seed plus a 64-bit stream id `(tag << 32) | index`, where `tag`
//! names the matrix or purpose ([`StreamTag`]) and `index` is usually the
//! row. Rows can therefore be generated in any order or in parallel with
//! identical results.

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum StreamTag {
    Weights = 1,
    Outliers = 2,
    Activations = 3,
    Shift = 4,
    KMeans = 5,
    Holdout = 6,
    Experiment = 7,
}

/// ChaCha8 generator for `(seed, tag, index)`.
pub fn substream(seed: u64, tag: StreamTag, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 32) | index as u64);
    rng
}

/// Derives an independent 64-bit seed, e.g. for a sub-experiment.
pub fn derive_seed(seed: u64, tag: StreamTag, index: u32) -> u64 {
    substream(seed, tag, index).random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub d_out: usize,
    pub d_in: usize,
    pub g: usize,
    pub base_std: f64,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.d_in == 0 || self.g == 0 {
            return Err(Error::Domain("weight dimensions must be positive".into()));
        }
        if !self.d_in.is_multiple_of(self.g) {
            return Err(Error::Dimension(format!(
                "group size {} does not divide d_in = {}",
                self.g, self.d_in
            )));
        }
        if !(self.base_std > 0.0 && self.base_std.is_finite()) {
            return Err(Error::Domain(format!(
                "base_std = {} must be positive",
                self.base_std
            )));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::Domain(format!(
                "outlier_fraction = {} outside [0, 1]",
                self.outlier_fraction
            )));
        }
        if !(self.outlier_scale >= 1.0 && self.outlier_scale.is_finite()) {
            return Err(Error::Domain(format!(
                "outlier_scale = {} must be at least 1",
                self.outlier_scale
            )));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.d_out * self.d_in / self.g
    }

    pub fn num_outlier_groups(&self) -> usize {
        (self.outlier_fraction * self.num_groups() as f64).round() as usize
    }
}

/// Indices of the groups that [`gen_weights`] scales as outliers, ascending.
pub fn outlier_groups(spec: &WeightSpec) -> Vec<usize> {
    let mut rng = substream(spec.seed, StreamTag::Outliers, 0);
    let mut picked = sample(&mut rng, spec.num_groups(), spec.num_outlier_groups()).into_vec();
    picked.sort_unstable();
    picked
}

pub fn gen_weights(spec: &WeightSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let mut values: Vec<f64> = (0..spec.d_out)
        .into_par_iter()
        .flat_map_iter(|r| {
            let mut rng = substream(spec.seed, StreamTag::Weights, r as u32);
            (0..spec.d_in)
                .map(move |_| spec.base_std * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>()
        })
        .collect();
    for i in outlier_groups(spec) {
        for v in &mut values[i * spec.g..(i + 1) * spec.g] {
            *v *= spec.outlier_scale;
        }
    }
    DenseMatrix::new(
        spec.d_out,
        spec.d_in,
        values.into_iter().map(|v| v as f32).collect(),
    )
}

/// Per-dimension standard deviation of the activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StdProfile {
    Constant {
        std: f64,
    },
    /// Geometric decay from `std` on the first dimension to `std / ratio`
    /// on the last.
    Decaying {
        std: f64,
        ratio: f64,
    },
}

impl StdProfile {
    pub fn stds(&self, d_in: usize) -> Vec<f64> {
        match *self {
            StdProfile::Constant { std } => vec![std; d_in],
            StdProfile::Decaying { std, ratio } => {
                let span = (d_in.max(2) - 1) as f64;
                (0..d_in)
                    .map(|j| std * ratio.powf(-(j as f64) / span))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub n_rows: usize,
    pub d_in: usize,
    pub profile: StdProfile,
    pub shift_scale: f64,
    pub seed: u64,
}

impl ActivationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.d_in == 0 {
            return Err(Error::Domain(
                "activation dimensions must be positive".into(),
            ));
        }
        let ok = match self.profile {
            StdProfile::Constant { std } => std > 0.0 && std.is_finite(),
            StdProfile::Decaying { std, ratio } => {
                std > 0.0 && std.is_finite() && ratio >= 1.0 && ratio.is_finite()
            }
        };
        if !ok {
            return Err(Error::Domain(format!(
                "invalid std profile {:?}",
                self.profile
            )));
        }
        if !(self.shift_scale > 0.0 && self.shift_scale.is_finite()) {
            return Err(Error::Domain(format!(
                "shift_scale = {} must be positive",
                self.shift_scale
            )));
        }
        Ok(())
    }

    /// The seeded half of the dimensions scaled by a shift, ascending.
    pub fn shifted_dims(&self) -> Vec<usize> {
        let mut rng = substream(self.seed, StreamTag::Shift, 0);
        let mut dims = sample(&mut rng, self.d_in, self.d_in / 2).into_vec();
        dims.sort_unstable();
        dims
    }

    pub fn effective_stds(&self, shifted: bool) -> Vec<f64> {
        let mut stds = self.profile.stds(self.d_in);
        if shifted {
            for j in self.shifted_dims() {
                stds[j] *= self.shift_scale;
            }
        }
        stds
    }
}

pub fn gen_activations(spec: &ActivationSpec, shifted: bool) -> Result<DenseMatrix> {
    gen_activations_tagged(spec, shifted, StreamTag::Activations)
}

/// Same distribution as [`gen_activations`] but an independent sample, for
/// held-out evaluation batches.
pub fn gen_holdout_activations(spec: &ActivationSpec, shifted: bool) -> Result<DenseMatrix> {
    gen_activations_tagged(spec, shifted, StreamTag::Holdout)
}

fn gen_activations_tagged(
    spec: &ActivationSpec,
    shifted: bool,
    tag: StreamTag,
) -> Result<DenseMatrix> {
    spec.validate()?;
    if spec.n_rows < spec.d_in {
        warn!(
            "{} activation rows for {} dimensions; the Hessian will be rank deficient",
            spec.n_rows, spec.d_in
        );
    }
    let stds = spec.effective_stds(shifted);
    let data: Vec<f32> = (0..spec.n_rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            let mut rng = substream(spec.seed, tag, r as u32);
            stds.iter()
                .map(|&s| (s * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    DenseMatrix::new(spec.n_rows, spec.d_in, data)
}
