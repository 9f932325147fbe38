//! Greedy-vs-optimal gap decomposition, ρ sweeps and domain-shift scoring.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::{
    exhaustive_assign, greedy_assign, layer_metric_loss, quantize_layer, BeamConfig,
    QuantizeOutcome, DEFAULT_EXHAUSTIVE_CAP,
};
use crate::error::{Error, Result};
use crate::hessian::{build_hessian_bank, HessianBank, DEFAULT_DAMP_FACTOR};
use crate::initkm::KMeansConfig;
use crate::oaem::OaemConfig;
use crate::pipeline::{initialise, initialise_and_quantize, InitKind, InitSettings};
use crate::quantcore::{
    apply_row_scales, layer_loss, reconstruct_matrix, representational_ratio, CodebookSet,
    LayerProblem,
};
use crate::synth::{gen_activations, gen_weights, ActivationSpec, StdProfile, WeightSpec};
use crate::tensor_io::{DenseMatrix, QuantizedArtifact};

/// Split of `ε^g − ε*` for a two-codebook group.
///
/// With `δ = c_{1,i^g} − c_{1,i*}` and `r* = w − c_{1,i*}`, the gap is
/// `‖δ‖² + 2⟨δ, c_{2,j^g} − r*⟩ + (‖r* − c_{2,j^g}‖² − ε*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapDecomposition {
    pub delta: Vec<f64>,
    pub direct_cost: f64,
    pub coupling: f64,
    pub residual_mismatch: f64,
    pub eps_greedy: f64,
    pub eps_opt: f64,
    pub i_greedy: usize,
    pub j_greedy: usize,
    pub i_opt: usize,
    pub j_opt: usize,
}

impl GapDecomposition {
    pub fn gap(&self) -> f64 {
        self.eps_greedy - self.eps_opt
    }

    pub fn term_sum(&self) -> f64 {
        self.direct_cost + self.coupling + self.residual_mismatch
    }

    pub fn greedy_suboptimal(&self) -> bool {
        self.eps_greedy > self.eps_opt
    }
}

/// Decomposition in the plain Euclidean metric.
pub fn decompose_gap(w: &[f64], cb: &CodebookSet) -> Result<GapDecomposition> {
    let g = cb.group_size();
    let mut eye = vec![0.0; g * g];
    for a in 0..g {
        eye[a * g + a] = 1.0;
    }
    decompose_gap_weighted(w, cb, &eye)
}

/// Same split with every inner product taken in `H`.
pub fn decompose_gap_weighted(w: &[f64], cb: &CodebookSet, h: &[f64]) -> Result<GapDecomposition> {
    if cb.num_codebooks() != 2 {
        return Err(Error::Unsupported(format!(
            "gap decomposition needs M = 2, got M = {}",
            cb.num_codebooks()
        )));
    }
    let g = cb.group_size();
    if w.len() != g || h.len() != g * g {
        return Err(Error::Dimension(format!(
            "group of length {} and metric of length {} for g = {g}",
            w.len(),
            h.len()
        )));
    }
    let greedy = greedy_assign(w, cb, h);
    let (opt, eps_opt) = exhaustive_assign(w, cb, h, DEFAULT_EXHAUSTIVE_CAP)?;
    let (ig, jg) = (greedy[0] as usize, greedy[1] as usize);
    let (io, jo) = (opt[0] as usize, opt[1] as usize);

    let c1g = cb.codeword(0, ig);
    let c1o = cb.codeword(0, io);
    let c2g = cb.codeword(1, jg);
    let delta: Vec<f64> = c1g
        .iter()
        .zip(c1o)
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let r_opt: Vec<f64> = w.iter().zip(c1o).map(|(&x, &c)| x - c as f64).collect();
    let c2_minus_r: Vec<f64> = c2g
        .iter()
        .zip(&r_opt)
        .map(|(&c, &r)| c as f64 - r)
        .collect();

    let inner = |a: &[f64], b: &[f64]| -> f64 {
        (0..g)
            .map(|p| a[p] * (0..g).map(|q| h[p * g + q] * b[q]).sum::<f64>())
            .sum()
    };
    let mut r_greedy = vec![0.0; g];
    cb.residual_into(w, &greedy, &mut r_greedy);
    let eps_greedy = inner(&r_greedy, &r_greedy);
    Ok(GapDecomposition {
        direct_cost: inner(&delta, &delta),
        coupling: 2.0 * inner(&delta, &c2_minus_r),
        residual_mismatch: inner(&c2_minus_r, &c2_minus_r) - eps_opt,
        delta,
        eps_greedy,
        eps_opt,
        i_greedy: ig,
        j_greedy: jg,
        i_opt: io,
        j_opt: jo,
    })
}

/// Everything needed to generate one synthetic layer apart from its size
/// and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesign {
    pub d_in: usize,
    pub g: usize,
    pub base_std: f64,
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub calib_rows: usize,
    pub profile: StdProfile,
    pub shift_scale: f64,
    pub damp_factor: f64,
}

impl Default for LayerDesign {
    fn default() -> Self {
        Self {
            d_in: 64,
            g: 4,
            base_std: 0.02,
            outlier_fraction: 0.05,
            outlier_scale: 10.0,
            calib_rows: 256,
            profile: StdProfile::Decaying {
                std: 1.0,
                ratio: 30.0,
            },
            shift_scale: 4.0,
            damp_factor: DEFAULT_DAMP_FACTOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLayer {
    pub problem: LayerProblem,
    pub bank: HessianBank,
    pub weights_spec: WeightSpec,
    pub activation_spec: ActivationSpec,
}

impl LayerDesign {
    /// Layer holding `num_groups` groups; `num_groups · g` must be a
    /// multiple of `d_in`.
    pub fn build(&self, num_groups: usize, seed: u64) -> Result<SyntheticLayer> {
        let per_row = self.d_in / self.g.max(1);
        if self.g == 0
            || !self.d_in.is_multiple_of(self.g)
            || num_groups == 0
            || !num_groups.is_multiple_of(per_row)
        {
            return Err(Error::Dimension(format!(
                "{num_groups} groups of size {} do not tile rows of width {}",
                self.g, self.d_in
            )));
        }
        let weights_spec = WeightSpec {
            d_out: num_groups / per_row,
            d_in: self.d_in,
            g: self.g,
            base_std: self.base_std,
            outlier_fraction: self.outlier_fraction,
            outlier_scale: self.outlier_scale,
            seed,
        };
        let activation_spec = ActivationSpec {
            n_rows: self.calib_rows,
            d_in: self.d_in,
            profile: self.profile,
            shift_scale: self.shift_scale,
            seed,
        };
        let w = gen_weights(&weights_spec)?;
        let x = gen_activations(&activation_spec, false)?;
        let bank = build_hessian_bank(&x, self.g, self.damp_factor)?;
        let problem = LayerProblem::new(w, x, self.g)?;
        Ok(SyntheticLayer {
            problem,
            bank,
            weights_spec,
            activation_spec,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub layer: LayerDesign,
    /// Group counts N.
    pub group_counts: Vec<usize>,
    /// (K, M) pairs.
    pub shapes: Vec<(usize, usize)>,
    pub seeds: Vec<u64>,
    pub inits: Vec<InitKind>,
    pub beam_widths: Vec<usize>,
    pub beam: BeamConfig,
    pub kmeans: KMeansConfig,
    pub oaem: OaemConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layer: LayerDesign::default(),
            group_counts: vec![64, 4096],
            shapes: vec![(16, 2)],
            seeds: (0..20).collect(),
            inits: vec![InitKind::Greedy, InitKind::Oaem],
            beam_widths: vec![4],
            beam: BeamConfig {
                width: 4,
                ..BeamConfig::default()
            },
            kmeans: KMeansConfig::default(),
            oaem: OaemConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    pub init_kind: InitKind,
    pub beam_width: usize,
    /// Mean per-group `eᵀ H e` under the damped calibration Hessians.
    pub final_hessian_mse: f64,
    /// Mean squared weight error per entry.
    pub weight_mse: f64,
    pub epochs_run: usize,
}

pub const SWEEP_HEADER: &str =
    "rho,N,K,M,seed,init_kind,beam_width,final_hessian_mse,weight_mse,epochs_run";

/// Runs one synthetic layer through initialisation and the epoch loop.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    layer: &SyntheticLayer,
    kind: InitKind,
    k: usize,
    m: usize,
    beam: &BeamConfig,
    kmeans: &KMeansConfig,
    oaem: &OaemConfig,
    seed: u64,
) -> Result<(QuantizedArtifact, SweepRow)> {
    let settings = InitSettings {
        kind,
        num_codebooks: m,
        codebook_size: k,
        kmeans: *kmeans,
        oaem: *oaem,
    };
    let out = initialise_and_quantize(&layer.problem, &layer.bank, &settings, beam, seed)?;
    let row = score(layer, &out, k, m, seed, kind, beam.width)?;
    Ok((out.artifact, row))
}

/// Rows ordered by (N, shape, seed, init, beam width) as listed in the
/// config. One synthetic layer per (N, seed); the same initialisation is
/// reused across beam widths.
pub fn rho_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.seeds.is_empty() {
        return Err(Error::Domain("sweep needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for &n in &cfg.group_counts {
        for &(k, m) in &cfg.shapes {
            for &seed in &cfg.seeds {
                cells.push((n, k, m, seed));
            }
        }
    }
    let blocks: Vec<Result<Vec<SweepRow>>> = cells
        .par_iter()
        .map(|&(n, k, m, seed)| {
            let layer = cfg.layer.build(n, seed)?;
            let mut rows = Vec::new();
            for &kind in &cfg.inits {
                let settings = InitSettings {
                    kind,
                    num_codebooks: m,
                    codebook_size: k,
                    kmeans: cfg.kmeans,
                    oaem: cfg.oaem,
                };
                let init = initialise(&layer.problem, &layer.bank, &settings, seed)?;
                for &b in &cfg.beam_widths {
                    let beam = BeamConfig {
                        width: b,
                        ..cfg.beam
                    };
                    let out = quantize_layer(&layer.problem, init.clone(), &layer.bank, &beam)?;
                    rows.push(score(&layer, &out, k, m, seed, kind, b)?);
                }
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for block in blocks {
        rows.extend(block?);
    }
    Ok(rows)
}

fn score(
    layer: &SyntheticLayer,
    out: &QuantizeOutcome,
    k: usize,
    m: usize,
    seed: u64,
    kind: InitKind,
    b: usize,
) -> Result<SweepRow> {
    let layout = layer.problem.layout;
    let hmse = layer_metric_loss(
        &layer.problem.groups(),
        &out.artifact.codebooks,
        &out.artifact.codes,
        &layer.bank,
        &layout,
    );
    let w_hat = reconstruct_matrix(
        &out.artifact.codebooks,
        &out.artifact.codes,
        layout.d_out,
        layout.d_in,
    )?;
    let weight_mse = layer
        .problem
        .weights
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / (layout.d_out * layout.d_in) as f64;
    let n = layout.num_groups();
    Ok(SweepRow {
        rho: representational_ratio(n as u64, k as u64, m as u32)?,
        n,
        k,
        m,
        seed,
        init_kind: kind,
        beam_width: b,
        final_hessian_mse: hmse,
        weight_mse,
        epochs_run: out.epochs_run,
    })
}

/// Nine significant digits, exponent form.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else {
        format!("{x:.8e}")
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            fmt_float(r.rho),
            r.n,
            r.k,
            r.m,
            r.seed,
            r.init_kind,
            r.beam_width,
            fmt_float(r.final_hessian_mse),
            fmt_float(r.weight_mse),
            r.epochs_run
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub mse_cal: f64,
    pub mse_shift: f64,
    /// `mse_shift / mse_cal`; 1.0 when both are zero.
    pub degradation_ratio: f64,
}

pub fn domain_shift_eval(
    artifact: &QuantizedArtifact,
    w: &DenseMatrix,
    x_cal: &DenseMatrix,
    x_shift: &DenseMatrix,
) -> Result<ShiftReport> {
    if artifact.d_out != w.rows() || artifact.d_in != w.cols() {
        return Err(Error::Dimension(format!(
            "artifact is {}x{}, W is {}x{}",
            artifact.d_out,
            artifact.d_in,
            w.rows(),
            w.cols()
        )));
    }
    if x_cal.cols() != x_shift.cols() {
        return Err(Error::Dimension(format!(
            "calibration has {} columns, shifted batch has {}",
            x_cal.cols(),
            x_shift.cols()
        )));
    }
    let w_hat = reconstruct_matrix(
        &artifact.codebooks,
        &artifact.codes,
        artifact.d_out,
        artifact.d_in,
    )?;
    let w_hat = apply_row_scales(&w_hat, artifact.scales.as_deref())?;
    let mse_cal = layer_loss(x_cal, w, &w_hat)? / x_cal.rows() as f64;
    let mse_shift = layer_loss(x_shift, w, &w_hat)? / x_shift.rows() as f64;
    let degradation_ratio = if mse_cal == 0.0 && mse_shift == 0.0 {
        1.0
    } else {
        mse_shift / mse_cal
    };
    Ok(ShiftReport {
        mse_cal,
        mse_shift,
        degradation_ratio,
    })
}
