//! Single-layer straight-through fine-tuning probe.
//!
//! Codebook entries get Adam steps on the held-out output error
//! `‖X_h Wᵀ − X_h Ŵᵀ‖² / rows` with codes fixed; the gradient of each
//! reconstructed group flows back to the codewords it selects. Every
//! `reassign_every` steps the codes are re-searched with a seeded beam under
//! the held-out block Hessians, and the new codes are kept only if the loss
//! does not rise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beam::reassign_all;
use crate::error::{Error, Result};
use crate::hessian::build_hessian_bank;
use crate::oaem::{AdamParams, AdamState};
use crate::quantcore::{CodeMatrix, CodebookSet, GroupLayout, LayerProblem};
use crate::tensor_io::{DenseMatrix, QuantizedArtifact};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvConfig {
    pub outer_steps: usize,
    /// `None` never reassigns codes.
    pub reassign_every: Option<usize>,
    pub lr: f64,
    pub beam_width: usize,
    pub damp_factor: f64,
}

impl Default for PvConfig {
    fn default() -> Self {
        Self {
            outer_steps: 200,
            reassign_every: Some(25),
            lr: 3e-4,
            beam_width: 8,
            damp_factor: 0.01,
        }
    }
}

impl PvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps == 0 {
            return Err(Error::Domain("outer_steps must be at least 1".into()));
        }
        if self.reassign_every == Some(0) {
            return Err(Error::Domain("reassign_every must be at least 1".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Domain("beam width must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain(format!(
                "lr = {} must be non-negative",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PvRecord {
    pub step: usize,
    pub loss: f64,
    pub reassigned: bool,
}

#[derive(Debug, Clone)]
pub struct PvOutcome {
    pub artifact: QuantizedArtifact,
    /// Step 0 is the starting loss; afterwards one record per outer step.
    pub trace: Vec<PvRecord>,
    /// Loss just before and just after each reassignment pass.
    pub reassign_checks: Vec<(f64, f64)>,
}

impl PvOutcome {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|r| r.loss).unwrap_or(0.0)
    }
}

/// Output error with the full (non block-diagonal) held-out Gram matrix.
struct OutputObjective<'a> {
    weights: &'a DenseMatrix,
    layout: GroupLayout,
    /// `XᵀX / rows`, `d_in × d_in`.
    gram: Vec<f64>,
}

impl<'a> OutputObjective<'a> {
    fn new(problem: &'a LayerProblem, holdout: &DenseMatrix) -> Self {
        let d = holdout.cols();
        let rows = holdout.rows() as f64;
        let gram: Vec<f64> = (0..d)
            .into_par_iter()
            .flat_map_iter(|a| {
                (0..d).map(move |b| {
                    (0..holdout.rows())
                        .map(|s| holdout.get(s, a) as f64 * holdout.get(s, b) as f64)
                        .sum::<f64>()
                        / rows
                })
            })
            .collect();
        Self {
            weights: &problem.weights,
            layout: problem.layout,
            gram,
        }
    }

    fn row_diff(&self, cb: &CodebookSet, codes: &CodeMatrix, r: usize) -> Vec<f64> {
        let g = self.layout.g;
        let mut diff: Vec<f64> = self.weights.row(r).iter().map(|&v| v as f64).collect();
        for j in 0..self.layout.blocks_per_row() {
            let code = codes.code(self.layout.group_index(r, j));
            for (m, &b) in code.iter().enumerate() {
                for (d, &c) in diff[j * g..(j + 1) * g]
                    .iter_mut()
                    .zip(cb.codeword(m, b as usize))
                {
                    *d -= c as f64;
                }
            }
        }
        diff
    }

    /// Loss and, when asked, the gradient w.r.t. every codebook entry.
    fn evaluate(&self, cb: &CodebookSet, codes: &CodeMatrix, want_grad: bool) -> (f64, Vec<f64>) {
        let d = self.layout.d_in;
        let per_row: Vec<(f64, Vec<f64>)> = (0..self.layout.d_out)
            .into_par_iter()
            .map(|r| {
                let diff = self.row_diff(cb, codes, r);
                let gd: Vec<f64> = (0..d)
                    .map(|a| {
                        self.gram[a * d..(a + 1) * d]
                            .iter()
                            .zip(&diff)
                            .map(|(x, y)| x * y)
                            .sum()
                    })
                    .collect();
                let loss = diff.iter().zip(&gd).map(|(x, y)| x * y).sum();
                (loss, if want_grad { gd } else { Vec::new() })
            })
            .collect();
        let (k, g) = (cb.codebook_size(), cb.group_size());
        let mut loss = 0.0;
        let mut grad = vec![0.0; cb.entries().len()];
        for (r, (l, gd)) in per_row.iter().enumerate() {
            loss += l;
            if !want_grad {
                continue;
            }
            for j in 0..self.layout.blocks_per_row() {
                let code = codes.code(self.layout.group_index(r, j));
                for (m, &b) in code.iter().enumerate() {
                    let off = (m * k + b as usize) * g;
                    for (gr, &v) in grad[off..off + g].iter_mut().zip(&gd[j * g..(j + 1) * g]) {
                        *gr -= 2.0 * v;
                    }
                }
            }
        }
        (loss, grad)
    }
}

pub fn pv_finetune(
    artifact: &QuantizedArtifact,
    problem: &LayerProblem,
    holdout: &DenseMatrix,
    cfg: &PvConfig,
) -> Result<PvOutcome> {
    cfg.validate()?;
    let layout = problem.layout;
    if artifact.d_out != layout.d_out
        || artifact.d_in != layout.d_in
        || artifact.group_size() != layout.g
    {
        return Err(Error::Dimension(format!(
            "artifact is {}x{} with g = {}, layer is {}x{} with g = {}",
            artifact.d_out,
            artifact.d_in,
            artifact.group_size(),
            layout.d_out,
            layout.d_in,
            layout.g
        )));
    }
    if holdout.cols() != layout.d_in {
        return Err(Error::Dimension(format!(
            "held-out activations have {} columns, layer has {}",
            holdout.cols(),
            layout.d_in
        )));
    }
    let objective = OutputObjective::new(problem, holdout);
    let groups = problem.groups();
    let metric = build_hessian_bank(holdout, layout.g, cfg.damp_factor)?;

    let mut cb = artifact.codebooks.clone();
    let mut codes = artifact.codes.clone();
    let mut params: Vec<f64> = cb.entries().iter().map(|&v| v as f64).collect();
    let mut opt = AdamState::new(params.len());
    let adam = AdamParams::default();

    let (mut loss, _) = objective.evaluate(&cb, &codes, false);
    let mut trace = vec![PvRecord {
        step: 0,
        loss,
        reassigned: false,
    }];
    let mut reassign_checks = Vec::new();
    for step in 1..=cfg.outer_steps {
        let (_, grad) = objective.evaluate(&cb, &codes, true);
        opt.step(&mut params, &grad, cfg.lr, &adam);
        if params
            .iter()
            .any(|v| !v.is_finite() || v.abs() > f32::MAX as f64)
        {
            return Err(Error::Divergence {
                stage: "fine-tuning",
                position: format!("step {step}"),
                loss: f64::NAN,
            });
        }
        for (dst, &v) in cb.entries_mut().iter_mut().zip(&params) {
            *dst = v as f32;
        }
        loss = objective.evaluate(&cb, &codes, false).0;

        let mut reassigned = false;
        if cfg.reassign_every.is_some_and(|every| step % every == 0) {
            let candidate = reassign_all(&groups, &cb, &codes, &metric, &layout, cfg.beam_width);
            let (new_loss, _) = objective.evaluate(&cb, &candidate, false);
            let before = loss;
            if new_loss <= loss {
                reassigned = candidate != codes;
                codes = candidate;
                loss = new_loss;
            }
            reassign_checks.push((before, loss));
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "fine-tuning",
                position: format!("step {step}"),
                loss,
            });
        }
        trace.push(PvRecord {
            step,
            loss,
            reassigned,
        });
    }
    let artifact = QuantizedArtifact::new(
        artifact.d_out,
        artifact.d_in,
        cb,
        codes,
        artifact.scales.clone(),
    )?;
    Ok(PvOutcome {
        artifact,
        trace,
        reassign_checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trap_setup(copies: usize) -> (QuantizedArtifact, LayerProblem, DenseMatrix) {
        let w = DenseMatrix::new(copies, 1, vec![1.0; copies]).unwrap();
        let x = DenseMatrix::new(4, 1, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let problem = LayerProblem::new(w, x.clone(), 1).unwrap();
        let cb = CodebookSet::new(2, 2, 1, vec![0.9, 0.4, 0.0, 0.6]).unwrap();
        let art =
            QuantizedArtifact::new(copies, 1, cb, CodeMatrix::zeros(copies, 2), None).unwrap();
        (art, problem, x)
    }

    #[test]
    fn zero_loss_stays_zero() {
        let w = DenseMatrix::new(2, 2, vec![0.5, 0.25, -1.0, 2.0]).unwrap();
        let x = DenseMatrix::identity(2);
        let problem = LayerProblem::new(w.clone(), x.clone(), 2).unwrap();
        let mut entries = w.data().to_vec();
        entries.extend([0.0; 4]);
        let cb = CodebookSet::new(2, 2, 2, entries).unwrap();
        let codes = CodeMatrix::new(2, vec![0, 0, 1, 0]).unwrap();
        let art = QuantizedArtifact::new(2, 2, cb, codes, None).unwrap();
        let out = pv_finetune(&art, &problem, &x, &PvConfig::default()).unwrap();
        assert!(out.trace.iter().all(|r| r.loss == 0.0));
        assert_eq!(out.artifact, art);
    }

    #[test]
    fn zero_lr_without_reassignment_is_identity() {
        let (art, problem, x) = trap_setup(3);
        let cfg = PvConfig {
            lr: 0.0,
            reassign_every: None,
            ..PvConfig::default()
        };
        let out = pv_finetune(&art, &problem, &x, &cfg).unwrap();
        assert_eq!(out.artifact, art);
    }

    #[test]
    fn reassignment_escapes_trap() {
        let (art, problem, x) = trap_setup(8);
        let base = PvConfig {
            lr: 1e-5,
            beam_width: 2,
            ..PvConfig::default()
        };
        let with = pv_finetune(&art, &problem, &x, &base).unwrap();
        let without = pv_finetune(
            &art,
            &problem,
            &x,
            &PvConfig {
                reassign_every: None,
                ..base
            },
        )
        .unwrap();
        assert!(with.final_loss() < without.final_loss());
        assert!(with
            .reassign_checks
            .iter()
            .all(|(before, after)| after <= before));
        assert_eq!(with.artifact.codes.code(0), &[1, 1]);
    }

    #[test]
    fn deterministic() {
        let (art, problem, x) = trap_setup(5);
        let a = pv_finetune(&art, &problem, &x, &PvConfig::default()).unwrap();
        let b = pv_finetune(&art, &problem, &x, &PvConfig::default()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.artifact, b.artifact);
    }
}
