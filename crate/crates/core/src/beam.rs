//! Code assignment (greedy, beam, exhaustive) and the per-layer epoch loop.
//!
//! Every cost is the metric `rᵀ H r` of the residual `r = t − Σ c_{m,b_m}`,
//! where the codewords are subtracted one codebook at a time in f64. All
//! three search routines share that arithmetic, so equal codes always get
//! bit-identical costs.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::HessianBank;
use crate::oaem::{AdamParams, AdamState};
use crate::quantcore::{quad_form, CodeMatrix, CodebookSet, GroupLayout, Groups, LayerProblem};
use crate::tensor_io::QuantizedArtifact;

pub const DEFAULT_EXHAUSTIVE_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Hessian,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_epochs: usize,
    pub early_stop_rel: f64,
    pub metric: Metric,
    /// Adam steps on the codebooks per epoch; 0 freezes the codebooks.
    pub update_steps: usize,
    pub update_lr: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 8,
            max_epochs: 100,
            early_stop_rel: 0.01,
            metric: Metric::Hessian,
            update_steps: 25,
            update_lr: 1e-4,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Domain("beam width must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Domain("need at least one epoch".into()));
        }
        if !(self.early_stop_rel > 0.0 && self.early_stop_rel < 1.0) {
            return Err(Error::Domain(format!(
                "early_stop_rel = {} outside (0, 1)",
                self.early_stop_rel
            )));
        }
        if !(self.update_lr >= 0.0 && self.update_lr.is_finite()) {
            return Err(Error::Domain(format!(
                "update_lr = {} must be non-negative",
                self.update_lr
            )));
        }
        Ok(())
    }
}

fn check_target(target: &[f64], cb: &CodebookSet, h: &[f64]) {
    let g = cb.group_size();
    assert_eq!(target.len(), g, "target length must equal the group size");
    assert_eq!(h.len(), g * g, "metric must be g×g");
}

#[inline]
fn subtract(r: &[f64], c: &[f32], out: &mut [f64]) {
    for ((o, &a), &b) in out.iter_mut().zip(r).zip(c) {
        *o = a - b as f64;
    }
}

/// Cost of a complete code under `h`.
pub fn code_cost(target: &[f64], cb: &CodebookSet, h: &[f64], code: &[u16]) -> f64 {
    let mut r = vec![0.0; target.len()];
    cb.residual_into(target, code, &mut r);
    quad_form(&r, h)
}

/// Picks the best entry of each codebook in turn, never revisiting.
pub fn greedy_assign(target: &[f64], cb: &CodebookSet, h: &[f64]) -> Vec<u16> {
    check_target(target, cb, h);
    let g = cb.group_size();
    let mut residual = target.to_vec();
    let mut tmp = vec![0.0; g];
    let mut code = Vec::with_capacity(cb.num_codebooks());
    for m in 0..cb.num_codebooks() {
        let mut best = (0usize, f64::INFINITY);
        for k in 0..cb.codebook_size() {
            subtract(&residual, cb.codeword(m, k), &mut tmp);
            let cost = quad_form(&tmp, h);
            if cost < best.1 {
                best = (k, cost);
            }
        }
        subtract(&residual, cb.codeword(m, best.0), &mut tmp);
        std::mem::swap(&mut residual, &mut tmp);
        code.push(best.0 as u16);
    }
    code
}

struct Partial {
    code: Vec<u16>,
    residual: Vec<f64>,
    cost: f64,
}

/// Beam search of width `b`; returns the best code and its cost.
///
/// Each stage expands every kept candidate with all K entries of the next
/// codebook and keeps the `b` cheapest by (cost, code). With `b = 1` this is
/// [`greedy_assign`]; with `b ≥ K^{M−1}` it is exhaustive.
pub fn beam_assign(target: &[f64], cb: &CodebookSet, h: &[f64], b: usize) -> (Vec<u16>, f64) {
    check_target(target, cb, h);
    assert!(b >= 1, "beam width must be at least 1");
    let g = cb.group_size();
    let k = cb.codebook_size();
    let mut beam = vec![Partial {
        code: Vec::new(),
        residual: target.to_vec(),
        cost: quad_form(target, h),
    }];
    let mut tmp = vec![0.0; g];
    let mut children: Vec<(f64, usize, u16)> = Vec::with_capacity(b * k);
    for m in 0..cb.num_codebooks() {
        children.clear();
        for (p, parent) in beam.iter().enumerate() {
            for entry in 0..k {
                subtract(&parent.residual, cb.codeword(m, entry), &mut tmp);
                children.push((quad_form(&tmp, h), p, entry as u16));
            }
        }
        let order = |x: &(f64, usize, u16), y: &(f64, usize, u16)| -> Ordering {
            x.0.total_cmp(&y.0)
                .then_with(|| beam[x.1].code.cmp(&beam[y.1].code))
                .then(x.2.cmp(&y.2))
        };
        let keep = b.min(children.len());
        if keep < children.len() {
            children.select_nth_unstable_by(keep - 1, order);
            children.truncate(keep);
        }
        children.sort_by(order);
        beam = children
            .iter()
            .map(|&(cost, p, entry)| {
                let parent = &beam[p];
                let mut residual = vec![0.0; g];
                subtract(
                    &parent.residual,
                    cb.codeword(m, entry as usize),
                    &mut residual,
                );
                let mut code = parent.code.clone();
                code.push(entry);
                Partial {
                    code,
                    residual,
                    cost,
                }
            })
            .collect();
    }
    let best = beam.swap_remove(0);
    (best.code, best.cost)
}

/// Beam search where `prev` always competes in the final ranking, so the
/// returned cost never exceeds the cost of `prev`.
pub fn beam_assign_seeded(
    target: &[f64],
    cb: &CodebookSet,
    h: &[f64],
    b: usize,
    prev: &[u16],
) -> (Vec<u16>, f64) {
    let (code, cost) = beam_assign(target, cb, h, b);
    let prev_cost = code_cost(target, cb, h, prev);
    match prev_cost.total_cmp(&cost).then_with(|| prev.cmp(&code)) {
        Ordering::Less => (prev.to_vec(), prev_cost),
        _ => (code, cost),
    }
}

/// Global minimum over all K^M codes, ties to the lexicographically
/// smallest code.
pub fn exhaustive_assign(
    target: &[f64],
    cb: &CodebookSet,
    h: &[f64],
    cap: u64,
) -> Result<(Vec<u16>, f64)> {
    check_target(target, cb, h);
    let (m, k, g) = (cb.num_codebooks(), cb.codebook_size(), cb.group_size());
    let combos = (k as f64).powi(m as i32);
    if combos > cap as f64 {
        return Err(Error::OracleTooLarge { combos, cap });
    }
    // residuals[s] holds the residual after the first s codebooks
    let mut residuals = vec![0.0; (m + 1) * g];
    residuals[..g].copy_from_slice(target);
    let mut code = vec![0u16; m];
    let mut best: Option<(Vec<u16>, f64)> = None;
    let mut level = 0;
    loop {
        let (head, tail) = residuals.split_at_mut((level + 1) * g);
        subtract(
            &head[level * g..],
            cb.codeword(level, code[level] as usize),
            &mut tail[..g],
        );
        if level + 1 < m {
            level += 1;
            code[level] = 0;
            continue;
        }
        let cost = quad_form(&residuals[m * g..], h);
        if best.as_ref().is_none_or(|(_, c)| cost < *c) {
            best = Some((code.clone(), cost));
        }
        // advance the odometer
        loop {
            code[level] += 1;
            if (code[level] as usize) < k {
                break;
            }
            if level == 0 {
                return Ok(best.expect("at least one code enumerated"));
            }
            level -= 1;
        }
    }
}

fn metric_bank(bank: &HessianBank, metric: Metric) -> HessianBank {
    match metric {
        Metric::Hessian => bank.clone(),
        Metric::Euclidean => HessianBank::identity(bank.num_blocks(), bank.group_size()),
    }
}

/// Mean per-group metric loss `(1/N) Σ r_iᵀ H_i r_i`.
pub fn layer_metric_loss(
    groups: &Groups,
    cb: &CodebookSet,
    codes: &CodeMatrix,
    bank: &HessianBank,
    layout: &GroupLayout,
) -> f64 {
    let g = groups.dim();
    let per: Vec<f64> = (0..groups.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; g],
            |r, i| {
                cb.residual_into(groups.get(i), codes.code(i), r);
                quad_form(r, bank.block_for(layout, i))
            },
        )
        .collect();
    if per.is_empty() {
        0.0
    } else {
        per.iter().sum::<f64>() / per.len() as f64
    }
}

/// Loss and gradient w.r.t. every codebook entry with codes fixed.
fn joint_loss_and_gradient(
    groups: &Groups,
    params: &[f64],
    cb_shape: (usize, usize, usize),
    codes: &CodeMatrix,
    bank: &HessianBank,
    layout: &GroupLayout,
) -> (f64, Vec<f64>) {
    let (m, k, g) = cb_shape;
    let n = groups.len();
    let stride = g + 1;
    let mut terms = vec![0.0; n * stride];
    terms.par_chunks_mut(stride).enumerate().for_each_init(
        || vec![0.0; g],
        |r, (i, out)| {
            r.copy_from_slice(groups.get(i));
            for (s, &b) in codes.code(i).iter().enumerate() {
                let off = (s * k + b as usize) * g;
                for (ri, &c) in r.iter_mut().zip(&params[off..off + g]) {
                    *ri -= c;
                }
            }
            let h = bank.block_for(layout, i);
            let mut loss = 0.0;
            for a in 0..g {
                let hr: f64 = h[a * g..(a + 1) * g]
                    .iter()
                    .zip(r.iter())
                    .map(|(x, y)| x * y)
                    .sum();
                out[1 + a] = hr;
                loss += r[a] * hr;
            }
            out[0] = loss;
        },
    );
    let mut loss = 0.0;
    let mut grad = vec![0.0; m * k * g];
    let scale = -2.0 / n.max(1) as f64;
    for (i, term) in terms.chunks_exact(stride).enumerate() {
        loss += term[0];
        for (s, &b) in codes.code(i).iter().enumerate() {
            let off = (s * k + b as usize) * g;
            for (gr, &hr) in grad[off..off + g].iter_mut().zip(&term[1..]) {
                *gr += scale * hr;
            }
        }
    }
    (loss / n.max(1) as f64, grad)
}

/// Adam steps on all codebooks jointly; the update is kept only if the loss
/// of the stored (f32) codebooks does not go up.
#[allow(clippy::too_many_arguments)]
pub(crate) fn update_codebooks(
    groups: &Groups,
    cb: &CodebookSet,
    codes: &CodeMatrix,
    bank: &HessianBank,
    layout: &GroupLayout,
    steps: usize,
    lr: f64,
    current_loss: f64,
) -> (CodebookSet, f64) {
    if steps == 0 || lr == 0.0 {
        return (cb.clone(), current_loss);
    }
    let shape = (cb.num_codebooks(), cb.codebook_size(), cb.group_size());
    let mut params: Vec<f64> = cb.entries().iter().map(|&v| v as f64).collect();
    let mut opt = AdamState::new(params.len());
    let adam = AdamParams::default();
    for _ in 0..steps {
        let (_, grad) = joint_loss_and_gradient(groups, &params, shape, codes, bank, layout);
        opt.step(&mut params, &grad, lr, &adam);
    }
    if params
        .iter()
        .any(|v| !v.is_finite() || v.abs() > f32::MAX as f64)
    {
        return (cb.clone(), current_loss);
    }
    let mut candidate = cb.clone();
    for (dst, &v) in candidate.entries_mut().iter_mut().zip(&params) {
        *dst = v as f32;
    }
    let loss = layer_metric_loss(groups, &candidate, codes, bank, layout);
    if loss <= current_loss {
        (candidate, loss)
    } else {
        (cb.clone(), current_loss)
    }
}

/// Re-runs seeded beam search on every group.
pub(crate) fn reassign_all(
    groups: &Groups,
    cb: &CodebookSet,
    codes: &CodeMatrix,
    bank: &HessianBank,
    layout: &GroupLayout,
    width: usize,
) -> CodeMatrix {
    let m = cb.num_codebooks();
    let flat: Vec<u16> = (0..groups.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            beam_assign_seeded(
                groups.get(i),
                cb,
                bank.block_for(layout, i),
                width,
                codes.code(i),
            )
            .0
        })
        .collect();
    CodeMatrix::new(m, flat).expect("beam codes have width M")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub artifact: QuantizedArtifact,
    /// Epoch 0 is the initial loss, then one record per epoch run.
    pub trace: Vec<EpochRecord>,
    pub epochs_run: usize,
}

impl QuantizeOutcome {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|r| r.loss).unwrap_or(0.0)
    }
}

/// Alternates seeded beam reassignment and guarded codebook updates until
/// the relative improvement falls below `early_stop_rel` or the epoch
/// budget runs out. The loss trace never increases.
pub fn quantize_layer(
    problem: &LayerProblem,
    init: (CodebookSet, CodeMatrix),
    bank: &HessianBank,
    cfg: &BeamConfig,
) -> Result<QuantizeOutcome> {
    cfg.validate()?;
    let layout = problem.layout;
    bank.check_layout(&layout)?;
    let (mut cb, mut codes) = init;
    if cb.group_size() != layout.g {
        return Err(Error::Dimension(format!(
            "codebooks have g = {}, layer uses g = {}",
            cb.group_size(),
            layout.g
        )));
    }
    if codes.num_groups() != layout.num_groups() {
        return Err(Error::Dimension(format!(
            "{} codes for {} groups",
            codes.num_groups(),
            layout.num_groups()
        )));
    }
    codes.check_against(&cb)?;
    let groups = problem.groups();
    let metric = metric_bank(bank, cfg.metric);

    let mut prev = layer_metric_loss(&groups, &cb, &codes, &metric, &layout);
    if !prev.is_finite() {
        return Err(Error::Divergence {
            stage: "quantize",
            position: "epoch 0".into(),
            loss: prev,
        });
    }
    let mut trace = vec![EpochRecord {
        epoch: 0,
        loss: prev,
    }];
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        codes = reassign_all(&groups, &cb, &codes, &metric, &layout, cfg.width);
        let after_assign = layer_metric_loss(&groups, &cb, &codes, &metric, &layout);
        let (next_cb, loss) = update_codebooks(
            &groups,
            &cb,
            &codes,
            &metric,
            &layout,
            cfg.update_steps,
            cfg.update_lr,
            after_assign,
        );
        cb = next_cb;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "quantize",
                position: format!("epoch {epoch}"),
                loss,
            });
        }
        trace.push(EpochRecord { epoch, loss });
        epochs_run = epoch;
        let rel = if prev > 0.0 {
            (prev - loss) / prev
        } else {
            0.0
        };
        prev = loss;
        if rel < cfg.early_stop_rel {
            break;
        }
    }
    let artifact = QuantizedArtifact::new(layout.d_out, layout.d_in, cb, codes, None)?;
    Ok(QuantizeOutcome {
        artifact,
        trace,
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::DenseMatrix;

    const ONE: [f64; 1] = [1.0];

    fn trap() -> CodebookSet {
        CodebookSet::new(2, 2, 1, vec![0.9, 0.4, 0.0, 0.6]).unwrap()
    }

    #[test]
    fn greedy_falls_into_trap() {
        let code = greedy_assign(&[1.0], &trap(), &ONE);
        assert_eq!(code, vec![0, 0]);
        assert!((code_cost(&[1.0], &trap(), &ONE, &code) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn beam_two_escapes_trap() {
        let (code, cost) = beam_assign(&[1.0], &trap(), &ONE, 2);
        assert_eq!(code, vec![1, 1]);
        assert!(cost < 1e-12);
        let (ex, ex_cost) =
            exhaustive_assign(&[1.0], &trap(), &ONE, DEFAULT_EXHAUSTIVE_CAP).unwrap();
        assert_eq!(ex, vec![1, 1]);
        assert_eq!(ex_cost, cost);
    }

    #[test]
    fn reachable_target_costs_zero() {
        let cb = CodebookSet::new(
            2,
            3,
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 2.0, 2.0, 0.0, 0.0],
        )
        .unwrap();
        let eye = [1.0, 0.0, 0.0, 1.0];
        let t = [1.5, 0.5];
        let code = greedy_assign(&t, &cb, &eye);
        assert_eq!(code_cost(&t, &cb, &eye, &code), 0.0);
        let (_, c) = exhaustive_assign(&t, &cb, &eye, 100).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn single_codebook_greedy_is_exhaustive() {
        let cb = CodebookSet::new(1, 4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        for t in [-1.0, 0.4, 1.6, 2.5, 7.0] {
            let (ex, _) = exhaustive_assign(&[t], &cb, &ONE, 100).unwrap();
            assert_eq!(greedy_assign(&[t], &cb, &ONE), ex);
        }
    }

    #[test]
    fn oracle_cap_enforced() {
        let cb = CodebookSet::zeros(3, 256, 1).unwrap();
        match exhaustive_assign(&[0.0], &cb, &ONE, DEFAULT_EXHAUSTIVE_CAP) {
            Err(Error::OracleTooLarge { cap, .. }) => assert_eq!(cap, 1 << 20),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seeded_beam_keeps_better_previous_code() {
        let (code, cost) = beam_assign_seeded(&[1.0], &trap(), &ONE, 1, &[1, 1]);
        assert_eq!(code, vec![1, 1]);
        assert!(cost < 1e-12);
    }

    fn trap_layer(copies: usize) -> (LayerProblem, HessianBank) {
        let w = DenseMatrix::new(copies, 1, vec![1.0; copies]).unwrap();
        let x = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        let problem = LayerProblem::new(w, x, 1).unwrap();
        let bank = HessianBank::identity(1, 1);
        (problem, bank)
    }

    #[test]
    fn trap_layer_width_one_stuck_width_two_escapes() {
        let n = 16;
        let (problem, bank) = trap_layer(n);
        let init = (trap(), CodeMatrix::zeros(n, 2));
        let cfg = BeamConfig {
            width: 1,
            update_steps: 0,
            ..BeamConfig::default()
        };
        let stuck = quantize_layer(&problem, init.clone(), &bank, &cfg).unwrap();
        assert!((stuck.final_loss() - 0.01).abs() < 1e-6);
        assert_eq!(stuck.epochs_run, 1);
        let free = quantize_layer(&problem, init, &bank, &BeamConfig { width: 2, ..cfg }).unwrap();
        assert!(free.final_loss() < 1e-12);
    }

    #[test]
    fn optimal_init_stops_after_one_epoch() {
        let (problem, bank) = trap_layer(4);
        let codes = CodeMatrix::new(2, [1, 1].repeat(4)).unwrap();
        let out = quantize_layer(
            &problem,
            (trap(), codes.clone()),
            &bank,
            &BeamConfig::default(),
        )
        .unwrap();
        assert_eq!(out.epochs_run, 1);
        assert_eq!(out.trace[0].loss, out.trace[1].loss);
        assert_eq!(out.artifact.codes, codes);
    }
}
