//! Output-aware EM refinement of a single codebook.
//!
//! Starting from k-means centroids, each round runs `S` Adam steps on the
//! Hessian-weighted reconstruction error with assignments frozen, then
//! reassigns every group to its nearest centroid under the Mahalanobis
//! distance of its own Hessian block.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::HessianBank;
use crate::initkm::{ClusterState, CodebookRefiner};
use crate::quantcore::{quad_form, GroupLayout, Groups};

/// Whether the cosine schedule restarts every round or spans all `R·S` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSpan {
    #[default]
    PerRound,
    AllRounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OaemConfig {
    pub rounds: usize,
    pub steps_per_round: usize,
    pub lr: f64,
    pub lr_floor_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: ScheduleSpan,
}

impl Default for OaemConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            steps_per_round: 100,
            lr: 1e-4,
            lr_floor_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: ScheduleSpan::PerRound,
        }
    }
}

impl OaemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.steps_per_round == 0 {
            return Err(Error::Domain(
                "OA-EM needs at least one round and one step".into(),
            ));
        }
        if !(self.lr_floor_fraction > 0.0 && self.lr_floor_fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "lr_floor_fraction = {} outside (0, 1]",
                self.lr_floor_fraction
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain(format!(
                "lr = {} must be non-negative",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// `floor + ½(η − floor)(1 + cos(π·s/(S−1)))` with `floor = fraction·η`;
/// a single-step schedule stays at `η`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, floor_fraction: f64) -> f64 {
    if total <= 1 {
        return lr;
    }
    let floor = floor_fraction * lr;
    let phase = std::f64::consts::PI * step as f64 / (total - 1) as f64;
    floor + 0.5 * (lr - floor) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, p: &AdamParams) {
        self.t += 1;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        for ((x, &gr), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = p.beta1 * *m + (1.0 - p.beta1) * gr;
            *v = p.beta2 * *v + (1.0 - p.beta2) * gr * gr;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + p.eps);
        }
    }
}

fn check_inputs(
    targets: &Groups,
    bank: &HessianBank,
    layout: &GroupLayout,
    centroids: &[f64],
) -> Result<()> {
    let g = targets.dim();
    if bank.group_size() != g {
        return Err(Error::Dimension(format!(
            "Hessian blocks are {0}x{0}, groups have {g} entries",
            bank.group_size()
        )));
    }
    bank.check_layout(layout)?;
    if targets.len() != layout.num_groups() {
        return Err(Error::Dimension(format!(
            "{} targets for a layout of {} groups",
            targets.len(),
            layout.num_groups()
        )));
    }
    if centroids.is_empty() || !centroids.len().is_multiple_of(g) {
        return Err(Error::Dimension("centroids do not form g-vectors".into()));
    }
    Ok(())
}

fn check_assign(assign: &[usize], n: usize, k: usize) -> Result<()> {
    if assign.len() != n {
        return Err(Error::Assignment(format!(
            "{} assignments for {n} groups",
            assign.len()
        )));
    }
    if let Some(i) = assign.iter().position(|&a| a >= k) {
        return Err(Error::Assignment(format!(
            "group {i} assigned to {} of {k} centroids",
            assign[i]
        )));
    }
    Ok(())
}

#[inline]
fn nearest_mahalanobis(t: &[f64], h: &[f64], centroids: &[f64], e: &mut [f64]) -> (usize, f64) {
    let g = t.len();
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(g).enumerate() {
        for ((ei, &ti), &ci) in e.iter_mut().zip(t).zip(c) {
            *ei = ti - ci;
        }
        let d = quad_form(e, h);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Mahalanobis nearest centroid for every group, ties to the lowest index.
pub fn e_step(
    targets: &Groups,
    bank: &HessianBank,
    layout: &GroupLayout,
    centroids: &[f64],
) -> Result<Vec<usize>> {
    check_inputs(targets, bank, layout, centroids)?;
    Ok(e_step_unchecked(targets, bank, layout, centroids))
}

fn e_step_unchecked(
    targets: &Groups,
    bank: &HessianBank,
    layout: &GroupLayout,
    centroids: &[f64],
) -> Vec<usize> {
    let g = targets.dim();
    (0..targets.len())
        .into_par_iter()
        .map_init(
            || vec![0.0; g],
            |e, i| nearest_mahalanobis(targets.get(i), bank.block_for(layout, i), centroids, e).0,
        )
        .collect()
}

/// `(1/N) Σ_i e_iᵀ H_i e_i` with `e_i = t_i − c_{b_i}`.
pub fn em_loss(
    targets: &Groups,
    bank: &HessianBank,
    layout: &GroupLayout,
    centroids: &[f64],
    assign: &[usize],
) -> Result<f64> {
    check_inputs(targets, bank, layout, centroids)?;
    check_assign(assign, targets.len(), centroids.len() / targets.dim())?;
    Ok(loss_and_gradient(targets, bank, layout, centroids, assign, false).0)
}

/// `∂L/∂c_k = −(2/N) Σ_{i: b_i = k} H_i (t_i − c_k)`; centroids without
/// groups get a zero gradient.
pub fn m_step_gradient(
    targets: &Groups,
    bank: &HessianBank,
    layout: &GroupLayout,
    centroids: &[f64],
    assign: &[usize],
) -> Result<Vec<f64>> {
    check_inputs(targets, bank, layout, centroids)?;
    check_assign(assign, targets.len(), centroids.len() / targets.dim())?;
    Ok(loss_and_gradient(targets, bank, layout, centroids, assign, true).1)
}

/// Loss and (optionally) gradient in one pass. Per-group terms are computed
/// in parallel and reduced in group order so the result does not depend on
/// the thread count.
fn loss_and_gradient(
    targets: &Groups,
    bank: &HessianBank,
    layout: &GroupLayout,
    centroids: &[f64],
    assign: &[usize],
    want_grad: bool,
) -> (f64, Vec<f64>) {
    let g = targets.dim();
    let n = targets.len();
    if n == 0 {
        return (0.0, vec![0.0; centroids.len()]);
    }
    // per group: [loss, H e (g values)]
    let stride = g + 1;
    let mut terms = vec![0.0; n * stride];
    terms.par_chunks_mut(stride).enumerate().for_each_init(
        || vec![0.0; g],
        |e, (i, out)| {
            let t = targets.get(i);
            let c = &centroids[assign[i] * g..(assign[i] + 1) * g];
            let h = bank.block_for(layout, i);
            for ((ei, &ti), &ci) in e.iter_mut().zip(t).zip(c) {
                *ei = ti - ci;
            }
            let mut loss = 0.0;
            for a in 0..g {
                let he: f64 = h[a * g..(a + 1) * g]
                    .iter()
                    .zip(e.iter())
                    .map(|(&x, &y)| x * y)
                    .sum();
                out[1 + a] = he;
                loss += e[a] * he;
            }
            out[0] = loss;
        },
    );
    let mut loss = 0.0;
    let mut grad = vec![0.0; centroids.len()];
    let scale = -2.0 / n as f64;
    for (i, term) in terms.chunks_exact(stride).enumerate() {
        loss += term[0];
        if want_grad {
            let k = assign[i];
            for (gr, &he) in grad[k * g..(k + 1) * g].iter_mut().zip(&term[1..]) {
                *gr += scale * he;
            }
        }
    }
    (loss / n as f64, grad)
}

/// Result of [`oaem_refine`].
#[derive(Debug, Clone, PartialEq)]
pub struct OaemOutcome {
    pub state: ClusterState,
    pub initial_loss: f64,
    /// `em_loss` after each round's E-step.
    pub round_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn oaem_refine(
    targets: &Groups,
    bank: &HessianBank,
    layout: &GroupLayout,
    state: ClusterState,
    cfg: &OaemConfig,
) -> Result<OaemOutcome> {
    cfg.validate()?;
    check_inputs(targets, bank, layout, &state.centroids)?;
    let k = state.num_centroids();
    check_assign(&state.assign, targets.len(), k)?;
    let n = targets.len();
    let adam = cfg.adam();
    let mut centroids = state.centroids;
    let mut assign = state.assign;
    let initial_loss = loss_and_gradient(targets, bank, layout, &centroids, &assign, false).0;
    let mut round_losses = Vec::with_capacity(cfg.rounds);
    let mut loss = initial_loss;
    let total_steps = cfg.rounds * cfg.steps_per_round;

    for round in 0..cfg.rounds {
        let mut opt = AdamState::new(centroids.len());
        for step in 0..cfg.steps_per_round {
            let (l, grad) = loss_and_gradient(targets, bank, layout, &centroids, &assign, true);
            if !l.is_finite() {
                return Err(Error::Divergence {
                    stage: "OA-EM M-step",
                    position: format!("round {round}, step {step}"),
                    loss: l,
                });
            }
            let lr = match cfg.schedule {
                ScheduleSpan::PerRound => {
                    cosine_lr(step, cfg.steps_per_round, cfg.lr, cfg.lr_floor_fraction)
                }
                ScheduleSpan::AllRounds => cosine_lr(
                    round * cfg.steps_per_round + step,
                    total_steps,
                    cfg.lr,
                    cfg.lr_floor_fraction,
                ),
            };
            opt.step(&mut centroids, &grad, lr, &adam);
        }
        assign = e_step_unchecked(targets, bank, layout, &centroids);
        loss = loss_and_gradient(targets, bank, layout, &centroids, &assign, false).0;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "OA-EM E-step",
                position: format!("round {round}"),
                loss,
            });
        }
        round_losses.push(loss);
    }

    let mut warnings = Vec::new();
    if loss > initial_loss {
        let msg = format!("OA-EM ended above its starting loss ({loss:.6e} > {initial_loss:.6e})");
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(OaemOutcome {
        state: ClusterState {
            centroids,
            assign,
            inertia: loss * n as f64,
            g: targets.dim(),
        },
        initial_loss,
        round_losses,
        warnings,
    })
}

/// Plugs OA-EM into [`residual_init`](crate::initkm::residual_init).
#[derive(Debug, Clone)]
pub struct OaemRefiner<'a> {
    pub bank: &'a HessianBank,
    pub layout: GroupLayout,
    pub cfg: OaemConfig,
}

impl CodebookRefiner for OaemRefiner<'_> {
    fn refine(&self, _stage: usize, targets: &Groups, state: ClusterState) -> Result<ClusterState> {
        oaem_refine(targets, self.bank, &self.layout, state, &self.cfg).map(|o| o.state)
    }
}
