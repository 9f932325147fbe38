use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use addq_core::analysis::{
    decompose_gap, decompose_gap_weighted, domain_shift_eval, fmt_float, rho_sweep,
    write_sweep_csv, GapDecomposition, LayerDesign, SweepConfig,
};
use addq_core::beam::{
    beam_assign, code_cost, exhaustive_assign, BeamConfig, Metric, DEFAULT_EXHAUSTIVE_CAP,
};
use addq_core::initkm::KMeansConfig;
use addq_core::oaem::{OaemConfig, ScheduleSpan};
use addq_core::pvtoy::{pv_finetune, PvConfig};
use addq_core::quantcore::{apply_row_scales, layer_loss, reconstruct_matrix};
use addq_core::synth::{
    derive_seed, gen_activations, gen_holdout_activations, gen_weights, ActivationSpec, StdProfile,
    StreamTag, WeightSpec,
};
use addq_core::tensor_io::{load_matrix, read_artifact, save_matrix, write_artifact};
use addq_core::{
    build_hessian_bank, initialise_and_quantize, InitKind, InitSettings, LayerProblem,
};

use crate::config::{usage, FileConfig};
use crate::manifest::RunManifest;
use crate::{Common, TrainArgs};

fn setup(common: &Common) -> anyhow::Result<FileConfig> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    FileConfig::load(common.config.as_deref())
}

fn required<T>(v: Option<T>, name: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| usage(format!("missing required value `{name}`")))
}

fn parse_init(s: &str) -> anyhow::Result<InitKind> {
    s.parse()
        .map_err(|e: addq_core::Error| usage(e.to_string()))
}

fn parse_metric(s: &str) -> anyhow::Result<Metric> {
    match s {
        "hessian" => Ok(Metric::Hessian),
        "euclidean" => Ok(Metric::Euclidean),
        other => Err(usage(format!("unknown metric `{other}`"))),
    }
}

fn parse_schedule(s: &str) -> anyhow::Result<ScheduleSpan> {
    match s.replace('-', "_").as_str() {
        "per_round" => Ok(ScheduleSpan::PerRound),
        "all_rounds" => Ok(ScheduleSpan::AllRounds),
        other => Err(usage(format!("unknown schedule `{other}`"))),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

#[derive(Debug, Clone, Serialize)]
struct Training {
    beam: BeamConfig,
    kmeans: KMeansConfig,
    oaem: OaemConfig,
    damp_factor: f64,
}

fn resolve_training(file: &FileConfig, a: &TrainArgs, width: usize) -> anyhow::Result<Training> {
    let bd = BeamConfig::default();
    let metric: String = file.resolve(a.metric.clone(), "metric", "hessian".into())?;
    let beam = BeamConfig {
        width,
        max_epochs: file.resolve(a.epochs, "epochs", bd.max_epochs)?,
        early_stop_rel: file.resolve(a.early_stop, "early_stop", bd.early_stop_rel)?,
        metric: parse_metric(&metric)?,
        update_steps: file.resolve(a.update_steps, "update_steps", bd.update_steps)?,
        update_lr: file.resolve(a.update_lr, "update_lr", bd.update_lr)?,
    };
    let kd = KMeansConfig::default();
    let kmeans = KMeansConfig {
        max_iters: file.resolve(a.kmeans_iters, "kmeans_iters", kd.max_iters)?,
        tol: file.resolve(a.kmeans_tol, "kmeans_tol", kd.tol)?,
    };
    let od = OaemConfig::default();
    let schedule: String =
        file.resolve(a.oaem_schedule.clone(), "oaem_schedule", "per_round".into())?;
    let oaem = OaemConfig {
        rounds: file.resolve(a.oaem_rounds, "oaem_rounds", od.rounds)?,
        steps_per_round: file.resolve(a.oaem_steps, "oaem_steps", od.steps_per_round)?,
        lr: file.resolve(a.oaem_lr, "oaem_lr", od.lr)?,
        schedule: parse_schedule(&schedule)?,
        ..od
    };
    let damp_factor = file.resolve(a.damp, "damp", addq_core::hessian::DEFAULT_DAMP_FACTOR)?;
    beam.validate().map_err(|e| usage(e.to_string()))?;
    oaem.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Training {
        beam,
        kmeans,
        oaem,
        damp_factor,
    })
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainArgs,
    /// Weight matrix (d_out × d_in).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Calibration activations (rows × d_in).
    #[arg(long)]
    calib: Option<PathBuf>,
    /// greedy or oaem.
    #[arg(long)]
    init: Option<String>,
    /// Beam width.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    codebooks: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-epoch loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct QuantizeConfig {
    weights: PathBuf,
    calib: PathBuf,
    out: PathBuf,
    trace: Option<PathBuf>,
    init: InitKind,
    group_size: usize,
    codebooks: usize,
    codebook_size: usize,
    training: Training,
}

pub fn quantize(a: QuantizeArgs) -> anyhow::Result<()> {
    let file = setup(&a.common)?;
    let seed = file.resolve(a.common.seed, "seed", 0)?;
    let init: String = file.resolve(a.init, "init", "oaem".into())?;
    let width = file.resolve(a.beam, "beam", BeamConfig::default().width)?;
    let cfg = QuantizeConfig {
        weights: required(file.resolve_opt(a.weights, "weights")?, "weights")?,
        calib: required(file.resolve_opt(a.calib, "calib")?, "calib")?,
        out: required(file.resolve_opt(a.out, "out")?, "out")?,
        trace: file.resolve_opt(a.trace, "trace")?,
        init: parse_init(&init)?,
        group_size: file.resolve(a.group_size, "group_size", 8)?,
        codebooks: file.resolve(a.codebooks, "codebooks", 2)?,
        codebook_size: file.resolve(a.codebook_size, "codebook_size", 256)?,
        training: resolve_training(&file, &a.train, width)?,
    };
    file.finish()?;

    let w = load_matrix(&cfg.weights)?;
    let x = load_matrix(&cfg.calib)?;
    let problem = LayerProblem::new(w, x, cfg.group_size)?;
    let bank = build_hessian_bank(
        &problem.activations,
        cfg.group_size,
        cfg.training.damp_factor,
    )?;
    let settings = InitSettings {
        kind: cfg.init,
        num_codebooks: cfg.codebooks,
        codebook_size: cfg.codebook_size,
        kmeans: cfg.training.kmeans,
        oaem: cfg.training.oaem,
    };
    let out = initialise_and_quantize(&problem, &bank, &settings, &cfg.training.beam, seed)?;
    info!(
        "{} epochs, loss {} -> {}",
        out.epochs_run,
        out.trace[0].loss,
        out.final_loss()
    );
    write_artifact(&out.artifact, &cfg.out)?;

    let mut manifest = RunManifest::new("quantize", seed, &cfg)?;
    manifest.input("weights", &cfg.weights)?;
    manifest.input("calib", &cfg.calib)?;
    manifest.write_next_to(&cfg.out)?;
    if let Some(path) = &cfg.trace {
        let mut f = create(path)?;
        writeln!(f, "epoch,loss")?;
        for r in &out.trace {
            writeln!(f, "{},{}", r.epoch, fmt_float(r.loss))?;
        }
        f.flush()?;
        manifest.write_next_to(path)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Activations from a shifted domain.
    #[arg(long)]
    shifted: Option<PathBuf>,
    /// JSON report; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalConfig {
    artifact: PathBuf,
    weights: PathBuf,
    calib: PathBuf,
    shifted: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    layer_loss: f64,
    mse_cal: f64,
    mse_shift: Option<f64>,
    degradation_ratio: Option<f64>,
}

fn emit_json(value: &impl Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let file = setup(&a.common)?;
    let seed = file.resolve(a.common.seed, "seed", 0)?;
    let cfg = EvalConfig {
        artifact: required(file.resolve_opt(a.artifact, "artifact")?, "artifact")?,
        weights: required(file.resolve_opt(a.weights, "weights")?, "weights")?,
        calib: required(file.resolve_opt(a.calib, "calib")?, "calib")?,
        shifted: file.resolve_opt(a.shifted, "shifted")?,
        out: file.resolve_opt(a.out, "out")?,
    };
    file.finish()?;

    let art = read_artifact(&cfg.artifact)?;
    let w = load_matrix(&cfg.weights)?;
    let x = load_matrix(&cfg.calib)?;
    let shifted = cfg.shifted.as_ref().map(load_matrix).transpose()?;
    let w_hat = reconstruct_matrix(&art.codebooks, &art.codes, art.d_out, art.d_in)?;
    let w_hat = apply_row_scales(&w_hat, art.scales.as_deref())?;
    let loss = layer_loss(&x, &w, &w_hat)?;
    let report = match &shifted {
        Some(xs) => {
            let r = domain_shift_eval(&art, &w, &x, xs)?;
            EvalReport {
                layer_loss: loss,
                mse_cal: r.mse_cal,
                mse_shift: Some(r.mse_shift),
                degradation_ratio: Some(r.degradation_ratio),
            }
        }
        None => EvalReport {
            layer_loss: loss,
            mse_cal: loss / x.rows() as f64,
            mse_shift: None,
            degradation_ratio: None,
        },
    };
    emit_json(&report, cfg.out.as_deref())?;
    if let Some(out) = &cfg.out {
        let mut manifest = RunManifest::new("eval", seed, &cfg)?;
        manifest.input("artifact", &cfg.artifact)?;
        manifest.input("weights", &cfg.weights)?;
        manifest.input("calib", &cfg.calib)?;
        if let Some(s) = &cfg.shifted {
            manifest.input("shifted", s)?;
        }
        manifest.write_next_to(out)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Calibration activations; without them the metric is Euclidean.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    damp: Option<f64>,
    /// Largest number of codes the exhaustive search may enumerate.
    #[arg(long)]
    cap: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct OracleConfig {
    artifact: PathBuf,
    weights: PathBuf,
    calib: Option<PathBuf>,
    beam: usize,
    damp_factor: f64,
    cap: u64,
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    groups: usize,
    beam_width: usize,
    beam_optimal: usize,
    beam_optimal_fraction: f64,
    stored_optimal: usize,
    mean_exhaustive_cost: f64,
    mean_beam_cost: f64,
    mean_stored_cost: f64,
    max_beam_excess: f64,
}

pub fn oracle(a: OracleArgs) -> anyhow::Result<()> {
    let file = setup(&a.common)?;
    let seed = file.resolve(a.common.seed, "seed", 0)?;
    let cfg = OracleConfig {
        artifact: required(file.resolve_opt(a.artifact, "artifact")?, "artifact")?,
        weights: required(file.resolve_opt(a.weights, "weights")?, "weights")?,
        calib: file.resolve_opt(a.calib, "calib")?,
        beam: file.resolve(a.beam, "beam", BeamConfig::default().width)?,
        damp_factor: file.resolve(a.damp, "damp", addq_core::hessian::DEFAULT_DAMP_FACTOR)?,
        cap: file.resolve(a.cap, "cap", DEFAULT_EXHAUSTIVE_CAP)?,
        out: file.resolve_opt(a.out, "out")?,
    };
    file.finish()?;
    if cfg.beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }

    let art = read_artifact(&cfg.artifact)?;
    let w = load_matrix(&cfg.weights)?;
    let g = art.group_size();
    let combos = (art.codebooks.codebook_size() as f64).powi(art.codebooks.num_codebooks() as i32);
    if combos > cfg.cap as f64 {
        return Err(addq_core::Error::OracleTooLarge {
            combos,
            cap: cfg.cap,
        }
        .into());
    }
    let x = match &cfg.calib {
        Some(p) => load_matrix(p)?,
        None => addq_core::DenseMatrix::identity(w.cols()),
    };
    let problem = LayerProblem::new(w, x, g)?;
    let bank = match &cfg.calib {
        Some(_) => build_hessian_bank(&problem.activations, g, cfg.damp_factor)?,
        None => addq_core::HessianBank::identity(problem.layout.blocks_per_row(), g),
    };
    if art.num_groups() != problem.layout.num_groups() {
        return Err(addq_core::Error::Dimension(format!(
            "artifact has {} groups, weights have {}",
            art.num_groups(),
            problem.layout.num_groups()
        ))
        .into());
    }
    let groups = problem.groups();
    let layout = problem.layout;
    let rows: Vec<(f64, f64, f64)> = (0..groups.len())
        .into_par_iter()
        .map(|i| {
            let h = bank.block_for(&layout, i);
            let t = groups.get(i);
            let (_, ex) = exhaustive_assign(t, &art.codebooks, h, cfg.cap)?;
            let (_, bc) = beam_assign(t, &art.codebooks, h, cfg.beam);
            let stored = code_cost(t, &art.codebooks, h, art.codes.code(i));
            Ok((ex, bc, stored))
        })
        .collect::<addq_core::Result<_>>()?;
    let n = rows.len().max(1) as f64;
    let report = OracleReport {
        groups: rows.len(),
        beam_width: cfg.beam,
        beam_optimal: rows.iter().filter(|r| r.1 <= r.0).count(),
        beam_optimal_fraction: rows.iter().filter(|r| r.1 <= r.0).count() as f64 / n,
        stored_optimal: rows.iter().filter(|r| r.2 <= r.0).count(),
        mean_exhaustive_cost: rows.iter().map(|r| r.0).sum::<f64>() / n,
        mean_beam_cost: rows.iter().map(|r| r.1).sum::<f64>() / n,
        mean_stored_cost: rows.iter().map(|r| r.2).sum::<f64>() / n,
        max_beam_excess: rows.iter().map(|r| r.1 - r.0).fold(0.0, f64::max),
    };
    emit_json(&report, cfg.out.as_deref())?;
    if let Some(out) = &cfg.out {
        let mut manifest = RunManifest::new("oracle", seed, &cfg)?;
        manifest.input("artifact", &cfg.artifact)?;
        manifest.input("weights", &cfg.weights)?;
        if let Some(c) = &cfg.calib {
            manifest.input("calib", c)?;
        }
        manifest.write_next_to(out)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// With calibration activations, use the Hessian-weighted variant.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    damp: Option<f64>,
    /// Per-group terms as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram of each term as CSV.
    #[arg(long)]
    hist: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Serialize)]
struct DecomposeConfig {
    artifact: PathBuf,
    weights: PathBuf,
    calib: Option<PathBuf>,
    damp_factor: f64,
    out: Option<PathBuf>,
    hist: Option<PathBuf>,
    bins: usize,
}

#[derive(Debug, Serialize)]
struct DecomposeSummary {
    groups: usize,
    greedy_suboptimal: usize,
    greedy_suboptimal_fraction: f64,
    mean_gap: f64,
    mean_direct_cost: f64,
    mean_coupling: f64,
    mean_residual_mismatch: f64,
    max_identity_error: f64,
}

fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Vec::new();
    }
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect()
}

pub fn decompose(a: DecomposeArgs) -> anyhow::Result<()> {
    let file = setup(&a.common)?;
    let seed = file.resolve(a.common.seed, "seed", 0)?;
    let cfg = DecomposeConfig {
        artifact: required(file.resolve_opt(a.artifact, "artifact")?, "artifact")?,
        weights: required(file.resolve_opt(a.weights, "weights")?, "weights")?,
        calib: file.resolve_opt(a.calib, "calib")?,
        damp_factor: file.resolve(a.damp, "damp", addq_core::hessian::DEFAULT_DAMP_FACTOR)?,
        out: file.resolve_opt(a.out, "out")?,
        hist: file.resolve_opt(a.hist, "hist")?,
        bins: file.resolve(a.bins, "bins", 20)?,
    };
    file.finish()?;
    if cfg.bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }

    let art = read_artifact(&cfg.artifact)?;
    let w = load_matrix(&cfg.weights)?;
    let g = art.group_size();
    let groups = addq_core::Groups::from_matrix(&w, g)?;
    if groups.len() != art.num_groups() {
        return Err(addq_core::Error::Dimension(format!(
            "artifact has {} groups, weights have {}",
            art.num_groups(),
            groups.len()
        ))
        .into());
    }
    let layout = addq_core::GroupLayout::new(w.rows(), w.cols(), g)?;
    let bank = match &cfg.calib {
        Some(p) => Some(build_hessian_bank(&load_matrix(p)?, g, cfg.damp_factor)?),
        None => None,
    };
    let terms: Vec<GapDecomposition> = (0..groups.len())
        .into_par_iter()
        .map(|i| match &bank {
            Some(b) => {
                decompose_gap_weighted(groups.get(i), &art.codebooks, b.block_for(&layout, i))
            }
            None => decompose_gap(groups.get(i), &art.codebooks),
        })
        .collect::<addq_core::Result<_>>()?;

    let n = terms.len().max(1) as f64;
    let sub = terms.iter().filter(|d| d.greedy_suboptimal()).count();
    let summary = DecomposeSummary {
        groups: terms.len(),
        greedy_suboptimal: sub,
        greedy_suboptimal_fraction: sub as f64 / n,
        mean_gap: terms.iter().map(|d| d.gap()).sum::<f64>() / n,
        mean_direct_cost: terms.iter().map(|d| d.direct_cost).sum::<f64>() / n,
        mean_coupling: terms.iter().map(|d| d.coupling).sum::<f64>() / n,
        mean_residual_mismatch: terms.iter().map(|d| d.residual_mismatch).sum::<f64>() / n,
        max_identity_error: terms
            .iter()
            .map(|d| (d.term_sum() - d.gap()).abs())
            .fold(0.0, f64::max),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);

    let mut manifest = RunManifest::new("decompose", seed, &cfg)?;
    manifest.input("artifact", &cfg.artifact)?;
    manifest.input("weights", &cfg.weights)?;
    if let Some(c) = &cfg.calib {
        manifest.input("calib", c)?;
    }
    if let Some(path) = &cfg.out {
        let mut f = create(path)?;
        writeln!(
            f,
            "group,i_greedy,j_greedy,i_opt,j_opt,eps_greedy,eps_opt,direct_cost,coupling,residual_mismatch"
        )?;
        for (i, d) in terms.iter().enumerate() {
            writeln!(
                f,
                "{i},{},{},{},{},{},{},{},{},{}",
                d.i_greedy,
                d.j_greedy,
                d.i_opt,
                d.j_opt,
                fmt_float(d.eps_greedy),
                fmt_float(d.eps_opt),
                fmt_float(d.direct_cost),
                fmt_float(d.coupling),
                fmt_float(d.residual_mismatch)
            )?;
        }
        f.flush()?;
        manifest.write_next_to(path)?;
    }
    if let Some(path) = &cfg.hist {
        let mut f = create(path)?;
        writeln!(f, "term,bin_lo,bin_hi,count")?;
        let columns: [(&str, Vec<f64>); 4] = [
            ("gap", terms.iter().map(|d| d.gap()).collect()),
            ("direct_cost", terms.iter().map(|d| d.direct_cost).collect()),
            ("coupling", terms.iter().map(|d| d.coupling).collect()),
            (
                "residual_mismatch",
                terms.iter().map(|d| d.residual_mismatch).collect(),
            ),
        ];
        for (name, values) in &columns {
            for (lo, hi, c) in histogram(values, cfg.bins) {
                writeln!(f, "{name},{},{},{c}", fmt_float(lo), fmt_float(hi))?;
            }
        }
        f.flush()?;
        manifest.write_next_to(path)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainArgs,
    /// Number of seeds per cell, derived from --seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn sweep(a: SweepArgs) -> anyhow::Result<()> {
    if a.common.config.is_none() {
        return Err(usage("sweep needs --config"));
    }
    let file = setup(&a.common)?;
    let seed = file.resolve(a.common.seed, "seed", 0)?;
    let out: PathBuf = required(file.resolve_opt(a.out, "out")?, "out")?;
    let defaults = SweepConfig::default();
    let ld = LayerDesign::default();
    let num_seeds = file.resolve(a.seeds, "seeds", defaults.seeds.len())?;
    let profile_kind: String = file.resolve(None, "profile", "decaying".to_string())?;
    let (act_std, ratio) = match ld.profile {
        StdProfile::Decaying { std, ratio } => (std, ratio),
        StdProfile::Constant { std } => (std, 1.0),
    };
    let act_std = file.resolve(None, "act_std", act_std)?;
    let profile = match profile_kind.as_str() {
        "constant" => StdProfile::Constant { std: act_std },
        "decaying" => StdProfile::Decaying {
            std: act_std,
            ratio: file.resolve(None, "decay_ratio", ratio)?,
        },
        other => return Err(usage(format!("unknown profile `{other}`"))),
    };
    let layer = LayerDesign {
        d_in: file.resolve(None, "d_in", ld.d_in)?,
        g: file.resolve(None, "group_size", ld.g)?,
        base_std: file.resolve(None, "base_std", ld.base_std)?,
        outlier_fraction: file.resolve(None, "outlier_fraction", ld.outlier_fraction)?,
        outlier_scale: file.resolve(None, "outlier_scale", ld.outlier_scale)?,
        calib_rows: file.resolve(None, "calib_rows", ld.calib_rows)?,
        profile,
        shift_scale: file.resolve(None, "shift_scale", ld.shift_scale)?,
        damp_factor: file.resolve(a.train.damp, "damp", ld.damp_factor)?,
    };
    let k: Vec<usize> = file
        .get_list("k")?
        .unwrap_or_else(|| vec![defaults.shapes[0].0]);
    let m: Vec<usize> = file
        .get_list("m")?
        .unwrap_or_else(|| vec![defaults.shapes[0].1]);
    let inits: Vec<String> = file
        .get_list("inits")?
        .unwrap_or_else(|| defaults.inits.iter().map(|i| i.to_string()).collect());
    let training = resolve_training(&file, &a.train, defaults.beam.width)?;
    let cfg = SweepConfig {
        layer,
        group_counts: file
            .get_list("group_counts")?
            .unwrap_or(defaults.group_counts),
        shapes: k
            .iter()
            .flat_map(|&k| m.iter().map(move |&m| (k, m)))
            .collect(),
        seeds: (0..num_seeds as u32)
            .map(|i| derive_seed(seed, StreamTag::Experiment, i))
            .collect(),
        inits: inits
            .iter()
            .map(|s| parse_init(s))
            .collect::<anyhow::Result<_>>()?,
        beam_widths: file
            .get_list("beam_widths")?
            .unwrap_or(defaults.beam_widths),
        beam: training.beam,
        kmeans: training.kmeans,
        oaem: training.oaem,
    };
    file.finish()?;

    let rows = rho_sweep(&cfg)?;
    let mut f = create(&out)?;
    write_sweep_csv(&rows, &mut f)?;
    f.flush()?;
    let mut manifest = RunManifest::new("sweep", seed, &cfg)?;
    if let Some(c) = &a.common.config {
        manifest.input("config", c)?;
    }
    manifest.write_next_to(&out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// weights, activations or holdout.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    base_std: Option<f64>,
    #[arg(long)]
    outlier_fraction: Option<f64>,
    #[arg(long)]
    outlier_scale: Option<f64>,
    #[arg(long)]
    rows: Option<usize>,
    /// constant or decaying.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    act_std: Option<f64>,
    #[arg(long)]
    decay_ratio: Option<f64>,
    #[arg(long)]
    shift_scale: Option<f64>,
    /// Scale a seeded half of the dimensions by --shift-scale.
    #[arg(long)]
    shifted: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SynthConfig {
    Weights(WeightSpec),
    Activations { spec: ActivationSpec, shifted: bool },
    Holdout { spec: ActivationSpec, shifted: bool },
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let file = setup(&a.common)?;
    let seed = file.resolve(a.common.seed, "seed", 0)?;
    let out: PathBuf = required(file.resolve_opt(a.out, "out")?, "out")?;
    let kind: String = required(file.resolve_opt(a.kind, "kind")?, "kind")?;
    let ld = LayerDesign::default();
    let d_in = file.resolve(a.d_in, "d_in", ld.d_in)?;
    let cfg = if kind == "weights" {
        SynthConfig::Weights(WeightSpec {
            d_out: required(file.resolve_opt(a.d_out, "d_out")?, "d_out")?,
            d_in,
            g: file.resolve(a.group_size, "group_size", ld.g)?,
            base_std: file.resolve(a.base_std, "base_std", ld.base_std)?,
            outlier_fraction: file.resolve(
                a.outlier_fraction,
                "outlier_fraction",
                ld.outlier_fraction,
            )?,
            outlier_scale: file.resolve(a.outlier_scale, "outlier_scale", ld.outlier_scale)?,
            seed,
        })
    } else {
        let profile: String = file.resolve(a.profile, "profile", "decaying".into())?;
        let std = file.resolve(a.act_std, "act_std", 1.0)?;
        let profile = match profile.as_str() {
            "constant" => StdProfile::Constant { std },
            "decaying" => StdProfile::Decaying {
                std,
                ratio: file.resolve(a.decay_ratio, "decay_ratio", 30.0)?,
            },
            other => return Err(usage(format!("unknown profile `{other}`"))),
        };
        let spec = ActivationSpec {
            n_rows: file.resolve(a.rows, "rows", ld.calib_rows)?,
            d_in,
            profile,
            shift_scale: file.resolve(a.shift_scale, "shift_scale", ld.shift_scale)?,
            seed,
        };
        let shifted = a.shifted || file.get::<bool>("shifted")?.unwrap_or(false);
        match kind.as_str() {
            "activations" => SynthConfig::Activations { spec, shifted },
            "holdout" => SynthConfig::Holdout { spec, shifted },
            other => return Err(usage(format!("unknown synth kind `{other}`"))),
        }
    };
    file.finish()?;

    let m = match &cfg {
        SynthConfig::Weights(spec) => gen_weights(spec)?,
        SynthConfig::Activations { spec, shifted } => gen_activations(spec, *shifted)?,
        SynthConfig::Holdout { spec, shifted } => gen_holdout_activations(spec, *shifted)?,
    };
    save_matrix(&m, &out)?;
    RunManifest::new("synth", seed, &cfg)?.write_next_to(&out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct PvtuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Held-out activations driving the fine-tuning loss.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Steps between code reassignment passes; 0 never reassigns.
    #[arg(long)]
    reassign_every: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    damp: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct PvtuneConfig {
    artifact: PathBuf,
    weights: PathBuf,
    holdout: PathBuf,
    out: PathBuf,
    trace: Option<PathBuf>,
    pv: PvConfig,
}

pub fn pvtune(a: PvtuneArgs) -> anyhow::Result<()> {
    let file = setup(&a.common)?;
    let seed = file.resolve(a.common.seed, "seed", 0)?;
    let d = PvConfig::default();
    let every = file.resolve(
        a.reassign_every,
        "reassign_every",
        d.reassign_every.unwrap_or(0),
    )?;
    let cfg = PvtuneConfig {
        artifact: required(file.resolve_opt(a.artifact, "artifact")?, "artifact")?,
        weights: required(file.resolve_opt(a.weights, "weights")?, "weights")?,
        holdout: required(file.resolve_opt(a.holdout, "holdout")?, "holdout")?,
        out: required(file.resolve_opt(a.out, "out")?, "out")?,
        trace: file.resolve_opt(a.trace, "trace")?,
        pv: PvConfig {
            outer_steps: file.resolve(a.steps, "steps", d.outer_steps)?,
            reassign_every: (every > 0).then_some(every),
            lr: file.resolve(a.lr, "lr", d.lr)?,
            beam_width: file.resolve(a.beam, "beam", d.beam_width)?,
            damp_factor: file.resolve(a.damp, "damp", d.damp_factor)?,
        },
    };
    file.finish()?;
    cfg.pv.validate().map_err(|e| usage(e.to_string()))?;

    let art = read_artifact(&cfg.artifact)?;
    let w = load_matrix(&cfg.weights)?;
    let xh = load_matrix(&cfg.holdout)?;
    let problem = LayerProblem::new(w, xh.clone(), art.group_size())?;
    let outcome = pv_finetune(&art, &problem, &xh, &cfg.pv)?;
    info!(
        "fine-tuning loss {} -> {}",
        outcome.trace[0].loss,
        outcome.final_loss()
    );
    write_artifact(&outcome.artifact, &cfg.out)?;
    let mut manifest = RunManifest::new("pvtune", seed, &cfg)?;
    manifest.input("artifact", &cfg.artifact)?;
    manifest.input("weights", &cfg.weights)?;
    manifest.input("holdout", &cfg.holdout)?;
    manifest.write_next_to(&cfg.out)?;
    if let Some(path) = &cfg.trace {
        let mut f = create(path)?;
        writeln!(f, "step,loss,reassigned")?;
        for r in &outcome.trace {
            writeln!(f, "{},{},{}", r.step, fmt_float(r.loss), r.reassigned as u8)?;
        }
        f.flush()?;
        manifest.write_next_to(path)?;
    }
    Ok(())
}
