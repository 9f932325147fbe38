//! Glue shared by the CLI and the experiment drivers: initialise codebooks
//! with either strategy, then run the epoch loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::beam::{quantize_layer, BeamConfig, QuantizeOutcome};
use crate::error::{Error, Result};
use crate::hessian::HessianBank;
use crate::initkm::{residual_init, KMeansConfig};
use crate::oaem::{OaemConfig, OaemRefiner};
use crate::quantcore::{CodeMatrix, CodebookSet, LayerProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Greedy,
    Oaem,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Greedy => "greedy",
            InitKind::Oaem => "oaem",
        })
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "greedy" | "kmeans" => Ok(InitKind::Greedy),
            "oaem" | "oa-em" => Ok(InitKind::Oaem),
            other => Err(Error::Domain(format!("unknown init kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSettings {
    pub kind: InitKind,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub kmeans: KMeansConfig,
    pub oaem: OaemConfig,
}

/// Residual k-means, refined by OA-EM on every codebook when asked.
pub fn initialise(
    problem: &LayerProblem,
    bank: &HessianBank,
    settings: &InitSettings,
    seed: u64,
) -> Result<(CodebookSet, CodeMatrix)> {
    let groups = problem.groups();
    match settings.kind {
        InitKind::Greedy => residual_init(
            &groups,
            settings.num_codebooks,
            settings.codebook_size,
            &settings.kmeans,
            seed,
            None,
        ),
        InitKind::Oaem => {
            let refiner = OaemRefiner {
                bank,
                layout: problem.layout,
                cfg: settings.oaem,
            };
            residual_init(
                &groups,
                settings.num_codebooks,
                settings.codebook_size,
                &settings.kmeans,
                seed,
                Some(&refiner),
            )
        }
    }
}

pub fn initialise_and_quantize(
    problem: &LayerProblem,
    bank: &HessianBank,
    settings: &InitSettings,
    beam: &BeamConfig,
    seed: u64,
) -> Result<QuantizeOutcome> {
    let init = initialise(problem, bank, settings, seed)?;
    quantize_layer(problem, init, bank, beam)
}
