//! Provenance test between two checkpoints.
//!
//! The embedding stage recovers the basis change between the two residual
//! streams. Each layer is then examined in that basis: attention
//! projections yield inner transforms with scales and residuals, MLP blocks
//! yield channel permutations scored against the trace bound.

mod screen;
mod stages;

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{AssignmentResult, DEFAULT_EXACT_CAP};
use crate::error::Result;
use crate::ldt::{default_threshold, PValueResult};
use crate::matlin::PolarMethod;
use crate::vocab::{intersect_vocabs, TokenIntersection, VocabMap};
use crate::weights::{ModelBundle, Role};
use crate::Matrix;

pub use screen::{preliminary_screen, ScreenEntry};
pub use stages::{align_embeddings, solve_attention_inner, solve_mlp};

/// Which polar factors vote on an MLP channel permutation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpMode {
    #[default]
    UpOnly,
    Sum3,
}

impl std::str::FromStr for MlpMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "up_only" => Ok(MlpMode::UpOnly),
            "sum3" => Ok(MlpMode::Sum3),
            other => Err(format!("unknown MLP mode {other}; expected up_only or sum3")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    /// Significance threshold on the p-value bound.
    pub threshold: f64,
    pub mlp_mode: MlpMode,
    /// Largest order for which the exact assignment solver runs.
    pub exact_cap: usize,
    /// Restricts the layer stages; `None` runs every shared layer.
    pub layers: Option<Vec<usize>>,
    /// Match the embedding stage up to sign flips as well as permutation.
    pub signed_embedding: bool,
    pub polar: PolarMethod,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            threshold: default_threshold(),
            mlp_mode: MlpMode::UpOnly,
            exact_cap: DEFAULT_EXACT_CAP,
            layers: None,
            signed_embedding: true,
            polar: PolarMethod::Svd,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stage {
    Embedding,
    Attention { layer: usize, role: Role },
    Mlp { layer: usize },
}

impl Stage {
    pub fn layer(&self) -> Option<usize> {
        match self {
            Stage::Embedding => None,
            Stage::Attention { layer, .. } | Stage::Mlp { layer } => Some(*layer),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Embedding => write!(f, "embedding"),
            Stage::Attention { layer, role } => write!(f, "layer {layer} attention {role}"),
            Stage::Mlp { layer } => write!(f, "layer {layer} mlp"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reliability {
    FullRank,
    RankDeficient,
}

/// Result of one stage.
#[derive(Clone, Debug)]
pub struct AlignmentFinding {
    pub stage: Stage,
    /// Polar factor recovered by the stage.
    pub u_tilde: Matrix,
    pub perm: Option<AssignmentResult<f64>>,
    /// Greedy correspondence of a non-square stage, indexed by the narrower side.
    pub channel_map: Option<Vec<usize>>,
    /// `Tr(P Ũᵀ)` for the recovered assignment.
    pub trace_c: f64,
    /// `Tr(Ũ)` before any assignment.
    pub identity_trace: f64,
    /// Absent for attention stages, which carry no significance claim.
    pub pv: Option<PValueResult>,
    pub reliability: Reliability,
    pub scale: Option<f64>,
    /// `‖prediction − X′‖_F / ‖X′‖_F` for attention stages.
    pub residual: Option<f64>,
    pub effective_rank: usize,
}

impl AlignmentFinding {
    pub fn significant(&self) -> bool {
        self.pv.as_ref().is_some_and(|p| p.significant)
    }

    pub fn log10_p(&self) -> Option<f64> {
        self.pv.as_ref().map(|p| p.log10_p)
    }
}

/// A stage that could not be evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: String,
}

/// Basis map carried from the embedding stage into the layer stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisSource {
    /// The recovered signed (partial) permutation.
    Permutation,
    /// The polar factor, used when the embedding stage is not significant.
    Orthogonal,
    /// Identity fallback after an embedding-stage failure.
    Identity,
}

#[derive(Clone, Debug)]
pub struct DetectionReport {
    pub related: bool,
    pub findings: Vec<AlignmentFinding>,
    pub failures: Vec<StageFailure>,
    pub threshold: f64,
    pub model_a: String,
    pub model_b: String,
    pub common_tokens: usize,
    pub basis: BasisSource,
    pub wall_time: f64,
}

impl DetectionReport {
    /// Strongest evidence: the smallest stage `log10 p`.
    pub fn headline_log10_p(&self) -> Option<f64> {
        self.findings
            .iter()
            .filter_map(AlignmentFinding::log10_p)
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn finding(&self, stage: Stage) -> Option<&AlignmentFinding> {
        self.findings.iter().find(|f| f.stage == stage)
    }

    pub fn significant_stages(&self) -> impl Iterator<Item = &AlignmentFinding> {
        self.findings.iter().filter(|f| f.significant())
    }
}

/// Runs the full comparison. Without vocabularies both models are assumed to
/// share one tokenizer and rows are paired by index.
pub fn run_mdir(
    a: &ModelBundle,
    b: &ModelBundle,
    vocabs: Option<(&VocabMap, &VocabMap)>,
    cfg: &DetectConfig,
) -> Result<DetectionReport> {
    let common = match vocabs {
        Some((va, vb)) => intersect_vocabs(va, vb),
        None => TokenIntersection::identity(a.arch.vocab_size.min(b.arch.vocab_size)),
    };
    run_mdir_on(a, b, &common, cfg)
}

/// As [`run_mdir`] with a precomputed token correspondence.
pub fn run_mdir_on(
    a: &ModelBundle,
    b: &ModelBundle,
    common: &TokenIntersection,
    cfg: &DetectConfig,
) -> Result<DetectionReport> {
    a.validate()?;
    b.validate()?;
    crate::ldt::pvalue(0.0, 1, cfg.threshold)?;
    let start = Instant::now();
    let mut findings = Vec::new();
    let mut failures = Vec::new();

    let (u, basis) = match align_embeddings(a, b, common, cfg) {
        Ok((finding, u)) => {
            let basis = if finding.significant() {
                BasisSource::Permutation
            } else {
                BasisSource::Orthogonal
            };
            findings.push(finding);
            (Some(u), basis)
        }
        Err(e) => {
            failures.push(StageFailure { stage: Stage::Embedding, error: e.to_string() });
            if a.arch.emb_dim == b.arch.emb_dim {
                (Some(Matrix::identity(a.arch.emb_dim)), BasisSource::Identity)
            } else {
                (None, BasisSource::Identity)
            }
        }
    };

    let num_layers = a.layers.len().min(b.layers.len());
    let layers: Vec<usize> = match &cfg.layers {
        Some(list) => list.iter().copied().filter(|&l| l < num_layers).collect(),
        None => (0..num_layers).collect(),
    };
    let attention_roles = [Role::Q, Role::K, Role::V, Role::O];

    let per_layer: Vec<Vec<std::result::Result<AlignmentFinding, StageFailure>>> = layers
        .par_iter()
        .map(|&l| {
            let stages = attention_roles
                .iter()
                .map(|&role| Stage::Attention { layer: l, role })
                .chain(std::iter::once(Stage::Mlp { layer: l }));
            let Some(u) = &u else {
                return stages
                    .map(|stage| {
                        Err(StageFailure {
                            stage,
                            error: "no basis transform: embedding stage failed".into(),
                        })
                    })
                    .collect();
            };
            let (la, lb) = (&a.layers[l], &b.layers[l]);
            stages
                .map(|stage| {
                    let r = match stage {
                        Stage::Attention { role, .. } => solve_attention_inner(la, lb, u, l, role, cfg),
                        _ => solve_mlp(la, lb, u, l, num_layers, cfg.mlp_mode, cfg),
                    };
                    r.map_err(|e| StageFailure { stage, error: e.to_string() })
                })
                .collect()
        })
        .collect();

    for r in per_layer.into_iter().flatten() {
        match r {
            Ok(f) => findings.push(f),
            Err(f) => {
                log::warn!("{}: {}", f.stage, f.error);
                failures.push(f);
            }
        }
    }

    let related = findings.iter().any(AlignmentFinding::significant);
    Ok(DetectionReport {
        related,
        findings,
        failures,
        threshold: cfg.threshold,
        model_a: a.source_path.clone(),
        model_b: b.source_path.clone(),
        common_tokens: common.count,
        basis,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
