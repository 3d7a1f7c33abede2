use crate::assign::{solve_escalating, solve_signed_escalating, AssignmentResult};
use crate::error::{Error, Result};
use crate::ldt::pvalue_corrected;
use crate::matlin::{cross_covariance, ortho_with, Completion, OrthoOptions, PolarResult};
use crate::vocab::{check_overlap, TokenIntersection};
use crate::weights::{LayerWeights, ModelBundle, Role};
use crate::Matrix;

use super::{AlignmentFinding, DetectConfig, MlpMode, Reliability, Stage};

fn polar(m: &Matrix, cfg: &DetectConfig, completion: Completion) -> Result<PolarResult<f64>> {
    ortho_with(m, OrthoOptions { method: cfg.polar, completion })
}

fn reliability(p: &PolarResult<f64>) -> Reliability {
    if p.is_full_rank() {
        Reliability::FullRank
    } else {
        Reliability::RankDeficient
    }
}

/// Greedy channel correspondence for a non-square alignment: every channel
/// of the narrower side is matched to its strongest counterpart.
pub(crate) struct ChannelMatch {
    /// `map[k]` indexes the wider side for channel `k` of the narrower side.
    pub map: Vec<usize>,
    pub signs: Vec<i8>,
    pub trace: f64,
    /// True when the narrower side is the row side of the score matrix.
    pub rows_narrow: bool,
}

impl ChannelMatch {
    pub(crate) fn compute(u: &Matrix, signed: bool) -> Self {
        let rows_narrow = u.rows() <= u.cols();
        let (narrow, wide) = if rows_narrow { (u.rows(), u.cols()) } else { (u.cols(), u.rows()) };
        let at = |k: usize, j: usize| if rows_narrow { u[(k, j)] } else { u[(j, k)] };
        let key = |x: f64| if signed { x.abs() } else { x };
        let mut map = Vec::with_capacity(narrow);
        let mut signs = Vec::with_capacity(narrow);
        let mut trace = 0.0;
        for k in 0..narrow {
            let mut best = 0;
            for j in 1..wide {
                if key(at(k, j)) > key(at(k, best)) {
                    best = j;
                }
            }
            let v = at(k, best);
            map.push(best);
            signs.push(if signed && v < 0.0 { -1 } else { 1 });
            trace += key(v);
        }
        ChannelMatch { map, signs, trace, rows_narrow }
    }

    /// Partial (signed) permutation with the shape of the score matrix.
    pub(crate) fn matrix(&self, rows: usize, cols: usize) -> Matrix {
        let mut p = Matrix::zeros(rows, cols);
        for (k, (&j, &s)) in self.map.iter().zip(&self.signs).enumerate() {
            let (r, c) = if self.rows_narrow { (k, j) } else { (j, k) };
            p[(r, c)] = s as f64;
        }
        p
    }
}

fn sum_of(result: &AssignmentResult<f64>, u: &Matrix) -> f64 {
    match &result.signs {
        Some(_) => result.perm.iter().enumerate().map(|(i, &j)| u[(i, j)].abs()).sum(),
        None => result.perm.iter().enumerate().map(|(i, &j)| u[(i, j)]).sum(),
    }
}

/// Scores an alignment matrix: exact or heuristic permutation when square,
/// greedy channel matching otherwise. Returns the finding and the basis map
/// to use downstream when the stage is significant.
fn score_alignment(
    stage: Stage,
    u: &PolarResult<f64>,
    signed: bool,
    log10_multiplicity: f64,
    cfg: &DetectConfig,
) -> Result<(AlignmentFinding, Option<Matrix>)> {
    let w = &u.w;
    let identity_trace = w.trace();
    let sign_correction = |k: usize| if signed { k as f64 * std::f64::consts::LOG10_2 } else { 0.0 };

    if w.is_square() {
        let d = w.rows();
        let solved = if signed {
            solve_signed_escalating(w, cfg.exact_cap)?
        } else {
            solve_escalating(w, cfg.exact_cap)?
        };
        let (perm, trace_c) = match solved {
            Ok(found) => {
                let t = sum_of(&found, w);
                (Some(found), t)
            }
            Err(miss) => {
                log::warn!(
                    "{stage}: {} argmax collisions above the exact-assignment cap; scoring the unpermuted trace",
                    miss.collisions.len()
                );
                (None, identity_trace)
            }
        };
        let pv = pvalue_corrected(trace_c, d, cfg.threshold, log10_multiplicity + sign_correction(d))?;
        let basis = match (&perm, pv.significant) {
            (Some(p), true) => Some(p.matrix()),
            _ => None,
        };
        let finding = AlignmentFinding {
            stage,
            u_tilde: w.clone(),
            perm,
            channel_map: None,
            trace_c,
            identity_trace,
            pv: Some(pv),
            reliability: reliability(u),
            scale: None,
            residual: None,
            effective_rank: u.effective_rank,
        };
        return Ok((finding, basis));
    }

    let m = ChannelMatch::compute(w, signed);
    let d = w.rows().max(w.cols());
    let pv = pvalue_corrected(m.trace, d, cfg.threshold, log10_multiplicity + sign_correction(m.map.len()))?;
    let basis = pv.significant.then(|| m.matrix(w.rows(), w.cols()));
    let finding = AlignmentFinding {
        stage,
        u_tilde: w.clone(),
        perm: None,
        trace_c: m.trace,
        channel_map: Some(m.map),
        identity_trace,
        pv: Some(pv),
        reliability: Reliability::RankDeficient,
        scale: None,
        residual: None,
        effective_rank: u.effective_rank,
    };
    Ok((finding, basis))
}

/// Embedding stage. Returns the finding and the basis transform to carry
/// into the layer stages: the recovered (partial) permutation when the stage
/// is significant, otherwise the polar factor itself.
pub fn align_embeddings(
    a: &ModelBundle,
    b: &ModelBundle,
    common: &TokenIntersection,
    cfg: &DetectConfig,
) -> Result<(AlignmentFinding, Matrix)> {
    let (ea_dim, eb_dim) = (a.arch.emb_dim, b.arch.emb_dim);
    check_overlap(common.count, ea_dim.max(eb_dim))?;
    let ea = a.embedding.select_rows(&common.ids_a())?;
    let eb = b.embedding.select_rows(&common.ids_b())?;
    let cross = cross_covariance(&ea, &eb)?;
    let p = polar(&cross, cfg, Completion::Orthonormal)?;
    let (finding, basis) = score_alignment(Stage::Embedding, &p, cfg.signed_embedding, 0.0, cfg)?;
    let u = basis.unwrap_or_else(|| p.w.clone());
    Ok((finding, u))
}

fn check_cols(role: Role, xa: &Matrix, xb: &Matrix) -> Result<()> {
    if xa.cols() != xb.cols() {
        return Err(Error::ShapeMismatch {
            what: format!("{role} output width"),
            expected: vec![xa.cols()],
            found: vec![xb.cols()],
        });
    }
    Ok(())
}

fn check_basis(u: &Matrix, rows_a: usize, rows_b: usize) -> Result<()> {
    if u.shape() != (rows_b, rows_a) {
        return Err(Error::ShapeMismatch {
            what: "basis transform".into(),
            expected: vec![rows_b, rows_a],
            found: vec![u.rows(), u.cols()],
        });
    }
    Ok(())
}

/// Inner transform of one attention projection given the basis map `u`
/// (`emb_b × emb_a`). For Q, K and V this is `Ortho(Xᵀ Uᵀ X′)`, for O it is
/// `Ortho(O Uᵀ O′ᵀ)`; `scale = ‖X′‖_F / ‖X‖_F`.
pub fn solve_attention_inner(
    layer_a: &LayerWeights,
    layer_b: &LayerWeights,
    u: &Matrix,
    layer: usize,
    role: Role,
    cfg: &DetectConfig,
) -> Result<AlignmentFinding> {
    let xa = layer_a
        .get(role)
        .ok_or_else(|| Error::InvalidArgument(format!("{role} is not an attention role")))?;
    let xb = layer_b.get(role).unwrap();
    let ut = u.transpose();

    let (cross, oriented_a, oriented_b) = match role {
        Role::Q | Role::K | Role::V => {
            check_basis(u, xa.rows(), xb.rows())?;
            check_cols(role, xa, xb)?;
            (xa.t_mul(&ut.matmul(xb)?)?, None, None)
        }
        Role::O => {
            check_basis(u, xa.cols(), xb.cols())?;
            if xa.rows() != xb.rows() {
                return Err(Error::ShapeMismatch {
                    what: "O input width".into(),
                    expected: vec![xa.rows()],
                    found: vec![xb.rows()],
                });
            }
            let oa = xa.matmul(&ut)?;
            (oa.matmul(&xb.transpose())?, Some(oa), Some(xb))
        }
        _ => return Err(Error::InvalidArgument(format!("{role} is not an attention role"))),
    };

    let p = polar(&cross, cfg, Completion::Orthonormal)?;
    let norm_a = xa.frobenius_norm();
    let norm_b = xb.frobenius_norm();
    let scale = if norm_a > 0.0 { norm_b / norm_a } else { 0.0 };
    let predicted = match (oriented_a, oriented_b) {
        (Some(oa), Some(_)) => p.w.transpose().matmul(&oa)?.scale(scale),
        _ => u.matmul(xa)?.matmul(&p.w)?.scale(scale),
    };
    let residual = if norm_b > 0.0 {
        predicted.sub(xb)?.frobenius_norm() / norm_b
    } else {
        predicted.frobenius_norm()
    };

    Ok(AlignmentFinding {
        stage: Stage::Attention { layer, role },
        identity_trace: p.w.trace(),
        trace_c: p.w.trace(),
        u_tilde: p.w.clone(),
        perm: None,
        channel_map: None,
        pv: None,
        reliability: reliability(&p),
        scale: Some(scale),
        residual: Some(residual),
        effective_rank: p.effective_rank,
    })
}

/// MLP stage: channel permutation from the polar factor of `Upᵀ Uᵀ Up′`
/// (optionally summed with the Gate and Down factors), scored with the Up
/// factor and a `log10(num_layers)` multiplicity.
pub fn solve_mlp(
    layer_a: &LayerWeights,
    layer_b: &LayerWeights,
    u: &Matrix,
    layer: usize,
    num_layers: usize,
    mode: MlpMode,
    cfg: &DetectConfig,
) -> Result<AlignmentFinding> {
    check_basis(u, layer_a.up.rows(), layer_b.up.rows())?;
    let ut = u.transpose();
    let input_side = |xa: &Matrix, xb: &Matrix| -> Result<Matrix> { xa.t_mul(&ut.matmul(xb)?) };

    let up = polar(&input_side(&layer_a.up, &layer_b.up)?, cfg, Completion::Zero)?;
    let score = match mode {
        MlpMode::UpOnly => up.w.clone(),
        MlpMode::Sum3 => {
            let gate = polar(&input_side(&layer_a.gate, &layer_b.gate)?, cfg, Completion::Zero)?;
            let down_cross = layer_a.down.matmul(&ut)?.matmul(&layer_b.down.transpose())?;
            let down = polar(&down_cross, cfg, Completion::Zero)?;
            up.w.add(&gate.w)?.add(&down.w)?
        }
    };

    let multiplicity = (num_layers.max(1) as f64).log10();
    let stage = Stage::Mlp { layer };
    if !score.is_square() {
        let (finding, _) = score_alignment(stage, &up, false, multiplicity, cfg)?;
        return Ok(finding);
    }

    let solved = solve_escalating(&score, cfg.exact_cap)?;
    let identity_trace = up.w.trace();
    let (perm, trace_c) = match solved {
        Ok(found) => {
            let t = sum_of(&found, &up.w);
            (Some(found), t)
        }
        Err(_) => (None, identity_trace),
    };
    let pv = pvalue_corrected(trace_c, score.rows(), cfg.threshold, multiplicity)?;
    Ok(AlignmentFinding {
        stage,
        u_tilde: up.w.clone(),
        perm,
        channel_map: None,
        trace_c,
        identity_trace,
        pv: Some(pv),
        reliability: reliability(&up),
        scale: None,
        residual: None,
        effective_rank: up.effective_rank,
    })
}
