//! Synthetic ground truth: toy checkpoints and the equivalent transformations
//! (outer orthogonal change of basis, inner attention transforms, MLP channel
//! permutations, pruning, additive noise) that map one model onto a
//! functionally related copy.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assign::{invert, is_bijection};
use crate::error::{Error, Result};
use crate::ldt::{derive_rng, sample_haar_with};
use crate::weights::{ArchSpec, LayerWeights, ModelBundle, Role};
use crate::Matrix;

/// Initialization scale of toy models.
pub const TOY_INIT_STD: f64 = 0.02;

const PLAN_STREAM: u64 = 0x5EED_0001;
const NOISE_STREAM: u64 = 0x5EED_0002;

/// Deterministic model with i.i.d. `N(0, TOY_INIT_STD²)` entries. Each
/// matrix draws from its own stream, so the result depends only on
/// `(arch, seed)`.
pub fn make_toy_model(arch: &ArchSpec, seed: u64) -> ModelBundle {
    if arch.vocab_size < arch.emb_dim {
        log::warn!(
            "toy vocabulary {} is smaller than the embedding width {}; embedding alignment will reject it",
            arch.vocab_size,
            arch.emb_dim
        );
    }
    let normal = Normal::new(0.0, TOY_INIT_STD).expect("positive std");
    let draw = |role: Role, stream: u64| {
        let (r, c) = arch.shape(role);
        let mut rng = derive_rng(seed, stream);
        Matrix::from_fn(r, c, |_, _| normal.sample(&mut rng))
    };
    let embedding = draw(Role::Embedding, 0);
    let layers = (0..arch.num_layers)
        .map(|l| {
            let base = 1 + (l * Role::LAYER_ROLES.len()) as u64;
            LayerWeights {
                q: draw(Role::Q, base),
                k: draw(Role::K, base + 1),
                v: draw(Role::V, base + 2),
                o: draw(Role::O, base + 3),
                gate: draw(Role::Gate, base + 4),
                up: draw(Role::Up, base + 5),
                down: draw(Role::Down, base + 6),
            }
        })
        .collect();
    ModelBundle {
        arch: arch.clone(),
        embedding,
        layers,
        source_path: format!("toy(seed={seed})"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterKind {
    Identity,
    Permutation,
    SignedPermutation,
    GeneralOrthogonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueMixKind {
    Orthogonal,
    /// Arbitrary invertible per-head value transform; detection is not
    /// expected to recover it.
    GeneralInvertible,
}

/// Parameters of one equivalent transformation. Applied to a model `A` it
/// yields `A′` with, for every layer,
///
/// ```text
/// E′ = E Uᵀ
/// Q′ = U Q W_Q          W_Q = μ  (P₁ ⊗ P₂ ⊗ S)
/// K′ = U K W_K          W_K = μ⁻¹(P₁ ⊗ S)
/// V′ = U V W_V          W_V = P₁ ⊗ H_v
/// O′ = W_O⁻¹ O Uᵀ / λ   W_O = P₁ ⊗ P₂ ⊗ H_v
/// Gate′ = U Gate P_l,   Up′ = U Up P_l,   Down′ = P_lᵀ Down Uᵀ
/// ```
///
/// followed by optional channel pruning and additive Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationPlan {
    pub outer_u: Matrix,
    pub outer_kind: OuterKind,
    /// Permutation over key/value heads.
    pub head_perm: Vec<usize>,
    /// Permutation over the query heads sharing one key/value head.
    pub query_perm: Vec<usize>,
    pub sign_s: Vec<i8>,
    pub mu: f64,
    pub lambda: f64,
    pub value_mix: Matrix,
    pub value_mix_kind: ValueMixKind,
    pub mlp_perms: Vec<Vec<usize>>,
    /// Noise RMS relative to each transformed matrix's RMS.
    pub noise_rms: f64,
    /// Embedding channels kept, strictly increasing.
    pub prune_map: Option<Vec<usize>>,
    pub seed: u64,
}

fn identity_perm(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn is_identity_perm(p: &[usize]) -> bool {
    p.iter().enumerate().all(|(i, &j)| i == j)
}

impl ObfuscationPlan {
    pub fn identity(arch: &ArchSpec, seed: u64) -> Self {
        ObfuscationPlan {
            outer_u: Matrix::identity(arch.emb_dim),
            outer_kind: OuterKind::Identity,
            head_perm: identity_perm(arch.kv_heads),
            query_perm: identity_perm(arch.queries_per_head()),
            sign_s: vec![1; arch.head_dim],
            mu: 1.0,
            lambda: 1.0,
            value_mix: Matrix::identity(arch.head_dim),
            value_mix_kind: ValueMixKind::Orthogonal,
            mlp_perms: vec![identity_perm(arch.intermediate_dim); arch.num_layers],
            noise_rms: 0.0,
            prune_map: None,
            seed,
        }
    }

    /// Checks the plan against an architecture.
    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        let mismatch = |what: &str, want: usize, got: usize| {
            Error::DimMismatch(format!("{what}: architecture needs {want}, plan has {got}"))
        };
        let e = arch.emb_dim;
        if self.outer_u.shape() != (e, e) {
            return Err(mismatch("outer transform order", e, self.outer_u.rows()));
        }
        let residual = self.outer_u.orthonormality_residual();
        if residual > 1e-10 {
            return Err(Error::NotOrthogonal(residual));
        }
        if self.head_perm.len() != arch.kv_heads || !is_bijection(&self.head_perm) {
            return Err(mismatch("head permutation", arch.kv_heads, self.head_perm.len()));
        }
        let qph = arch.queries_per_head();
        if self.query_perm.len() != qph || !is_bijection(&self.query_perm) {
            return Err(mismatch("query permutation", qph, self.query_perm.len()));
        }
        if self.sign_s.len() != arch.head_dim || self.sign_s.iter().any(|&s| s != 1 && s != -1) {
            return Err(mismatch("sign vector", arch.head_dim, self.sign_s.len()));
        }
        if self.value_mix.shape() != (arch.head_dim, arch.head_dim) {
            return Err(mismatch("value transform order", arch.head_dim, self.value_mix.rows()));
        }
        if !(self.mu.is_finite() && self.mu != 0.0 && self.lambda.is_finite() && self.lambda != 0.0) {
            return Err(Error::InvalidArgument("mu and lambda must be finite and nonzero".into()));
        }
        if self.mlp_perms.len() != arch.num_layers {
            return Err(mismatch("MLP permutation count", arch.num_layers, self.mlp_perms.len()));
        }
        for p in &self.mlp_perms {
            if p.len() != arch.intermediate_dim || !is_bijection(p) {
                return Err(mismatch("MLP permutation", arch.intermediate_dim, p.len()));
            }
        }
        if !(self.noise_rms.is_finite() && self.noise_rms >= 0.0) {
            return Err(Error::InvalidArgument("noise_rms must be non-negative".into()));
        }
        if let Some(map) = &self.prune_map {
            let increasing = map.windows(2).all(|w| w[0] < w[1]);
            if map.is_empty() || !increasing || map.last().is_some_and(|&m| m >= e) {
                return Err(Error::InvalidArgument(
                    "prune_map must be a non-empty strictly increasing list of channels".into(),
                ));
            }
        }
        Ok(())
    }

    /// Plan that undoes this one. Only available without noise and pruning,
    /// and with an orthogonal value transform.
    pub fn inverse(&self) -> Result<Self> {
        if self.noise_rms != 0.0 || self.prune_map.is_some() {
            return Err(Error::InvalidArgument("noisy or pruned plans are not invertible".into()));
        }
        if self.value_mix_kind != ValueMixKind::Orthogonal {
            return Err(Error::InvalidArgument(
                "only orthogonal value transforms are inverted".into(),
            ));
        }
        Ok(ObfuscationPlan {
            outer_u: self.outer_u.transpose(),
            outer_kind: self.outer_kind,
            head_perm: invert(&self.head_perm),
            query_perm: invert(&self.query_perm),
            sign_s: self.sign_s.clone(),
            mu: 1.0 / self.mu,
            lambda: 1.0 / self.lambda,
            value_mix: self.value_mix.transpose(),
            value_mix_kind: self.value_mix_kind,
            mlp_perms: self.mlp_perms.iter().map(|p| invert(p)).collect(),
            noise_rms: 0.0,
            prune_map: None,
            seed: self.seed,
        })
    }

    /// Replaces the value transform with a random well-conditioned
    /// non-orthogonal matrix.
    pub fn with_general_value_mix(mut self) -> Self {
        let n = self.value_mix.rows();
        let mut rng = derive_rng(self.seed, PLAN_STREAM + 1);
        self.value_mix = Matrix::from_fn(n, n, |i, j| {
            let g: f64 = rng.sample(StandardNormal);
            if i == j { 1.0 + 0.3 * g.abs() } else { 0.3 * g / (n as f64).sqrt() }
        });
        self.value_mix_kind = ValueMixKind::GeneralInvertible;
        self
    }

    /// `W_Q`, the inner query transform.
    pub fn query_transform(&self) -> Matrix {
        Matrix::permutation(&self.head_perm)
            .kron(&Matrix::permutation(&self.query_perm))
            .kron(&self.sign_matrix())
            .scale(self.mu)
    }

    pub fn key_transform(&self) -> Matrix {
        Matrix::permutation(&self.head_perm).kron(&self.sign_matrix()).scale(1.0 / self.mu)
    }

    pub fn value_transform(&self) -> Matrix {
        Matrix::permutation(&self.head_perm).kron(&self.value_mix)
    }

    /// `W_O`, acting on the concatenated attention output.
    pub fn output_transform(&self) -> Matrix {
        Matrix::permutation(&self.head_perm)
            .kron(&Matrix::permutation(&self.query_perm))
            .kron(&self.value_mix)
    }

    fn output_transform_inverse(&self) -> Result<Matrix> {
        let hv_inv = match self.value_mix_kind {
            ValueMixKind::Orthogonal => self.value_mix.transpose(),
            ValueMixKind::GeneralInvertible => invert_small(&self.value_mix)?,
        };
        Ok(Matrix::permutation(&invert(&self.head_perm))
            .kron(&Matrix::permutation(&invert(&self.query_perm)))
            .kron(&hv_inv))
    }

    fn sign_matrix(&self) -> Matrix {
        Matrix::diag(&self.sign_s.iter().map(|&s| s as f64).collect::<Vec<_>>())
    }

    fn inner_is_identity(&self) -> bool {
        is_identity_perm(&self.head_perm)
            && is_identity_perm(&self.query_perm)
            && self.sign_s.iter().all(|&s| s == 1)
            && self.mu == 1.0
            && self.lambda == 1.0
            && self.value_mix == Matrix::identity(self.value_mix.rows())
    }
}

fn invert_small(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let inv = nalgebra::DMatrix::from_row_slice(n, n, m.data())
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("value transform is singular".into()))?;
    Ok(Matrix::from_fn(n, n, |i, j| inv[(i, j)]))
}

fn mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Applies `plan` to `model`: outer transform, inner attention transforms,
/// MLP permutations, pruning, then noise.
pub fn apply_plan(model: &ModelBundle, plan: &ObfuscationPlan) -> Result<ModelBundle> {
    let arch = &model.arch;
    plan.validate(arch)?;

    let outer_identity = plan.outer_u == Matrix::identity(arch.emb_dim);
    let u = &plan.outer_u;
    let ut = u.transpose();
    let left = |x: &Matrix| if outer_identity { Ok(x.clone()) } else { mul(u, x) };
    let right = |x: &Matrix| if outer_identity { Ok(x.clone()) } else { mul(x, &ut) };

    let inner = !plan.inner_is_identity();
    let (wq, wk, wv, wo_inv) = if inner {
        (
            plan.query_transform(),
            plan.key_transform(),
            plan.value_transform(),
            plan.output_transform_inverse()?.scale(1.0 / plan.lambda),
        )
    } else {
        let id = Matrix::identity(1);
        (id.clone(), id.clone(), id.clone(), id)
    };
    let inner_right = |x: Matrix, w: &Matrix| if inner { mul(&x, w) } else { Ok(x) };

    let mut embedding = right(&model.embedding)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, lw) in model.layers.iter().enumerate() {
        let perm = &plan.mlp_perms[l];
        let (gate, up, down) = if is_identity_perm(perm) {
            (left(&lw.gate)?, left(&lw.up)?, right(&lw.down)?)
        } else {
            let p = Matrix::permutation(perm);
            (
                mul(&left(&lw.gate)?, &p)?,
                mul(&left(&lw.up)?, &p)?,
                p.transpose().matmul(&right(&lw.down)?)?,
            )
        };
        let o = right(&lw.o)?;
        layers.push(LayerWeights {
            q: inner_right(left(&lw.q)?, &wq)?,
            k: inner_right(left(&lw.k)?, &wk)?,
            v: inner_right(left(&lw.v)?, &wv)?,
            o: if inner { mul(&wo_inv, &o)? } else { o },
            gate,
            up,
            down,
        });
    }

    let mut out_arch = arch.clone();
    if let Some(map) = &plan.prune_map {
        embedding = embedding.select_cols(map)?;
        for lw in &mut layers {
            lw.q = lw.q.select_rows(map)?;
            lw.k = lw.k.select_rows(map)?;
            lw.v = lw.v.select_rows(map)?;
            lw.o = lw.o.select_cols(map)?;
            lw.gate = lw.gate.select_rows(map)?;
            lw.up = lw.up.select_rows(map)?;
            lw.down = lw.down.select_cols(map)?;
        }
        out_arch.emb_dim = map.len();
    }

    if plan.noise_rms > 0.0 {
        add_noise(&mut embedding, plan.noise_rms, plan.seed, 0);
        for (l, lw) in layers.iter_mut().enumerate() {
            for (r, role) in Role::LAYER_ROLES.into_iter().enumerate() {
                let idx = 1 + (l * Role::LAYER_ROLES.len() + r) as u64;
                add_noise(lw.get_mut(role).unwrap(), plan.noise_rms, plan.seed, idx);
            }
        }
    }

    Ok(ModelBundle {
        arch: out_arch,
        embedding,
        layers,
        source_path: format!("{} (transformed, seed={})", model.source_path, plan.seed),
    })
}

fn add_noise(m: &mut Matrix, relative: f64, seed: u64, index: u64) {
    let std = relative * m.rms();
    if std == 0.0 {
        return;
    }
    let mut rng = derive_rng(seed ^ NOISE_STREAM, index);
    let normal = Normal::new(0.0, std).expect("positive std");
    let (r, c) = m.shape();
    for i in 0..r {
        for j in 0..c {
            m[(i, j)] += normal.sample(&mut rng);
        }
    }
}

/// Rungs of the obfuscation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// Untouched copy.
    L1,
    /// Signed-permutation outer basis, permuted heads and MLP channels.
    L2,
    /// General orthogonal outer basis and permuted MLP channels.
    L3,
    /// As `L2` plus 1% noise.
    L4,
    /// General orthogonal outer basis, full inner attention transforms,
    /// permuted MLP channels and 1% noise.
    L5,
    /// Keeps `target` embedding channels and adds 0.5% noise.
    Pruning { target: usize },
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Level::L1),
            "l2" => Ok(Level::L2),
            "l3" => Ok(Level::L3),
            "l4" => Ok(Level::L4),
            "l5" => Ok(Level::L5),
            other => {
                let target = other
                    .strip_prefix("pruning")
                    .map(|t| t.trim_start_matches([':', '=']))
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown level {s}")))?;
                let target = target
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("pruning level needs a target width: {s}")))?;
                Ok(Level::Pruning { target })
            }
        }
    }
}

pub const LEVEL_NOISE: f64 = 0.01;
pub const PRUNING_NOISE: f64 = 0.005;

fn random_perm<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p = identity_perm(n);
    p.shuffle(rng);
    p
}

fn random_signs<R: Rng>(n: usize, rng: &mut R) -> Vec<i8> {
    (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
}

/// Magnitude in `[0.5, 2]` with a random sign.
fn random_scale<R: Rng>(rng: &mut R) -> f64 {
    let m = 2f64.powf(rng.random_range(-1.0..=1.0));
    if rng.random::<bool>() { m } else { -m }
}

/// Deterministic plan for `(arch, level, seed)`.
pub fn sample_plan(arch: &ArchSpec, level: Level, seed: u64) -> Result<ObfuscationPlan> {
    arch.validate()?;
    let mut plan = ObfuscationPlan::identity(arch, seed);
    let mut rng = derive_rng(seed, PLAN_STREAM);
    let e = arch.emb_dim;

    let signed_permutation = |rng: &mut rand_chacha::ChaCha8Rng| {
        let perm = random_perm(e, rng);
        let signs = random_signs(e, rng);
        let mut u = Matrix::zeros(e, e);
        for (i, &j) in perm.iter().enumerate() {
            u[(i, j)] = signs[i] as f64;
        }
        u
    };
    let mlp_perms = |rng: &mut rand_chacha::ChaCha8Rng| {
        (0..arch.num_layers)
            .map(|_| random_perm(arch.intermediate_dim, rng))
            .collect::<Vec<_>>()
    };

    match level {
        Level::L1 => {}
        Level::L2 | Level::L4 => {
            plan.outer_u = signed_permutation(&mut rng);
            plan.outer_kind = OuterKind::SignedPermutation;
            plan.head_perm = random_perm(arch.kv_heads, &mut rng);
            plan.query_perm = random_perm(arch.queries_per_head(), &mut rng);
            plan.mlp_perms = mlp_perms(&mut rng);
            if level == Level::L4 {
                plan.noise_rms = LEVEL_NOISE;
            }
        }
        Level::L3 => {
            plan.outer_u = sample_haar_with(e, &mut rng, false);
            plan.outer_kind = OuterKind::GeneralOrthogonal;
            plan.mlp_perms = mlp_perms(&mut rng);
        }
        Level::L5 => {
            plan.outer_u = sample_haar_with(e, &mut rng, false);
            plan.outer_kind = OuterKind::GeneralOrthogonal;
            plan.head_perm = random_perm(arch.kv_heads, &mut rng);
            plan.query_perm = random_perm(arch.queries_per_head(), &mut rng);
            plan.sign_s = random_signs(arch.head_dim, &mut rng);
            plan.mu = random_scale(&mut rng);
            plan.lambda = random_scale(&mut rng);
            plan.value_mix = sample_haar_with(arch.head_dim, &mut rng, false);
            plan.mlp_perms = mlp_perms(&mut rng);
            plan.noise_rms = LEVEL_NOISE;
        }
        Level::Pruning { target } => {
            if target == 0 || target > e {
                return Err(Error::InvalidArgument(format!(
                    "pruning target {target} must lie in 1..={e}"
                )));
            }
            let mut kept = rand::seq::index::sample(&mut rng, e, target).into_vec();
            kept.sort_unstable();
            plan.prune_map = Some(kept);
            plan.noise_rms = PRUNING_NOISE;
        }
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matlin::spectral_summary;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            num_layers: 2,
            emb_dim: 16,
            num_heads: 4,
            kv_heads: 2,
            head_dim: 4,
            intermediate_dim: 24,
            vocab_size: 64,
            name_template: Default::default(),
        }
    }

    fn max_diff(a: &ModelBundle, b: &ModelBundle) -> f64 {
        let mut d = a.embedding.sub(&b.embedding).unwrap().max_abs();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for role in Role::LAYER_ROLES {
                d = d.max(la.get(role).unwrap().sub(lb.get(role).unwrap()).unwrap().max_abs());
            }
        }
        d
    }

    #[test]
    fn toy_models_are_deterministic() {
        let a = make_toy_model(&small_arch(), 5);
        assert_eq!(a, make_toy_model(&small_arch(), 5));
        assert_ne!(a.embedding, make_toy_model(&small_arch(), 6).embedding);
        a.validate().unwrap();
    }

    #[test]
    fn toy_std() {
        let mut arch = small_arch();
        arch.vocab_size = 4096;
        let m = make_toy_model(&arch, 1);
        assert!((m.embedding.rms() - TOY_INIT_STD).abs() < 5e-4);
    }

    #[test]
    fn identity_plan_is_exact() {
        let a = make_toy_model(&small_arch(), 1);
        let plan = sample_plan(&small_arch(), Level::L1, 9).unwrap();
        let b = apply_plan(&a, &plan).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.layers, b.layers);
    }

    #[test]
    fn inverse_plan_restores_model() {
        let arch = small_arch();
        let a = make_toy_model(&arch, 1);
        for level in [Level::L2, Level::L3] {
            let plan = sample_plan(&arch, level, 4).unwrap();
            let b = apply_plan(&a, &plan).unwrap();
            let back = apply_plan(&b, &plan.inverse().unwrap()).unwrap();
            assert!(max_diff(&a, &back) < 1e-8, "{level:?}");
        }
        let mut l5 = sample_plan(&arch, Level::L5, 4).unwrap();
        l5.noise_rms = 0.0;
        let back = apply_plan(&apply_plan(&a, &l5).unwrap(), &l5.inverse().unwrap()).unwrap();
        assert!(max_diff(&a, &back) < 1e-8);
    }

    #[test]
    fn attention_logits_and_mlp_outputs_are_preserved() {
        let arch = small_arch();
        let a = make_toy_model(&arch, 2);
        let mut plan = sample_plan(&arch, Level::L5, 8).unwrap();
        plan.noise_rms = 0.0;
        let b = apply_plan(&a, &plan).unwrap();
        let (la, lb) = (&a.layers[0], &b.layers[0]);
        let hd = arch.head_dim;
        let qph = arch.queries_per_head();
        let logits = |lw: &LayerWeights, e: &Matrix| {
            let q = e.matmul(&lw.q).unwrap();
            let k = e.matmul(&lw.k).unwrap();
            let mut total = 0.0;
            for h in 0..arch.num_heads {
                let g = h / qph;
                for d in 0..hd {
                    total += q[(0, h * hd + d)] * k[(1, g * hd + d)];
                }
            }
            total
        };
        let ea = a.embedding.top_left(2, arch.emb_dim);
        let eb = b.embedding.top_left(2, arch.emb_dim);
        assert!((logits(la, &ea) - logits(lb, &eb)).abs() < 1e-12);

        let h = ea.matmul(&la.up).unwrap().matmul(&la.down).unwrap();
        let h2 = eb.matmul(&lb.up).unwrap().matmul(&lb.down).unwrap();
        let back = h2.matmul(&plan.outer_u).unwrap();
        assert!(back.sub(&h).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn orthogonal_invariant_norms_preserved() {
        let arch = small_arch();
        let a = make_toy_model(&arch, 3);
        let plan = sample_plan(&arch, Level::L3, 1).unwrap();
        let b = apply_plan(&a, &plan).unwrap();
        for role in Role::LAYER_ROLES {
            let x = spectral_summary(a.layers[1].get(role).unwrap(), 2, 3.0).unwrap();
            let y = spectral_summary(b.layers[1].get(role).unwrap(), 2, 3.0).unwrap();
            assert!((x.frobenius - y.frobenius).abs() < 1e-8);
            assert!((x.spectral - y.spectral).abs() < 1e-8);
            assert!((x.kyfan_k - y.kyfan_k).abs() < 1e-8);
            assert!((x.schatten_p - y.schatten_p).abs() < 1e-8);
        }
    }

    #[test]
    fn noise_level_matches_request() {
        let mut arch = small_arch();
        arch.emb_dim = 64;
        arch.head_dim = 16;
        arch.intermediate_dim = 96;
        arch.vocab_size = 256;
        let a = make_toy_model(&arch, 1);
        let mut plan = ObfuscationPlan::identity(&arch, 3);
        plan.noise_rms = 0.01;
        let b = apply_plan(&a, &plan).unwrap();
        let ratio = |x: &Matrix, y: &Matrix| y.sub(x).unwrap().frobenius_norm() / x.frobenius_norm();
        assert!((ratio(&a.embedding, &b.embedding) - 0.01).abs() < 1e-3);
        assert!((ratio(&a.layers[0].up, &b.layers[0].up) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn plans_are_deterministic_and_serializable() {
        let arch = small_arch();
        let p = sample_plan(&arch, Level::L5, 11).unwrap();
        assert_eq!(p, sample_plan(&arch, Level::L5, 11).unwrap());
        let text = serde_json::to_string(&p).unwrap();
        let back: ObfuscationPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back.mlp_perms, p.mlp_perms);
        assert!(back.outer_u.sub(&p.outer_u).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn level_two_contract() {
        let arch = small_arch();
        let p = sample_plan(&arch, Level::L2, 1).unwrap();
        assert_eq!(p.outer_kind, OuterKind::SignedPermutation);
        assert_eq!(p.noise_rms, 0.0);
        for i in 0..arch.emb_dim {
            let nz: Vec<f64> = p.outer_u.row(i).iter().copied().filter(|&x| x != 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(nz[0].abs(), 1.0);
        }
    }

    #[test]
    fn pruning_contract() {
        let arch = small_arch();
        let p = sample_plan(&arch, Level::Pruning { target: 8 }, 2).unwrap();
        let map = p.prune_map.clone().unwrap();
        assert_eq!(map.len(), 8);
        assert!(map.windows(2).all(|w| w[0] < w[1]));
        let b = apply_plan(&make_toy_model(&arch, 1), &p).unwrap();
        assert_eq!(b.arch.emb_dim, 8);
        b.validate().unwrap();
        assert!(sample_plan(&arch, Level::Pruning { target: 17 }, 2).is_err());
    }

    #[test]
    fn general_value_mix_preserves_value_output_path() {
        let arch = small_arch();
        let mut p = ObfuscationPlan::identity(&arch, 3).with_general_value_mix();
        p.lambda = 2.0;
        let a = make_toy_model(&arch, 1);
        let b = apply_plan(&a, &p).unwrap();
        let hd = arch.head_dim;
        let (la, lb) = (&a.layers[0], &b.layers[0]);
        for h in 0..arch.num_heads {
            let g = h / arch.queries_per_head();
            let kv: Vec<usize> = (g * hd..(g + 1) * hd).collect();
            let q: Vec<usize> = (h * hd..(h + 1) * hd).collect();
            let path = |lw: &LayerWeights| {
                lw.v.select_cols(&kv).unwrap().matmul(&lw.o.select_rows(&q).unwrap()).unwrap()
            };
            let want = path(la).scale(0.5);
            assert!(path(lb).sub(&want).unwrap().max_abs() < 1e-12);
        }
        assert!(p.inverse().is_err());
    }

    #[test]
    fn level_parsing() {
        assert_eq!("L5".parse::<Level>().unwrap(), Level::L5);
        assert_eq!("pruning:32".parse::<Level>().unwrap(), Level::Pruning { target: 32 });
        assert!("L9".parse::<Level>().is_err());
    }
}
