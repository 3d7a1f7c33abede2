use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::svd::{rank_tolerance, svd};
use super::DenseMatrix;

pub const DEFAULT_NS_MAX_ITER: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarMethod {
    /// `W = U Vᵀ` from the thin SVD.
    Svd,
    /// Scaled cubic Newton–Schulz iteration: each step applies the odd
    /// polynomial `p(x) = αx(3 − α²x²)/2` with `α` chosen so the singular
    /// values in `[ℓ, 1]` land in `[ℓ', 1]`, `ℓ' > ℓ`.
    NewtonSchulz {
        max_iter: usize,
        /// Assumed lower bound of `σ_min / ‖A‖_F`; only affects speed.
        lower_bound: f64,
        tol: f64,
    },
}

impl PolarMethod {
    pub fn newton_schulz() -> Self {
        PolarMethod::NewtonSchulz {
            max_iter: DEFAULT_NS_MAX_ITER,
            lower_bound: 1e-3,
            tol: 1e-12,
        }
    }
}

/// How directions with (numerically) zero singular value are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    /// Keep the SVD's orthonormal completion, so `W` always has
    /// orthonormal columns (or rows) on its thin side.
    #[default]
    Orthonormal,
    /// Drop the degenerate directions: `W = Σ_{σᵢ>tol} uᵢ vᵢᵀ`, the
    /// `sign(0) = 0` spectral-calculus convention.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthoOptions {
    pub method: PolarMethod,
    pub completion: Completion,
}

impl Default for OrthoOptions {
    fn default() -> Self {
        Self {
            method: PolarMethod::Svd,
            completion: Completion::Orthonormal,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolarResult<T> {
    /// Orthogonal part `Ortho(A)`, same shape as `A`.
    pub w: DenseMatrix<T>,
    /// Descending singular values of `A`.
    pub singular_values: Vec<T>,
    pub effective_rank: usize,
    /// Orthonormality defect of `w` on its thin side.
    pub ortho_residual: T,
    /// Newton–Schulz steps taken (zero for the SVD route).
    pub iterations: usize,
}

impl<T: Scalar> PolarResult<T> {
    pub fn is_full_rank(&self) -> bool {
        self.effective_rank == self.singular_values.len()
    }
}

/// Orthogonal part of `A` via the SVD, with orthonormal completion.
pub fn ortho<T: Scalar>(a: &DenseMatrix<T>) -> Result<PolarResult<T>> {
    ortho_with(a, OrthoOptions::default())
}

pub fn ortho_with<T: Scalar>(a: &DenseMatrix<T>, opts: OrthoOptions) -> Result<PolarResult<T>> {
    match opts.method {
        PolarMethod::Svd => ortho_svd(a, opts.completion),
        PolarMethod::NewtonSchulz {
            max_iter,
            lower_bound,
            tol,
        } => ortho_newton_schulz(a, max_iter, lower_bound, tol),
    }
}

fn effective_rank<T: Scalar>(s: &[T], rows: usize, cols: usize) -> usize {
    let Some(&top) = s.first() else { return 0 };
    if top <= T::zero() {
        return 0;
    }
    let tol = rank_tolerance(top, rows, cols);
    s.iter().filter(|&&x| x > tol).count()
}

fn ortho_svd<T: Scalar>(a: &DenseMatrix<T>, completion: Completion) -> Result<PolarResult<T>> {
    let f = svd(a)?;
    let (m, n) = a.shape();
    let rank = effective_rank(&f.s, m, n);
    let keep = match completion {
        Completion::Orthonormal => f.s.len(),
        Completion::Zero => rank,
    };
    let u = DenseMatrix::from_fn(m, keep, |i, j| f.u[(i, j)]);
    let v = DenseMatrix::from_fn(n, keep, |i, j| f.v[(i, j)]);
    let w = u.mul_unchecked(&v.transpose());
    let ortho_residual = w.orthonormality_residual();
    Ok(PolarResult {
        w,
        singular_values: f.s,
        effective_rank: rank,
        ortho_residual,
        iterations: 0,
    })
}

fn ortho_newton_schulz<T: Scalar>(
    a: &DenseMatrix<T>,
    max_iter: usize,
    lower_bound: f64,
    tol: f64,
) -> Result<PolarResult<T>> {
    if !a.is_finite() {
        return Err(Error::NonFiniteValue("polar input".into()));
    }
    let wide = a.rows() < a.cols();
    let tall = if wide { a.transpose() } else { a.clone() };
    let k = tall.cols();
    let norm = tall.frobenius_norm();
    if norm == T::zero() {
        return Err(Error::ConvergenceFailure("newton-schulz polar (zero input)"));
    }
    let three = T::from_f64_lossy(3.0);
    let half = T::from_f64_lossy(0.5);
    let tol = T::from_f64_lossy(tol);
    let mut x = tall.scale(T::one() / norm);
    let mut lo = T::from_f64_lossy(lower_bound.clamp(1e-12, 1.0));
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let gram = x.transpose().mul_unchecked(&x);
        let defect = gram.sub(&DenseMatrix::identity(k)).unwrap().frobenius_norm();
        if defect <= tol {
            converged = true;
            break;
        }
        let alpha = (three / (T::one() + lo + lo * lo)).sqrt();
        let a2 = alpha * alpha;
        // X ← X · (3αI − α³ XᵀX) / 2
        let mut poly = gram.scale(-a2 * alpha * half);
        for i in 0..k {
            poly[(i, i)] += three * alpha * half;
        }
        x = x.mul_unchecked(&poly);
        lo = (half * alpha * lo * (three - a2 * lo * lo)).min(T::one());
        iterations += 1;
    }
    if !converged {
        return Err(Error::ConvergenceFailure("newton-schulz polar"));
    }
    let w = if wide { x.transpose() } else { x };
    // H = Wᵀ A is the symmetric factor; its spectrum is that of A.
    let h = if wide {
        a.mul_unchecked(&w.transpose())
    } else {
        w.transpose().mul_unchecked(a)
    };
    let s = svd(&h)?.s;
    let rank = effective_rank(&s, a.rows(), a.cols());
    let ortho_residual = w.orthonormality_residual();
    Ok(PolarResult {
        w,
        singular_values: s,
        effective_rank: rank,
        ortho_residual,
        iterations,
    })
}
