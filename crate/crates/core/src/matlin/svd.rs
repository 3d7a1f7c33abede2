use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DenseMatrix;

/// Iteration cap handed to the bidiagonal QR sweep.
pub const SVD_MAX_ITER: usize = 10_000;

/// Thin SVD `A = U diag(s) Vᵀ` with `U: m x k`, `V: n x k`, `k = min(m, n)`.
///
/// Singular values are sorted descending and each left singular vector has
/// its largest-magnitude entry positive (first such entry on ties); the
/// matching right vector is flipped with it.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    pub u: DenseMatrix<T>,
    pub s: Vec<T>,
    pub v: DenseMatrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let us = DenseMatrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u[(i, j)] * self.s[j]);
        us.mul_unchecked(&self.v.transpose())
    }
}

/// `σ < ε · σ₁ · max(m, n)` counts as zero.
pub fn rank_tolerance<T: Scalar>(sigma_max: T, rows: usize, cols: usize) -> T {
    T::epsilon() * sigma_max * T::from_usize(rows.max(cols)).unwrap()
}

pub fn svd<T: Scalar>(a: &DenseMatrix<T>) -> Result<Svd<T>> {
    if !a.is_finite() {
        return Err(Error::NonFiniteValue("svd input".into()));
    }
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok(Svd {
            u: DenseMatrix::zeros(m, 0),
            s: Vec::new(),
            v: DenseMatrix::zeros(n, 0),
        });
    }
    let raw = T::svd_thin(m, n, a.data(), SVD_MAX_ITER).ok_or(Error::ConvergenceFailure("svd"))?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| raw.s[y].partial_cmp(&raw.s[x]).unwrap().then(x.cmp(&y)));

    let mut u = DenseMatrix::zeros(m, k);
    let mut v = DenseMatrix::zeros(n, k);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        // Largest-magnitude entry of the left vector made positive.
        let mut best = 0;
        let mut best_abs = T::neg_infinity();
        for i in 0..m {
            let x = raw.u[i * k + src].abs();
            if x > best_abs {
                best_abs = x;
                best = i;
            }
        }
        let flip = if raw.u[best * k + src] < T::zero() {
            -T::one()
        } else {
            T::one()
        };
        for i in 0..m {
            u[(i, dst)] = raw.u[i * k + src] * flip;
        }
        for i in 0..n {
            v[(i, dst)] = raw.v[i * k + src] * flip;
        }
        s.push(raw.s[src].max(T::zero()));
    }
    Ok(Svd { u, s, v })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_input_sorts_descending() {
        let a = DenseMatrix::<f64>::diag(&[3.0, 5.0]);
        let f = svd(&a).unwrap();
        assert!((f.s[0] - 5.0).abs() < 1e-14);
        assert!((f.s[1] - 3.0).abs() < 1e-14);
        assert!(f.reconstruct().sub(&a).unwrap().frobenius_norm() < 1e-13);
    }

    #[test]
    fn zero_matrix_has_zero_spectrum_and_orthonormal_factors() {
        let a = DenseMatrix::<f64>::zeros(2, 2);
        let f = svd(&a).unwrap();
        assert_eq!(f.s, vec![0.0, 0.0]);
        assert!(f.u.orthonormality_residual() < 1e-12);
        assert!(f.v.orthonormality_residual() < 1e-12);
    }

    #[test]
    fn sign_convention_makes_largest_left_entry_positive() {
        let a = DenseMatrix::<f64>::from_rows(&[vec![-4.0, 1.0], vec![0.5, -2.0], vec![1.0, 1.0]]).unwrap();
        let f = svd(&a).unwrap();
        for j in 0..2 {
            let col = f.u.column(j);
            let (imax, _) = col
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
            assert!(col[imax] > 0.0);
        }
        assert!(f.reconstruct().sub(&a).unwrap().frobenius_norm() < 1e-13);
    }

    #[test]
    fn wide_matrix_thin_shapes() {
        let a = DenseMatrix::from_fn(3, 7, |i, j| ((i * 13 + j * 5) % 11) as f64 - 5.0);
        let f = svd(&a).unwrap();
        assert_eq!(f.u.shape(), (3, 3));
        assert_eq!(f.v.shape(), (7, 3));
        assert!(f.reconstruct().sub(&a).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let a = DenseMatrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&a), Err(Error::NonFiniteValue(_))));
    }
}
