use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::svd::svd;
use super::DenseMatrix;

/// Norms that depend only on the singular values, hence are unchanged by
/// left/right orthogonal multiplication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary<T> {
    pub frobenius: T,
    pub spectral: T,
    pub kyfan_k: T,
    pub k: usize,
    pub schatten_p: T,
    pub p: T,
}

pub fn spectral_summary<T: Scalar>(a: &DenseMatrix<T>, k: usize, p: T) -> Result<SpectralSummary<T>> {
    let kmax = a.rows().min(a.cols());
    if k == 0 || k > kmax {
        return Err(Error::InvalidArgument(format!("Ky Fan k={k} outside 1..={kmax}")));
    }
    if p.is_nan() || p < T::one() {
        return Err(Error::InvalidArgument(format!("Schatten p={p} below 1")));
    }
    let s = svd(a)?.s;
    let frobenius = s.iter().map(|&x| x * x).sum::<T>().sqrt();
    let spectral = s.first().copied().unwrap_or_else(T::zero);
    let kyfan_k = s.iter().take(k).copied().sum();
    // Scale by σ₁ before powering so large p does not overflow.
    let schatten_p = if spectral == T::zero() {
        T::zero()
    } else {
        spectral * s.iter().map(|&x| (x / spectral).powf(p)).sum::<T>().powf(T::one() / p)
    };
    Ok(SpectralSummary {
        frobenius,
        spectral,
        kyfan_k,
        k,
        schatten_p,
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let s = spectral_summary(&DenseMatrix::<f64>::diag(&[3.0, 4.0]), 1, 2.0).unwrap();
        assert!((s.frobenius - 5.0).abs() < 1e-14);
        assert!((s.spectral - 4.0).abs() < 1e-14);
        assert!((s.kyfan_k - 4.0).abs() < 1e-14);
        assert!((s.schatten_p - 5.0).abs() < 1e-14);
    }

    #[test]
    fn zero_matrix_all_zero() {
        let s = spectral_summary(&DenseMatrix::<f64>::zeros(3, 2), 2, 3.0).unwrap();
        assert_eq!((s.frobenius, s.spectral, s.kyfan_k, s.schatten_p), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn argument_ranges() {
        let a = DenseMatrix::<f64>::identity(2);
        assert!(spectral_summary(&a, 0, 2.0).is_err());
        assert!(spectral_summary(&a, 3, 2.0).is_err());
        assert!(spectral_summary(&a, 1, 0.5).is_err());
    }
}
