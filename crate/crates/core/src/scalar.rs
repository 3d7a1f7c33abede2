//! Floating-point element types accepted by the dense linear-algebra core.
//!
//! Generic code only sees [`num_traits::Float`]; the heavy kernels (matrix
//! product, SVD, QR) are forwarded to nalgebra through concrete `f32`/`f64`
//! implementations so that no generic signature has to carry nalgebra's own
//! scalar hierarchy.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use nalgebra::{DMatrix, DMatrixView};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Thin SVD factors in row-major layout: `u` is `m x k`, `v` is `n x k`,
/// `k = min(m, n)`. Singular values are not yet sorted.
pub struct RawSvd<T> {
    pub u: Vec<T>,
    pub s: Vec<T>,
    pub v: Vec<T>,
}

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// `a (m x k) * b (k x n)`, all row-major.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self]) -> Vec<Self>;

    fn svd_thin(m: usize, n: usize, a: &[Self], max_iter: usize) -> Option<RawSvd<Self>>;

    /// Square QR: returns row-major `Q` and the diagonal of `R`.
    fn qr_square(n: usize, a: &[Self]) -> (Vec<Self>, Vec<Self>);

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }
}

// A row-major `r x c` buffer is the column-major `c x r` transpose, which lets
// nalgebra consume and produce our layout without copies.
macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[$t], b: &[$t]) -> Vec<$t> {
                let at = DMatrixView::from_slice(a, k, m);
                let bt = DMatrixView::from_slice(b, n, k);
                let ct: DMatrix<$t> = bt * at;
                ct.data.into()
            }

            fn svd_thin(m: usize, n: usize, a: &[$t], max_iter: usize) -> Option<RawSvd<$t>> {
                let mat = DMatrix::from_row_slice(m, n, a);
                let svd = nalgebra::linalg::SVD::try_new(mat, true, true, <$t>::EPSILON, max_iter)?;
                let u = svd.u?;
                let v_t = svd.v_t?;
                let k = m.min(n);
                // u is column-major m x k -> row-major via transpose copy.
                let u_rm: Vec<$t> = u.transpose().data.into();
                // v_t is column-major k x n; its buffer is row-major n x k, i.e. V.
                let v_rm: Vec<$t> = v_t.data.into();
                debug_assert_eq!(u_rm.len(), m * k);
                debug_assert_eq!(v_rm.len(), n * k);
                Some(RawSvd {
                    u: u_rm,
                    s: svd.singular_values.iter().copied().collect(),
                    v: v_rm,
                })
            }

            fn qr_square(n: usize, a: &[$t]) -> (Vec<$t>, Vec<$t>) {
                let mat = DMatrix::from_row_slice(n, n, a);
                let qr = mat.qr();
                let r_diag: Vec<$t> = qr.r().diagonal().iter().copied().collect();
                let q: Vec<$t> = qr.q().transpose().data.into();
                (q, r_diag)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
