use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::DenseMatrix;

/// Rows per accumulation block.
pub const COVARIANCE_BLOCK: usize = 256;

/// `M = Ebᵀ · Ea` over paired rows, so that `Ortho(M)` estimates `U` in
/// `Eb ≈ Ea · Uᵀ`. Shape is `cols(Eb) x cols(Ea)`.
pub fn cross_covariance<T: Scalar>(ea: &DenseMatrix<T>, eb: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    cross_covariance_blocked(ea, eb, COVARIANCE_BLOCK)
}

/// Blocked variant: partial products of `block` rows are summed in a fixed
/// order, so results are reproducible for a given block size.
pub fn cross_covariance_blocked<T: Scalar>(
    ea: &DenseMatrix<T>,
    eb: &DenseMatrix<T>,
    block: usize,
) -> Result<DenseMatrix<T>> {
    if ea.rows() != eb.rows() {
        return Err(Error::RowCountMismatch(eb.rows(), ea.rows()));
    }
    let block = block.max(1);
    let (na, nb) = (ea.cols(), eb.cols());
    let mut acc = DenseMatrix::zeros(nb, na);
    let mut start = 0;
    while start < ea.rows() {
        let end = (start + block).min(ea.rows());
        let ids: Vec<usize> = (start..end).collect();
        let a_blk = ea.select_rows(&ids)?;
        let b_blk = eb.select_rows(&ids)?;
        let part = b_blk.transpose().mul_unchecked(&a_blk);
        acc = acc.add(&part)?;
        start = end;
    }
    Ok(acc)
}
