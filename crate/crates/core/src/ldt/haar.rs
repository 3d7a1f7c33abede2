use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::matlin::DenseMatrix;
use crate::scalar::Scalar;

/// Independent generator for sample `index` of a run seeded with `seed`.
/// Results depend only on `(seed, index)`, never on scheduling.
pub fn derive_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Haar-distributed orthogonal matrix: QR of an i.i.d. standard normal
/// matrix with the signs of `diag(R)` absorbed into `Q`. With `special`, one
/// column is negated when needed so the result lies in SO(n).
pub fn sample_haar_with<R: Rng + ?Sized>(n: usize, rng: &mut R, special: bool) -> DenseMatrix<f64> {
    assert!(n >= 1, "Haar sampling needs n >= 1");
    let g: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let (mut q, r_diag) = f64::qr_square(n, &g);
    for (j, &r) in r_diag.iter().enumerate() {
        if r < 0.0 {
            for i in 0..n {
                q[i * n + j] = -q[i * n + j];
            }
        }
    }
    if special && DMatrix::from_row_slice(n, n, &q).determinant() < 0.0 {
        for i in 0..n {
            q[i * n] = -q[i * n];
        }
    }
    DenseMatrix::from_vec(n, n, q).expect("square buffer")
}

pub fn sample_haar_orthogonal(n: usize, seed: u64, special: bool) -> DenseMatrix<f64> {
    sample_haar_with(n, &mut derive_rng(seed, 0), special)
}

/// Traces of `samples` independent Haar matrices, in sample order.
pub fn haar_traces(n: usize, samples: usize, seed: u64, special: bool) -> Vec<f64> {
    (0..samples)
        .into_par_iter()
        .map(|i| sample_haar_with(n, &mut derive_rng(seed, i as u64), special).trace())
        .collect()
}
