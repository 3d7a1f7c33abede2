use nalgebra::{DMatrix, Schur};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::DenseMatrix;

use super::haar::{derive_rng, sample_haar_with};

/// Pooled `cos θ` histogram of Haar SO(2m) eigenphases against the
/// arcsine law `dx / (π√(1−x²))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCheck {
    pub m: usize,
    pub samples: usize,
    pub edges: Vec<f64>,
    pub empirical_mass: Vec<f64>,
    pub arcsine_mass: Vec<f64>,
    /// `max_k |empirical_mass[k] − arcsine_mass[k]|`.
    pub sup_deviation: f64,
    pub value_count: usize,
}

/// Arcsine probability of `[a, b] ⊂ [−1, 1]`.
pub fn arcsine_bin_mass(a: f64, b: f64) -> f64 {
    (b.clamp(-1.0, 1.0).asin() - a.clamp(-1.0, 1.0).asin()) / std::f64::consts::PI
}

/// `cos θ` for every eigenphase pair `e^{±iθ}` of an orthogonal matrix,
/// read off the 2x2 rotation blocks of its real Schur form. Real
/// eigenvalues (1x1 blocks) contribute their value once.
pub fn eigenphase_cosines(q: &DenseMatrix<f64>) -> Result<Vec<f64>> {
    let n = q.rows();
    if !q.is_square() {
        return Err(Error::NonSquare(q.rows(), q.cols()));
    }
    let schur = Schur::try_new(DMatrix::from_row_slice(n, n, q.data()), 1e-14, 10_000)
        .ok_or(Error::ConvergenceFailure("real Schur form"))?;
    let (_, t) = schur.unpack();
    let mut out = Vec::with_capacity(n / 2 + 1);
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)].abs() > 1e-12 {
            out.push(((t[(i, i)] + t[(i + 1, i + 1)]) / 2.0).clamp(-1.0, 1.0));
            i += 2;
        } else {
            out.push(t[(i, i)].clamp(-1.0, 1.0));
            i += 1;
        }
    }
    Ok(out)
}

pub fn eigenphase_density_check(m: usize, samples: usize, seed: u64, bins: usize) -> Result<DensityCheck> {
    if m < 4 {
        return Err(Error::InvalidArgument(format!("m={m} below 4")));
    }
    if samples == 0 || bins == 0 {
        return Err(Error::InvalidArgument("samples and bins must be positive".into()));
    }
    let per_sample: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let q = sample_haar_with(2 * m, &mut derive_rng(seed, i as u64), true);
            eigenphase_cosines(&q)
        })
        .collect::<Result<_>>()?;

    let edges: Vec<f64> = (0..=bins).map(|k| -1.0 + 2.0 * k as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for x in per_sample.iter().flatten() {
        let k = (((x + 1.0) / 2.0) * bins as f64).floor() as isize;
        counts[k.clamp(0, bins as isize - 1) as usize] += 1;
        total += 1;
    }
    let empirical_mass: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let arcsine_mass: Vec<f64> = edges.windows(2).map(|w| arcsine_bin_mass(w[0], w[1])).collect();
    let sup_deviation = empirical_mass
        .iter()
        .zip(&arcsine_mass)
        .map(|(e, a)| (e - a).abs())
        .fold(0.0, f64::max);
    Ok(DensityCheck {
        m,
        samples,
        edges,
        empirical_mass,
        arcsine_mass,
        sup_deviation,
        value_count: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_block_cosines() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut q = DenseMatrix::<f64>::zeros(4, 4);
        q[(0, 0)] = c;
        q[(0, 1)] = -s;
        q[(1, 0)] = s;
        q[(1, 1)] = c;
        q[(2, 2)] = 1.0;
        q[(3, 3)] = 1.0;
        let mut cos = eigenphase_cosines(&q).unwrap();
        cos.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cos.len(), 3);
        assert!((cos[0] - c).abs() < 1e-12);
        assert!((cos[1] - 1.0).abs() < 1e-12 && (cos[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arcsine_masses_sum_to_one() {
        let total: f64 = (0..40)
            .map(|k| arcsine_bin_mass(-1.0 + k as f64 / 20.0, -1.0 + (k + 1) as f64 / 20.0))
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_smoke_run() {
        let d = eigenphase_density_check(4, 50, 1, 10).unwrap();
        assert!(d.sup_deviation.is_finite());
        assert_eq!(d.value_count, 50 * 4);
        assert!((d.empirical_mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(eigenphase_density_check(3, 10, 1, 10).is_err());
    }
}
