use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::haar::haar_traces;

pub const MIN_TAIL_SAMPLES: usize = 1_000;

/// Empirical `P(r, m) = P[Tr(A)/(2m) ≥ r]` for Haar `A ∈ SO(2m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub m: usize,
    pub r: f64,
    pub empirical_prob: f64,
    pub sample_count: usize,
    /// `−ln(empirical_prob) / (2m²r²)`; tends to one as `m → ∞`. Undefined
    /// without hits or at `r = 0`.
    pub rate_ratio: Option<f64>,
}

impl TailEstimate {
    pub fn from_traces(m: usize, r: f64, traces: &[f64]) -> Self {
        let cut = 2.0 * m as f64 * r;
        let hits = traces.iter().filter(|&&t| t >= cut).count();
        let empirical_prob = hits as f64 / traces.len() as f64;
        let rate = 2.0 * (m * m) as f64 * r * r;
        let rate_ratio = (hits > 0 && rate > 0.0).then(|| -empirical_prob.ln() / rate);
        Self {
            m,
            r,
            empirical_prob,
            sample_count: traces.len(),
            rate_ratio,
        }
    }
}

pub fn estimate_tail(m: usize, r: f64, samples: usize, seed: u64) -> Result<TailEstimate> {
    if m == 0 {
        return Err(Error::InvalidDim(m));
    }
    if !(0.0..=0.5).contains(&r) {
        return Err(Error::InvalidArgument(format!("r={r} outside [0, 1/2]")));
    }
    if samples < MIN_TAIL_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "{samples} samples, at least {MIN_TAIL_SAMPLES} required"
        )));
    }
    let traces = haar_traces(2 * m, samples, seed, true);
    Ok(TailEstimate::from_traces(m, r, &traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_threshold_hits_half() {
        let t = estimate_tail(8, 0.0, 20_000, 5).unwrap();
        assert!((t.empirical_prob - 0.5).abs() <= 0.01, "{}", t.empirical_prob);
        assert_eq!(t.rate_ratio, None);
    }

    #[test]
    fn small_m_extreme_event_is_reachable() {
        let t = estimate_tail(2, 0.5, 100_000, 9).unwrap();
        assert!(t.empirical_prob > 0.0);
        assert!(t.rate_ratio.unwrap().is_finite());
    }

    #[test]
    fn monotone_in_r_for_shared_samples() {
        let traces = haar_traces(16, 5_000, 3, true);
        let probs: Vec<f64> = [0.0, 0.05, 0.1, 0.15, 0.2]
            .iter()
            .map(|&r| TailEstimate::from_traces(8, r, &traces).empirical_prob)
            .collect();
        assert!(probs.windows(2).all(|w| w[0] >= w[1]), "{probs:?}");
    }

    #[test]
    fn range_checks() {
        assert!(estimate_tail(8, 0.6, 2_000, 1).is_err());
        assert!(estimate_tail(8, 0.1, 10, 1).is_err());
        assert!(estimate_tail(0, 0.1, 2_000, 1).is_err());
    }
}
