use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Up to this `d`, `log10(d!)` is the plain sum `Σ log10 k`.
pub const EXACT_SUM_LIMIT: usize = 10_000;

/// Ten standard deviations: `p₀ = 2·10⁻²³`.
pub fn default_threshold() -> f64 {
    2e-23
}

/// `log10(d!)`: exact summation for small `d`, Stirling series beyond.
pub fn log10_factorial(d: usize) -> f64 {
    if d <= EXACT_SUM_LIMIT {
        return (2..=d).map(|k| (k as f64).ln()).sum::<f64>() / LN_10;
    }
    let x = d as f64;
    let x2 = x * x;
    // ln Γ(x+1) = x ln x − x + ½ ln(2πx) + 1/(12x) − 1/(360x³) + 1/(1260x⁵)
    let ln = x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x * x2 * x2);
    ln / LN_10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueResult {
    pub trace_c: f64,
    pub dim_d: usize,
    /// `log10(d!) − c²/(2 ln 10) + log10_correction`.
    pub log10_p: f64,
    /// Extra `log10` multiplicity folded into the bound (layer count,
    /// sign patterns); zero for the plain bound.
    pub log10_correction: f64,
    /// `min(1, 10^log10_p)`; underflows to zero.
    pub p_capped: f64,
    /// `max(0, c)`: the trace read as standard-normal deviations.
    pub sigma_equiv: f64,
    pub significant: bool,
}

/// `p ≤ d! · exp(−c²/2)`, evaluated entirely in log10.
pub fn pvalue(trace_c: f64, dim_d: usize, threshold: f64) -> Result<PValueResult> {
    pvalue_corrected(trace_c, dim_d, threshold, 0.0)
}

/// As [`pvalue`] with the bound multiplied by `10^log10_correction`.
pub fn pvalue_corrected(trace_c: f64, dim_d: usize, threshold: f64, log10_correction: f64) -> Result<PValueResult> {
    if dim_d == 0 {
        return Err(Error::InvalidDim(dim_d));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidThreshold(threshold));
    }
    if !trace_c.is_finite() {
        return Err(Error::InvalidArgument(format!("trace {trace_c} is not finite")));
    }
    // Negative traces are evidence against alignment, never for it.
    let c = trace_c.max(0.0);
    let log10_p = log10_factorial(dim_d) - c * c / (2.0 * LN_10) + log10_correction;
    let p_capped = if log10_p >= 0.0 { 1.0 } else { 10f64.powf(log10_p) };
    Ok(PValueResult {
        trace_c,
        dim_d,
        log10_p,
        log10_correction,
        p_capped,
        sigma_equiv: trace_c.max(0.0),
        significant: log10_p < threshold.log10(),
    })
}
