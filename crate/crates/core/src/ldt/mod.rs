//! Statistical engine: log-domain trace p-values, Haar sampling on O(n) and
//! SO(n), and Monte Carlo checks of the trace tail and eigenphase density.

mod density;
mod haar;
mod ks;
mod pvalue;
mod tail;

pub use density::{arcsine_bin_mass, eigenphase_cosines, eigenphase_density_check, DensityCheck};
pub use haar::{derive_rng, haar_traces, sample_haar_orthogonal, sample_haar_with};
pub use ks::{ks_one_sample, ks_two_sample, kolmogorov_survival, standard_normal_cdf, KsResult};
pub use pvalue::{default_threshold, log10_factorial, pvalue, pvalue_corrected, PValueResult, EXACT_SUM_LIMIT};
pub use tail::{estimate_tail, TailEstimate, MIN_TAIL_SAMPLES};
