use serde::{Deserialize, Serialize};

use crate::matlin::spectral_summary;
use crate::weights::{ModelBundle, Role};
use crate::Matrix;

/// Relative differences of orthogonal-invariant norms of one matrix pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenEntry {
    pub role: Role,
    pub layer: Option<usize>,
    pub frobenius: f64,
    pub spectral: f64,
    pub kyfan: f64,
    pub schatten: f64,
    pub max_delta: f64,
}

const KYFAN_K: usize = 8;
const SCHATTEN_P: f64 = 4.0;

fn relative(x: f64, y: f64) -> f64 {
    let m = x.abs().max(y.abs());
    if m == 0.0 { 0.0 } else { (x - y).abs() / m }
}

fn entry(role: Role, layer: Option<usize>, a: &Matrix, b: &Matrix) -> Option<ScreenEntry> {
    let k = KYFAN_K.min(a.rows().min(a.cols())).min(b.rows().min(b.cols()));
    if k == 0 {
        return None;
    }
    let sa = spectral_summary(a, k, SCHATTEN_P).ok()?;
    let sb = spectral_summary(b, k, SCHATTEN_P).ok()?;
    let frobenius = relative(sa.frobenius, sb.frobenius);
    let spectral = relative(sa.spectral, sb.spectral);
    let kyfan = relative(sa.kyfan_k, sb.kyfan_k);
    let schatten = relative(sa.schatten_p, sb.schatten_p);
    Some(ScreenEntry {
        role,
        layer,
        frobenius,
        spectral,
        kyfan,
        schatten,
        max_delta: frobenius.max(spectral).max(kyfan).max(schatten),
    })
}

/// Compares unitarily invariant norms of corresponding matrices. Matching
/// norms are necessary but not sufficient for a shared origin, so the result
/// is advisory. Entries are sorted by decreasing `max_delta`.
pub fn preliminary_screen(a: &ModelBundle, b: &ModelBundle) -> Vec<ScreenEntry> {
    let mut out: Vec<ScreenEntry> = entry(Role::Embedding, None, &a.embedding, &b.embedding)
        .into_iter()
        .collect();
    for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        for role in Role::LAYER_ROLES {
            out.extend(entry(role, Some(l), la.get(role).unwrap(), lb.get(role).unwrap()));
        }
    }
    out.sort_by(|x, y| y.max_delta.total_cmp(&x.max_delta));
    out
}
