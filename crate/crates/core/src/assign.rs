//! Permutation recovery: `argmax_P Tr(P Ũᵀ) = argmax Σᵢ Ũ[i, perm(i)]`.
//!
//! Two solvers share one result type: the exact O(n³) Hungarian method (run
//! on negated scores) and the row-argmax shortcut, which is only accepted
//! when it happens to be a bijection.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matlin::DenseMatrix;
use crate::scalar::Scalar;

pub const DEFAULT_EXACT_CAP: usize = 20_480;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Heuristic,
    Hungarian,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult<T> {
    /// `perm[row]` is the assigned column.
    pub perm: Vec<usize>,
    /// `Σᵢ score[i, perm[i]]`, or `Σᵢ |score[i, perm[i]]|` for signed results.
    pub total: T,
    pub method: Method,
    pub is_permutation: bool,
    /// Present for signed matching: `signs[i] = sign(score[i, perm[i]])`.
    pub signs: Option<Vec<i8>>,
}

impl<T: Scalar> AssignmentResult<T> {
    /// The (signed) permutation matrix `P` with `P[i, perm[i]] = ±1`.
    pub fn matrix(&self) -> DenseMatrix<T> {
        let n = self.perm.len();
        let mut p = DenseMatrix::zeros(n, n);
        for (i, &j) in self.perm.iter().enumerate() {
            let s = match &self.signs {
                Some(signs) if signs[i] < 0 => -T::one(),
                _ => T::one(),
            };
            p[(i, j)] = s;
        }
        p
    }

    pub fn inverse_perm(&self) -> Vec<usize> {
        invert(&self.perm)
    }
}

/// Row-argmax map that failed to be a bijection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotAPermutation {
    pub argmax: Vec<usize>,
    /// Columns claimed by more than one row, ascending.
    pub collisions: Vec<usize>,
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &j) in perm.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

pub fn is_bijection(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
}

fn check_square<T: Scalar>(score: &DenseMatrix<T>) -> Result<()> {
    if !score.is_square() {
        return Err(Error::NonSquare(score.rows(), score.cols()));
    }
    if !score.is_finite() {
        return Err(Error::NonFiniteValue("assignment scores".into()));
    }
    Ok(())
}

fn total_of<T: Scalar>(score: &DenseMatrix<T>, perm: &[usize]) -> T {
    perm.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum()
}

/// First-maximum column of every row.
pub fn row_argmax<T: Scalar>(score: &DenseMatrix<T>) -> Vec<usize> {
    (0..score.rows())
        .map(|i| {
            let row = score.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn solve_heuristic<T: Scalar>(
    score: &DenseMatrix<T>,
) -> Result<std::result::Result<AssignmentResult<T>, NotAPermutation>> {
    check_square(score)?;
    let argmax = row_argmax(score);
    let mut hits = vec![0usize; score.cols()];
    for &j in &argmax {
        hits[j] += 1;
    }
    let collisions: Vec<usize> = hits
        .iter()
        .enumerate()
        .filter(|(_, &h)| h > 1)
        .map(|(j, _)| j)
        .collect();
    if !collisions.is_empty() {
        return Ok(Err(NotAPermutation { argmax, collisions }));
    }
    Ok(Ok(AssignmentResult {
        total: total_of(score, &argmax),
        perm: argmax,
        method: Method::Heuristic,
        is_permutation: true,
        signs: None,
    }))
}

/// Exact maximum-weight assignment. Among optimal assignments the one that
/// is lexicographically smallest (row 0 first, lowest column) is returned.
pub fn solve_exact<T: Scalar>(score: &DenseMatrix<T>) -> Result<AssignmentResult<T>> {
    check_square(score)?;
    let n = score.rows();
    if n == 0 {
        return Ok(AssignmentResult {
            perm: Vec::new(),
            total: T::zero(),
            method: Method::Hungarian,
            is_permutation: true,
            signs: None,
        });
    }
    let cost = score.scale(-T::one());
    let (mut col_of, u, v) = hungarian_min(&cost);
    let scale = cost.max_abs().max(T::one());
    let tol = T::from_f64_lossy(1e3) * T::epsilon() * T::from_usize(n).unwrap() * scale;
    lexicographic_refine(&cost, &u, &v, tol, &mut col_of);
    debug_assert!(is_bijection(&col_of));
    Ok(AssignmentResult {
        total: total_of(score, &col_of),
        perm: col_of,
        method: Method::Hungarian,
        is_permutation: true,
        signs: None,
    })
}

/// Shortest-augmenting-path Hungarian method with row/column potentials.
/// Returns the row→column assignment and the dual potentials.
fn hungarian_min<T: Scalar>(cost: &DenseMatrix<T>) -> (Vec<usize>, Vec<T>, Vec<T>) {
    let n = cost.rows();
    let inf = T::infinity();
    // 1-based with a virtual column 0, as in the classical formulation.
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = cost.row(i0 - 1);
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

/// Walks rows in order and moves each onto the lowest tight column that still
/// admits a perfect matching on the tight (zero reduced cost) subgraph. Every
/// such matching is optimal by complementary slackness.
fn lexicographic_refine<T: Scalar>(cost: &DenseMatrix<T>, u: &[T], v: &[T], tol: T, col_of: &mut [usize]) {
    let n = col_of.len();
    let tight = |i: usize, j: usize| cost[(i, j)] - u[i] - v[j] <= tol;
    let mut row_of = invert(col_of);
    for i in 0..n {
        let cur = col_of[i];
        for j in 0..cur {
            let i2 = row_of[j];
            if i2 < i || !tight(i, j) {
                continue;
            }
            // Re-seat i2 by an alternating path ending at the column i frees.
            let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
            let mut seen = vec![false; n];
            seen[i2] = true;
            let mut queue = VecDeque::from([i2]);
            let mut end = None;
            'bfs: while let Some(r) = queue.pop_front() {
                for c in 0..n {
                    if c == j || c == col_of[r] || !tight(r, c) {
                        continue;
                    }
                    if c == cur {
                        end = Some((r, c));
                        break 'bfs;
                    }
                    let r2 = row_of[c];
                    if r2 <= i || seen[r2] {
                        continue;
                    }
                    seen[r2] = true;
                    parent[r2] = Some((r, c));
                    queue.push_back(r2);
                }
            }
            let Some((mut r, mut c)) = end else { continue };
            loop {
                let prev_col = col_of[r];
                col_of[r] = c;
                row_of[c] = r;
                if r == i2 {
                    break;
                }
                let (pr, pc) = parent[r].expect("bfs parent");
                debug_assert_eq!(pc, prev_col);
                r = pr;
                c = prev_col;
            }
            col_of[i] = j;
            row_of[j] = i;
            break;
        }
    }
}

/// Heuristic first; the exact solver only when the argmax map collides and
/// `n <= exact_cap`.
pub fn solve_escalating<T: Scalar>(
    score: &DenseMatrix<T>,
    exact_cap: usize,
) -> Result<std::result::Result<AssignmentResult<T>, NotAPermutation>> {
    match solve_heuristic(score)? {
        Ok(found) => Ok(Ok(found)),
        Err(miss) if score.rows() <= exact_cap => {
            log::debug!(
                "row-argmax collides on {} columns, running exact assignment (n={})",
                miss.collisions.len(),
                score.rows()
            );
            solve_exact(score).map(Ok)
        }
        Err(miss) => Ok(Err(miss)),
    }
}

/// Signed-permutation matching: assign on `|score|`, then record the sign of
/// each matched entry. `total = Σ |score[i, perm[i]]| = Tr(P_s scoreᵀ)`.
pub fn solve_signed_escalating<T: Scalar>(
    score: &DenseMatrix<T>,
    exact_cap: usize,
) -> Result<std::result::Result<AssignmentResult<T>, NotAPermutation>> {
    let magnitude = score.map(|x| x.abs());
    Ok(solve_escalating(&magnitude, exact_cap)?.map(|mut found| {
        found.signs = Some(
            found
                .perm
                .iter()
                .enumerate()
                .map(|(i, &j)| if score[(i, j)] < T::zero() { -1 } else { 1 })
                .collect(),
        );
        found
    }))
}
