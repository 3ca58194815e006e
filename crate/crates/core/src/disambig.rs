//! Resolution of the permutation and per-column scale ambiguity of a
//! factorization `G W` against ground truth.
//!
//! Pairs of (estimated, true) columns are matched greedily in decreasing order
//! of normalized correlation without replacement, then a complex least-squares
//! scale `c_n = <ĝ, g_n> / ||ĝ||^2` is applied. The matching row of `Ŵ` is
//! divided by the same scale so that the product is unchanged.

use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::ComplexMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum DisambigError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("true column {0} of G is zero")]
    ZeroTruthColumn(usize),
}

/// Column `n` of the fixed `G` is `scales[n] * Ĝ[:, permutation[n]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityFix {
    pub permutation: Vec<usize>,
    pub scales: Vec<Complex64>,
    /// Indices `n` whose matched estimated column was zero. Their scale is 0
    /// and the corresponding row of `W` is copied without rescaling.
    pub zero_columns: Vec<usize>,
}

impl AmbiguityFix {
    pub fn is_identity(&self, tol: f64) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
            && self.scales.iter().all(|c| (c - 1.0).norm() <= tol)
    }
}

/// Aligns `(g_hat, w_hat)` to `g_true`.
///
/// `w_true` only participates in the dimension check; matching uses `G` alone.
pub fn resolve_ambiguity(
    g_hat: &ComplexMatrix,
    w_hat: &ComplexMatrix,
    g_true: &ComplexMatrix,
    w_true: &ComplexMatrix,
) -> Result<(ComplexMatrix, ComplexMatrix, AmbiguityFix), DisambigError> {
    let (m, n) = g_true.shape();
    if g_hat.shape() != (m, n) {
        return Err(DisambigError::DimensionMismatch(format!(
            "G_hat is {:?}, G_true is {:?}",
            g_hat.shape(),
            (m, n)
        )));
    }
    if w_hat.nrows() != n || w_true.shape() != w_hat.shape() {
        return Err(DisambigError::DimensionMismatch(format!(
            "W_hat is {:?}, W_true is {:?}, inner dimension {n}",
            w_hat.shape(),
            w_true.shape()
        )));
    }
    let true_norms: Vec<f64> = g_true.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = true_norms.iter().position(|&x| x == 0.0) {
        return Err(DisambigError::ZeroTruthColumn(j));
    }
    let hat_norms: Vec<f64> = g_hat.column_iter().map(|c| c.norm()).collect();

    let corr = |i: usize, j: usize| {
        if hat_norms[i] > 0.0 {
            g_hat.column(i).dotc(&g_true.column(j)).norm() / (hat_norms[i] * true_norms[j])
        } else {
            0.0
        }
    };
    let mut pairs: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| (corr(i, j), i, j))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    let mut hat_used = vec![false; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    for (_, i, j) in pairs {
        if !hat_used[i] && assigned[j].is_none() {
            hat_used[i] = true;
            assigned[j] = Some(i);
        }
    }
    let permutation: Vec<usize> = assigned
        .into_iter()
        .map(|a| a.expect("every column is assigned"))
        .collect();

    let mut g_fixed = ComplexMatrix::zeros(m, n);
    let mut w_fixed = ComplexMatrix::zeros(n, w_hat.ncols());
    let mut scales = Vec::with_capacity(n);
    let mut zero_columns = Vec::new();
    for (j, &i) in permutation.iter().enumerate() {
        let gi = g_hat.column(i);
        let energy = hat_norms[i] * hat_norms[i];
        if energy > 0.0 {
            let c = gi.dotc(&g_true.column(j)) / energy;
            if c.norm() > 0.0 {
                g_fixed.set_column(j, &(gi * c));
                w_fixed.set_row(j, &(w_hat.row(i) / c));
                scales.push(c);
                continue;
            }
        }
        zero_columns.push(j);
        g_fixed.set_column(j, &gi);
        w_fixed.set_row(j, &w_hat.row(i));
        scales.push(Complex64::new(0.0, 0.0));
    }

    Ok((
        g_fixed,
        w_fixed,
        AmbiguityFix {
            permutation,
            scales,
            zero_columns,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frob2, sample_cn_matrix};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rel(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
        (frob2(&(a - b)) / frob2(b)).sqrt()
    }

    /// `(G Π D, D^{-1} Π^T W)` with `perm[j]` the estimated column holding true column `j`.
    fn scrambled(
        g: &ComplexMatrix,
        w: &ComplexMatrix,
        perm: &[usize],
        d: &[Complex64],
    ) -> (ComplexMatrix, ComplexMatrix) {
        let mut gh = g.clone();
        let mut wh = w.clone();
        for (j, &i) in perm.iter().enumerate() {
            gh.set_column(i, &(g.column(j) / d[j]));
            wh.set_row(i, &(w.row(j) * d[j]));
        }
        (gh, wh)
    }

    /// Best assignment by exhaustive search over all permutations, for small `n`.
    fn exhaustive_best(g_hat: &ComplexMatrix, g_true: &ComplexMatrix) -> Vec<usize> {
        fn rec(
            j: usize,
            cur: &mut Vec<usize>,
            used: &mut [bool],
            cost: &dyn Fn(usize, usize) -> f64,
            acc: f64,
            best: &mut (f64, Vec<usize>),
        ) {
            let n = used.len();
            if j == n {
                if acc < best.0 {
                    *best = (acc, cur.clone());
                }
                return;
            }
            for i in 0..n {
                if !used[i] {
                    used[i] = true;
                    cur.push(i);
                    rec(j + 1, cur, used, cost, acc + cost(i, j), best);
                    cur.pop();
                    used[i] = false;
                }
            }
        }
        let n = g_true.ncols();
        // residual of the least-squares fit of true column j by estimated column i
        let cost = |i: usize, j: usize| {
            let gi = g_hat.column(i);
            let gj = g_true.column(j);
            let c = gi.dotc(&gj) / gi.norm_squared();
            (gi * c - gj).norm_squared()
        };
        let mut best = (f64::INFINITY, Vec::new());
        rec(
            0,
            &mut Vec::new(),
            &mut vec![false; n],
            &cost,
            0.0,
            &mut best,
        );
        best.1
    }

    #[test]
    fn undoes_diagonal_unitary_ambiguity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_cn_matrix(&mut rng, 30, 15, 1.0);
        let w = sample_cn_matrix(&mut rng, 15, 40, 1.0);
        let d: Vec<Complex64> = (0..15)
            .map(|_| Complex64::from_polar(1.0, 2.0 * PI * rng.random::<f64>()))
            .collect();
        let perm: Vec<usize> = (0..15).collect();
        let (gh, wh) = scrambled(&g, &w, &perm, &d);
        let (gf, wf, fix) = resolve_ambiguity(&gh, &wh, &g, &w).unwrap();
        assert!(rel(&gf, &g) < 1e-10);
        assert!(rel(&wf, &w) < 1e-10);
        assert_eq!(fix.permutation, perm);
        assert!(fix.zero_columns.is_empty());
    }

    #[test]
    fn identity_input_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = sample_cn_matrix(&mut rng, 6, 4, 1.0);
        let w = sample_cn_matrix(&mut rng, 4, 9, 1.0);
        let (gf, wf, fix) = resolve_ambiguity(&g, &w, &g, &w).unwrap();
        assert!(fix.is_identity(1e-12));
        assert!(rel(&gf, &g) < 1e-14);
        assert!(rel(&wf, &w) < 1e-14);
    }

    #[test]
    fn recovers_random_permutation_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = sample_cn_matrix(&mut rng, 30, 15, 1.0);
            let w = sample_cn_matrix(&mut rng, 15, 25, 1.0);
            let mut perm: Vec<usize> = (0..15).collect();
            perm.shuffle(&mut rng);
            let d: Vec<Complex64> = (0..15)
                .map(|_| {
                    Complex64::from_polar(0.2 + rng.random::<f64>(), 2.0 * PI * rng.random::<f64>())
                })
                .collect();
            let (gh, wh) = scrambled(&g, &w, &perm, &d);
            let (gf, wf, fix) = resolve_ambiguity(&gh, &wh, &g, &w).unwrap();
            assert_eq!(fix.permutation, perm);
            let prod = &gh * &wh;
            assert!(rel(&(&gf * &wf), &prod) < 1e-12);
            assert!(rel(&gf, &g) < 1e-10);
        }
    }

    #[test]
    fn greedy_matches_exhaustive_assignment_for_small_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..=6 {
            let g = sample_cn_matrix(&mut rng, 12, n, 1.0);
            let w = sample_cn_matrix(&mut rng, n, 5, 1.0);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let d = vec![Complex64::new(1.0, 0.0); n];
            let (gh, wh) = scrambled(&g, &w, &perm, &d);
            let gh = gh + sample_cn_matrix(&mut rng, 12, n, 0.05);
            let (_, _, fix) = resolve_ambiguity(&gh, &wh, &g, &w).unwrap();
            assert_eq!(fix.permutation, exhaustive_best(&gh, &g), "n = {n}");
        }
    }

    #[test]
    fn idempotent_on_own_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = sample_cn_matrix(&mut rng, 20, 8, 1.0);
        let w = sample_cn_matrix(&mut rng, 8, 30, 1.0);
        let gh = &g + sample_cn_matrix(&mut rng, 20, 8, 0.1);
        let wh = &w + sample_cn_matrix(&mut rng, 8, 30, 0.1);
        let (gf, wf, _) = resolve_ambiguity(&gh, &wh, &g, &w).unwrap();
        let (_, _, fix2) = resolve_ambiguity(&gf, &wf, &g, &w).unwrap();
        assert!(fix2.is_identity(1e-8));
    }

    #[test]
    fn zero_estimated_column_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = sample_cn_matrix(&mut rng, 5, 3, 1.0);
        let w = sample_cn_matrix(&mut rng, 3, 4, 1.0);
        let mut gh = g.clone();
        gh.column_mut(1).fill(Complex64::new(0.0, 0.0));
        let (gf, wf, fix) = resolve_ambiguity(&gh, &w, &g, &w).unwrap();
        assert_eq!(fix.zero_columns, vec![1]);
        assert_eq!(fix.scales[1], Complex64::new(0.0, 0.0));
        assert!(frob2(&(&gf * &wf - &gh * &w)) <= 1e-20 * frob2(&(&gh * &w)));
    }

    #[test]
    fn rejects_bad_shapes_and_zero_truth() {
        let g = ComplexMatrix::from_element(3, 2, Complex64::new(1.0, 0.0));
        let w = ComplexMatrix::from_element(2, 4, Complex64::new(1.0, 0.0));
        let g_bad = ComplexMatrix::zeros(3, 3);
        assert!(matches!(
            resolve_ambiguity(&g_bad, &w, &g, &w),
            Err(DisambigError::DimensionMismatch(_))
        ));
        let mut g0 = g.clone();
        g0.column_mut(0).fill(Complex64::new(0.0, 0.0));
        assert_eq!(
            resolve_ambiguity(&g, &w, &g0, &w),
            Err(DisambigError::ZeroTruthColumn(0))
        );
    }
}
