//! One-sided (Hestenes) Jacobi SVD for small square matrices.
//!
//! Transform sides here are at most a few hundred, so the O(m^3) per sweep
//! cost is negligible next to the patch products, and Jacobi gives
//! orthogonal factors to working precision without a LAPACK dependency.

use ndarray::{Array1, Array2};

use crate::scalar::Real;

const MAX_SWEEPS: usize = 80;

/// Full SVD `a = u * diag(singular) * v^T` with `u`, `v` orthogonal.
///
/// Singular values are not sorted; columns of `u` belonging to zero singular
/// values are an arbitrary orthonormal completion.
#[derive(Clone, Debug)]
pub struct Svd<F> {
    pub u: Array2<F>,
    pub singular: Array1<F>,
    pub v: Array2<F>,
}

fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    x.iter().zip(y).fold(F::zero(), |acc, (&a, &b)| acc + a * b)
}

fn rotate<F: Real>(x: &mut [F], y: &mut [F], c: F, s: F) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Splits a flat column store into two disjoint mutable columns.
fn pair_mut<F>(cols: &mut [F], m: usize, i: usize, j: usize) -> (&mut [F], &mut [F]) {
    debug_assert!(i < j);
    let (head, tail) = cols.split_at_mut(j * m);
    (&mut head[i * m..(i + 1) * m], &mut tail[..m])
}

pub fn jacobi_svd<F: Real>(a: &Array2<F>) -> Svd<F> {
    let (rows, m) = a.dim();
    assert_eq!(rows, m, "jacobi_svd expects a square matrix");

    // Column-major working copies: w = a * v converges to u * diag(s).
    let mut w: Vec<F> = a.t().iter().copied().collect();
    let mut v = vec![F::zero(); m * m];
    for i in 0..m {
        v[i * m + i] = F::one();
    }

    let eps = F::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..m {
            for j in i + 1..m {
                let (wi, wj) = pair_mut(&mut w, m, i, j);
                let alpha = dot(wi, wi);
                let beta = dot(wj, wj);
                let gamma = dot(wi, wj);
                if gamma == F::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (F::one() + zeta * zeta).sqrt());
                let c = F::one() / (F::one() + t * t).sqrt();
                let s = c * t;
                rotate(wi, wj, c, s);
                let (vi, vj) = pair_mut(&mut v, m, i, j);
                rotate(vi, vj, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let singular: Vec<F> = (0..m)
        .map(|i| dot(&w[i * m..(i + 1) * m], &w[i * m..(i + 1) * m]).sqrt())
        .collect();
    let smax = singular.iter().copied().fold(F::zero(), F::max);
    let tol = smax * eps * F::of_usize(m.max(1));

    // Normalize well-conditioned columns first, largest first, then complete.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| {
        singular[y]
            .partial_cmp(&singular[x])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut u = vec![F::zero(); m * m];
    let mut filled: Vec<usize> = Vec::with_capacity(m);
    let mut pending: Vec<usize> = Vec::new();
    for &i in &order {
        let s = singular[i];
        if s > tol && s > F::zero() {
            let col: Vec<F> = w[i * m..(i + 1) * m].iter().map(|&x| x / s).collect();
            u[i * m..(i + 1) * m].copy_from_slice(&col);
            filled.push(i);
        } else {
            pending.push(i);
        }
    }
    for i in pending {
        let col = complete_basis(&u, &filled, m);
        u[i * m..(i + 1) * m].copy_from_slice(&col);
        filled.push(i);
    }

    let to_matrix = |cols: &[F]| Array2::from_shape_fn((m, m), |(r, c)| cols[c * m + r]);
    Svd {
        u: to_matrix(&u),
        singular: Array1::from(singular),
        v: to_matrix(&v),
    }
}

/// Unit vector orthogonal to the columns listed in `filled`.
fn complete_basis<F: Real>(u: &[F], filled: &[usize], m: usize) -> Vec<F> {
    let mut best: Option<(F, Vec<F>)> = None;
    for k in 0..m {
        let mut cand = vec![F::zero(); m];
        cand[k] = F::one();
        // Two Gram-Schmidt passes keep the result orthogonal to working precision.
        for _ in 0..2 {
            for &f in filled {
                let col = &u[f * m..(f + 1) * m];
                let proj = dot(&cand, col);
                for (c, &b) in cand.iter_mut().zip(col) {
                    *c = *c - proj * b;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, cand));
        }
        if norm > F::lit(0.5) {
            break;
        }
    }
    let (norm, cand) = best.expect("m >= 1");
    cand.into_iter().map(|x| x / norm).collect()
}
