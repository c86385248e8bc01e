//! Small dense linear-algebra kernels: power iteration, cyclic Jacobi, and CGLS.

use ndarray::{Array1, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Relative Rayleigh-quotient change at which power iteration stops.
pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 1000;

const RESTART_SEED: u64 = 0x5eed_0f_9a11;

/// Squared largest singular value of `a` by power iteration on the smaller Gram operator.
///
/// Starts from the all-ones vector; if that start is annihilated or the iteration fails to
/// settle within the cap, restarts once from a seeded random vector.
pub fn spectral_norm_sq(a: ArrayView2<'_, f64>) -> Result<f64> {
    if a.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let tall = a.nrows() >= a.ncols();
    let dim = if tall { a.ncols() } else { a.nrows() };
    let gram = |v: &Array1<f64>| -> Array1<f64> {
        if tall {
            a.t().dot(&a.dot(v))
        } else {
            a.dot(&a.t().dot(v))
        }
    };

    let start = Array1::from_elem(dim, 1.0 / (dim as f64).sqrt());
    if let Some((rq, true)) = power_from(start, &gram) {
        return Ok(rq);
    }
    let mut rng = SeededRng::new(RESTART_SEED);
    let mut v = Array1::from_shape_fn(dim, |_| rng.standard_normal());
    let nv = norm(&v);
    v /= nv;
    match power_from(v, &gram) {
        Some((rq, _)) => Ok(rq),
        None => Err(Error::ZeroMatrix),
    }
}

/// Returns `(rayleigh_quotient, converged)`, or `None` if the start vector is annihilated.
fn power_from<F>(mut v: Array1<f64>, gram: &F) -> Option<(f64, bool)>
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let w = gram(&v);
        let rq = v.dot(&w);
        let nw = norm(&w);
        if nw == 0.0 {
            return None;
        }
        v = w / nw;
        if (rq - prev).abs() <= POWER_TOL * rq.abs() {
            return Some((rq, true));
        }
        prev = rq;
    }
    Some((prev, false))
}

/// Singular values of `a` (the `min(rows, cols)` of them), sorted ascending.
///
/// One-sided Jacobi on the columns of `a` (or `a^T` when wide), so singular values far below
/// the largest keep their relative accuracy and rank-deficient inputs give values near zero.
pub fn singular_values(a: ArrayView2<'_, f64>) -> Vec<f64> {
    let mut u = if a.nrows() >= a.ncols() { a.to_owned() } else { a.t().to_owned() };
    let n = u.ncols();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = u.column(p).dot(&u.column(p));
                let beta = u.column(q).dot(&u.column(q));
                let gamma = u.column(p).dot(&u.column(q));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..u.nrows() {
                    let (up, uq) = (u[[k, p]], u[[k, q]]);
                    u[[k, p]] = c * up - s * uq;
                    u[[k, q]] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| u.column(j).dot(&u.column(j)).sqrt()).collect();
    sv.sort_by(|x, y| x.total_cmp(y));
    sv
}

/// Least-squares solve `min_y ||a y - rhs||` by conjugate gradients on the normal equations.
///
/// Stops when `||a^T r|| <= tol * ||a^T rhs||` or after `max_iters` iterations. Returns the
/// solution and the number of iterations used.
pub fn cgls(a: ArrayView2<'_, f64>, rhs: &Array1<f64>, tol: f64, max_iters: usize) -> (Array1<f64>, usize) {
    let mut y = Array1::zeros(a.ncols());
    let mut r = rhs.clone();
    let mut s = a.t().dot(&r);
    let mut p = s.clone();
    let s0 = norm(&s);
    let mut gamma = s.dot(&s);
    if s0 == 0.0 {
        return (y, 0);
    }
    for it in 0..max_iters {
        let q = a.dot(&p);
        let qq = q.dot(&q);
        if qq == 0.0 {
            return (y, it);
        }
        let alpha = gamma / qq;
        y.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &q);
        s = a.t().dot(&r);
        let gamma_new = s.dot(&s);
        if gamma_new.sqrt() <= tol * s0 {
            return (y, it + 1);
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p = &s + &(beta * &p);
    }
    (y, max_iters)
}

pub fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn spectral_norm_identity_and_scalar() {
        let eye = Array2::<f64>::eye(5);
        assert!((spectral_norm_sq(eye.view()).unwrap() - 1.0).abs() < 1e-12);
        let two = array![[2.0]];
        assert!((spectral_norm_sq(two.view()).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_rejects_zero() {
        let z = Array2::<f64>::zeros((3, 2));
        assert!(matches!(spectral_norm_sq(z.view()), Err(Error::ZeroMatrix)));
    }

    #[test]
    fn spectral_norm_restarts_when_ones_is_annihilated() {
        // All-ones lies in the kernel of this matrix.
        let a = array![[1.0, -1.0], [2.0, -2.0]];
        let got = spectral_norm_sq(a.view()).unwrap();
        assert!((got - 10.0).abs() < 1e-8, "{got}");
    }

    #[test]
    fn singular_values_examples() {
        // Symmetric positive definite, so the singular values are the eigenvalues 3, 3 +- sqrt(3).
        let m = array![[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let expected = [3.0 - 3f64.sqrt(), 3.0, 3.0 + 3f64.sqrt()];
        for (g, e) in singular_values(m.view()).iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
        let rank_one = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let sv = singular_values(rank_one.view());
        assert!(sv[0] < 1e-14, "{}", sv[0]);
        assert!((sv[1] - 70f64.sqrt()).abs() < 1e-12);
        assert_eq!(singular_values(rank_one.t()).len(), 2);
    }

    #[test]
    fn cgls_solves_overdetermined_system() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let rhs = array![1.0, 2.0, 3.0];
        let (y, _) = cgls(a.view(), &rhs, 1e-14, 20);
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] - 2.0).abs() < 1e-12);
    }
}
