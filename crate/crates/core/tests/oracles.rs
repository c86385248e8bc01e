//! Library routines checked against dense factorizations from nalgebra.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

use sbbp::diagnostics::eta_constant;
use sbbp::instances::{gen_lfp, nullspace_unit_vector, LfpSpec};
use sbbp::linalg::spectral_norm_sq;
use sbbp::rng::SeededRng;
use sbbp::sampling::optimal_block_size;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = SeededRng::new(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.standard_normal())
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    sv
}

#[test]
fn spectral_norm_matches_svd() {
    for seed in 0..10 {
        let a = gaussian(50, 20, seed);
        let top = *singular_values(&to_na(&a)).last().unwrap();
        let got = spectral_norm_sq(a.view()).unwrap();
        assert!((got - top * top).abs() <= 1e-6 * top * top, "seed {seed}: {got} vs {}", top * top);
    }
}

#[test]
fn optimal_block_size_matches_svd() {
    for seed in 0..5 {
        let (lfp, _) = gen_lfp(&LfpSpec::new(400, 100, 20, seed)).unwrap();
        let top = *singular_values(&to_na(lfp.matrix())).last().unwrap();
        let expected = (400.0 / (top * top)).floor() as usize;
        assert_eq!(optimal_block_size(lfp.matrix().view()).unwrap(), expected, "seed {seed}");
    }
}

#[test]
fn nullspace_vector_is_orthogonal_to_range() {
    for seed in 0..10 {
        let a = gaussian(40, 10, 100 + seed);
        let v = nullspace_unit_vector(a.view(), &mut SeededRng::new(seed)).unwrap();
        assert!((v.dot(&v).sqrt() - 1.0).abs() < 1e-12);
        let q = to_na(&a).qr().q();
        let v_na = nalgebra::DVector::from_iterator(v.len(), v.iter().copied());
        let proj = q.transpose() * v_na;
        assert!(proj.norm() <= 1e-8, "seed {seed}: |Q^T v| = {:e}", proj.norm());
    }
}

fn eta_reverse(a: &Array2<f64>, xhat: &Array1<f64>, lambda: f64) -> f64 {
    let n = a.ncols();
    let full = to_na(a);
    let mut smallest = f64::INFINITY;
    for mask in (1u32..1 << n).rev() {
        let cols: Vec<usize> = (0..n).rev().filter(|j| mask >> j & 1 == 1).collect();
        let sub = full.select_columns(cols.iter());
        let sv = singular_values(&sub);
        let top = *sv.last().unwrap();
        if let Some(s) = sv.into_iter().find(|&s| s > 1e-12 * top) {
            smallest = smallest.min(s);
        }
    }
    let xmin = xhat.iter().filter(|v| **v != 0.0).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    smallest * smallest * xmin / (xmin + 2.0 * lambda)
}

#[test]
fn eta_matches_reverse_enumeration() {
    for seed in 0..10 {
        let a = gaussian(6, 4, 200 + seed);
        let mut rng = SeededRng::new(300 + seed);
        let mut xhat = Array1::from_shape_simple_fn(4, || rng.standard_normal());
        xhat[(seed % 4) as usize] = 0.0;
        let got = eta_constant(a.view(), &xhat, 1.0).unwrap();
        let want = eta_reverse(&a, &xhat, 1.0);
        assert!((got - want).abs() <= 1e-10 * want, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn eta_of_rank_deficient_matrix_uses_positive_singular_values() {
    let mut a = gaussian(6, 4, 7);
    let col: Vec<f64> = a.column(0).iter().map(|v| 2.0 * v).collect();
    a.column_mut(3).assign(&Array1::from(col));
    let xhat = Array1::from(vec![1.0, -0.5, 0.0, 2.0]);
    let got = eta_constant(a.view(), &xhat, 1.0).unwrap();
    let want = eta_reverse(&a, &xhat, 1.0);
    assert!(got > 0.0);
    assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
}
