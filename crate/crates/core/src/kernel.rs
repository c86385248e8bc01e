//! Strongly convex kernels `psi`, their conjugates, and Bregman distances.
//!
//! Two kernels are supported: the Euclidean kernel `psi(x) = 0.5 ||x||^2` and the elastic-net
//! kernel `psi(x) = lambda ||x||_1 + 0.5 ||x||^2`. Both are 1-strongly convex. The conjugate
//! gradient of the elastic net is soft thresholding, which maps dual iterates to sparse primal
//! iterates.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the subgradient pairing test `x_star in d psi(x)`.
pub const SUBGRADIENT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Euclidean,
    ElasticNet { lambda: f64 },
}

impl Kernel {
    /// Elastic net with weight `lambda`; `lambda = 0` is allowed and behaves like Euclidean.
    pub fn elastic_net(lambda: f64) -> Self {
        assert!(lambda >= 0.0 && lambda.is_finite(), "lambda must be finite and >= 0");
        Kernel::ElasticNet { lambda }
    }

    /// Strong convexity modulus.
    pub fn mu(&self) -> f64 {
        1.0
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Kernel::Euclidean => 0.0,
            Kernel::ElasticNet { lambda } => lambda,
        }
    }

    pub fn psi_value(&self, x: &Array1<f64>) -> f64 {
        let sq = 0.5 * x.dot(x);
        match *self {
            Kernel::Euclidean => sq,
            Kernel::ElasticNet { lambda } => lambda * x.iter().map(|v| v.abs()).sum::<f64>() + sq,
        }
    }

    /// `grad psi^*(x_star)`.
    pub fn grad_conj(&self, x_star: &Array1<f64>) -> Array1<f64> {
        match *self {
            Kernel::Euclidean => x_star.clone(),
            Kernel::ElasticNet { lambda } => soft_threshold(lambda, x_star),
        }
    }

    /// Writes `grad psi^*(x_star)` into `out` without allocating.
    pub fn grad_conj_into(&self, x_star: &Array1<f64>, out: &mut Array1<f64>) {
        let lambda = self.lambda();
        out.zip_mut_with(x_star, |o, &z| *o = shrink(lambda, z));
    }

    /// `psi^*(x_star)`, which equals `0.5 ||grad psi^*(x_star)||^2` for both kernels.
    pub fn conj_value(&self, x_star: &Array1<f64>) -> f64 {
        let lambda = self.lambda();
        0.5 * x_star.iter().map(|&z| shrink(lambda, z).powi(2)).sum::<f64>()
    }

    /// Checks that `x_star` is a subgradient of `psi` at `x` up to [`SUBGRADIENT_TOL`].
    pub fn check_subgradient(&self, x: &Array1<f64>, x_star: &Array1<f64>) -> Result<()> {
        if x.len() != x_star.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: x_star.len(),
            });
        }
        let lambda = self.lambda();
        for (j, (&xj, &zj)) in x.iter().zip(x_star.iter()).enumerate() {
            let violation = if xj == 0.0 {
                (zj.abs() - lambda).max(0.0)
            } else {
                (zj - (xj + lambda * xj.signum())).abs()
            };
            if violation > SUBGRADIENT_TOL || !violation.is_finite() {
                return Err(Error::InvalidSubgradient { coord: j, violation });
            }
        }
        Ok(())
    }

    /// `D^{x_star}(x, y) = psi^*(x_star) - <x_star, y> + psi(y)`, validating the pairing.
    pub fn bregman_distance(&self, x: &Array1<f64>, x_star: &Array1<f64>, y: &Array1<f64>) -> Result<f64> {
        self.check_subgradient(x, x_star)?;
        if y.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        Ok(self.bregman_from_dual(x_star, y))
    }

    /// Bregman distance from the primal point `grad psi^*(x_star)` to `y`, with no pairing check.
    pub fn bregman_from_dual(&self, x_star: &Array1<f64>, y: &Array1<f64>) -> f64 {
        (self.conj_value(x_star) - x_star.dot(y) + self.psi_value(y)).max(0.0)
    }
}

#[inline]
fn shrink(lambda: f64, z: f64) -> f64 {
    let mag = z.abs() - lambda;
    if mag > 0.0 {
        mag * sign(z)
    } else {
        0.0
    }
}

#[inline]
fn sign(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Componentwise `max(|z| - lambda, 0) * sign(z)` with `sign(0) = 0`.
pub fn soft_threshold(lambda: f64, z: &Array1<f64>) -> Array1<f64> {
    if lambda == 0.0 {
        return z.clone();
    }
    z.mapv(|v| shrink(lambda, v))
}

/// Primal/dual iterate pair linked by `x = grad psi^*(x_star)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterateState {
    pub x: Array1<f64>,
    pub x_star: Array1<f64>,
}

impl IterateState {
    /// The canonical start `x = 0`, `x_star = 0`.
    pub fn zeros(n: usize) -> Self {
        Self {
            x: Array1::zeros(n),
            x_star: Array1::zeros(n),
        }
    }

    pub fn from_dual(kernel: &Kernel, x_star: Array1<f64>) -> Self {
        Self {
            x: kernel.grad_conj(&x_star),
            x_star,
        }
    }

    pub fn from_pair(kernel: &Kernel, x: Array1<f64>, x_star: Array1<f64>) -> Result<Self> {
        kernel.check_subgradient(&x, &x_star)?;
        Ok(Self { x, x_star })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const EN1: Kernel = Kernel::ElasticNet { lambda: 1.0 };

    #[test]
    fn psi_examples() {
        assert_eq!(EN1.psi_value(&array![0.0, 0.0]), 0.0);
        assert_eq!(EN1.psi_value(&array![2.0, 0.0]), 4.0);
        assert_eq!(Kernel::Euclidean.psi_value(&array![3.0, 4.0]), 12.5);
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(1.0, &array![2.0, -0.5, 0.0]), array![1.0, 0.0, 0.0]);
        assert_eq!(soft_threshold(0.0, &array![2.0, -0.5]), array![2.0, -0.5]);
        assert_eq!(soft_threshold(3.0, &array![1.0, -2.0]), array![0.0, 0.0]);
    }

    #[test]
    fn grad_conj_examples() {
        assert_eq!(EN1.grad_conj(&array![3.0, -2.0]), array![2.0, -1.0]);
        assert_eq!(Kernel::Euclidean.grad_conj(&array![3.0, -2.0]), array![3.0, -2.0]);
        assert_eq!(EN1.grad_conj(&array![0.5]), array![0.0]);
    }

    #[test]
    fn conj_value_examples() {
        assert_eq!(EN1.conj_value(&array![3.0]), 2.0);
        assert_eq!(EN1.conj_value(&array![0.5]), 0.0);
        assert_eq!(Kernel::Euclidean.conj_value(&array![1.0, 1.0]), 1.0);
    }

    #[test]
    fn bregman_examples() {
        let d = EN1.bregman_distance(&array![0.0], &array![0.0], &array![2.0]).unwrap();
        assert_eq!(d, 4.0);
        let d = Kernel::Euclidean
            .bregman_distance(&array![1.0], &array![1.0], &array![3.0])
            .unwrap();
        assert_eq!(d, 2.0);
        let x = array![2.0, 0.0, -1.0];
        let xs = array![3.0, 0.4, -2.0];
        assert!(EN1.bregman_distance(&x, &xs, &x).unwrap().abs() < 1e-14);
    }

    #[test]
    fn bregman_rejects_bad_pairing() {
        // x = 1 requires x_star = 2 under the elastic net with lambda = 1.
        let err = EN1.bregman_distance(&array![1.0], &array![1.0], &array![0.0]);
        assert!(matches!(err, Err(Error::InvalidSubgradient { coord: 0, .. })));
        let err = EN1.bregman_distance(&array![0.0], &array![1.5], &array![0.0]);
        assert!(matches!(err, Err(Error::InvalidSubgradient { .. })));
    }

    fn kernel_strategy() -> impl Strategy<Value = Kernel> {
        prop_oneof![Just(Kernel::Euclidean), (0.0..3.0f64).prop_map(Kernel::elastic_net)]
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Array1<f64>> {
        prop::collection::vec(-5.0..5.0f64, n).prop_map(Array1::from)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn grad_conj_is_nonexpansive(k in kernel_strategy(), u in vec_strategy(6), v in vec_strategy(6)) {
            let lhs = (&k.grad_conj(&u) - &k.grad_conj(&v)).mapv(|t| t * t).sum().sqrt();
            let rhs = (&u - &v).mapv(|t| t * t).sum().sqrt() / k.mu();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn bregman_dominates_half_squared_distance(k in kernel_strategy(), z in vec_strategy(6), y in vec_strategy(6)) {
            let x = k.grad_conj(&z);
            let d = k.bregman_distance(&x, &z, &y).unwrap();
            let sq = 0.5 * k.mu() * (&x - &y).mapv(|t| t * t).sum();
            prop_assert!(d >= sq - 1e-12);
        }

        #[test]
        fn fenchel_young_equality(k in kernel_strategy(), z in vec_strategy(6)) {
            let x = k.grad_conj(&z);
            let gap = k.psi_value(&x) + k.conj_value(&z) - x.dot(&z);
            prop_assert!(gap.abs() <= 1e-10);
        }

        #[test]
        fn soft_threshold_zero_is_identity(z in vec_strategy(6)) {
            prop_assert_eq!(soft_threshold(0.0, &z), z);
        }
    }
}
