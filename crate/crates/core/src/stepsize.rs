//! Stepsize rules: the decreasing mirror stochastic Polyak stepsize (DecmSPS), the exact
//! projective stepsize onto the separating halfspace, and the block adaptive extrapolated step.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::deviation::BatchStats;
use crate::error::{Error, Result};
use crate::kernel::Kernel;

/// Default relative bracket width for the exact projective step.
pub const EXACT_TOL: f64 = 1e-12;
pub const MAX_DOUBLINGS: usize = 60;
pub const MAX_BISECTIONS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lambda_k = 1/c`
    #[default]
    Constant,
    /// `lambda_k = 1/(c sqrt(k+1))`
    InvSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecmSpsParams {
    pub c: f64,
    pub gamma_b: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Default for DecmSpsParams {
    fn default() -> Self {
        Self { c: 0.2, gamma_b: 100.0, schedule: Schedule::Constant }
    }
}

impl DecmSpsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) || !(self.gamma_b > 0.0 && self.gamma_b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "DecmSPS needs c > 0 and gamma_b > 0 (got c={}, gamma_b={})",
                self.c, self.gamma_b
            )));
        }
        Ok(())
    }

    pub fn lambda(&self, k: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => 1.0 / self.c,
            Schedule::InvSqrt => 1.0 / (self.c * ((k + 1) as f64).sqrt()),
        }
    }

    /// Two-sided bound `lambda_k L~ <= t_k <= (gamma_b / lambda_0) lambda_k` with
    /// `L~ = min(mu / (2 L_max), gamma_b / lambda_0)`.
    pub fn bounds(&self, mu: f64, l_max: f64, k: usize) -> (f64, f64) {
        let lambda0 = self.lambda(0);
        let cap = self.gamma_b / lambda0;
        let l_tilde = (mu / (2.0 * l_max)).min(cap);
        let lk = self.lambda(k);
        (lk * l_tilde, cap * lk)
    }
}

/// Running state of DecmSPS, owned by one run.
#[derive(Clone, Debug, PartialEq)]
pub struct DecmSpsState {
    params: DecmSpsParams,
    prev_t_over_lambda: f64,
}

impl DecmSpsState {
    /// Starts from `t_{-1} = gamma_b` and `lambda_{-1} = lambda_0`.
    pub fn new(params: DecmSpsParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { prev_t_over_lambda: params.gamma_b / params.lambda(0), params })
    }

    pub fn params(&self) -> &DecmSpsParams {
        &self.params
    }

    pub fn prev_t_over_lambda(&self) -> f64 {
        self.prev_t_over_lambda
    }
}

/// `t_k = lambda_k min{ mu (value - l*) / ||grad||^2, t_{k-1} / lambda_{k-1} }`.
///
/// On a zero batch gradient the state is left untouched and `DegenerateBatch` is returned.
pub fn decmsps_next(state: &mut DecmSpsState, stats: &BatchStats, mu: f64, k: usize) -> Result<f64> {
    let quotient = polyak_quotient(stats, mu)?;
    let ratio = quotient.min(state.prev_t_over_lambda);
    state.prev_t_over_lambda = ratio;
    Ok(state.params.lambda(k) * ratio)
}

/// `mu (value - l*) / ||grad||^2`.
pub fn polyak_quotient(stats: &BatchStats, mu: f64) -> Result<f64> {
    let g2 = stats.grad_norm_sq();
    if g2 == 0.0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(mu * (stats.value - stats.lower_bound) / g2)
}

/// Capped mirror Polyak step without the running minimum, `min{ mu P / c, gamma_b }`.
/// Used as a non-decreasing baseline.
pub fn msps_max_step(stats: &BatchStats, mu: f64, c: f64, gamma_b: f64) -> Result<f64> {
    Ok((polyak_quotient(stats, mu)? / c).min(gamma_b))
}

/// `||sum w grad f_i||^2 / sum w ||grad f_i||^2`, clipped to `[0, 1]`.
pub fn l_adapt(stats: &BatchStats) -> Result<f64> {
    if !(stats.weighted_sq > 0.0) {
        return Err(Error::DegenerateBatch);
    }
    Ok((stats.grad_norm_sq() / stats.weighted_sq).min(1.0))
}

/// `{ y : <alpha, y> <= beta }`.
#[derive(Clone, Debug, PartialEq)]
pub struct Halfspace {
    pub alpha: Array1<f64>,
    pub beta: f64,
}

/// Separating halfspace built from cocoercivity of the sampled gradients at `x`.
pub fn halfspace(x: &Array1<f64>, stats: &BatchStats) -> Result<Halfspace> {
    if !(stats.weighted_sq > 0.0) {
        return Err(Error::DegenerateBatch);
    }
    let beta = stats.grad.dot(x) - stats.lipschitz_weighted_sq;
    Ok(Halfspace { alpha: stats.grad.clone(), beta })
}

/// `mu / (L_max l_adapt)`.
pub fn block_adaptive_step(mu: f64, l_max: f64, l_adapt: f64) -> Result<f64> {
    if !(l_adapt > 0.0) {
        return Err(Error::DegenerateBatch);
    }
    Ok(mu / (l_max * l_adapt))
}

/// Smallest minimizer `t >= 0` of `phi(t) = psi^*(x_star - t alpha) + t beta`.
///
/// Euclidean: closed form `(<alpha, x_star> - beta) / ||alpha||^2`, clipped at zero.
/// Elastic net: bisection on the nondecreasing `phi'(t) = beta - <alpha, S(x_star - t alpha)>`.
/// The upper end starts at `hint` (typically `2 mu / (L_max l_adapt)`), or at the Euclidean
/// step when no hint is given, and doubles until `phi'` is nonnegative. The returned value is
/// the left edge of the final bracket.
pub fn exact_projective_step(
    kernel: &Kernel,
    x_star: &Array1<f64>,
    hs: &Halfspace,
    tol: f64,
    hint: Option<f64>,
) -> Result<f64> {
    let a2 = hs.alpha.dot(&hs.alpha);
    if a2 == 0.0 {
        return Err(Error::DegenerateHalfspace);
    }
    if x_star.len() != hs.alpha.len() {
        return Err(Error::DimensionMismatch { expected: hs.alpha.len(), found: x_star.len() });
    }
    let lambda = kernel.lambda();
    if lambda == 0.0 {
        return Ok(((hs.alpha.dot(x_star) - hs.beta) / a2).max(0.0));
    }

    let dphi = |t: f64| -> f64 {
        let mut inner = 0.0;
        for (&a, &z) in hs.alpha.iter().zip(x_star.iter()) {
            let v = z - t * a;
            let mag = v.abs() - lambda;
            if mag > 0.0 {
                inner += a * mag.copysign(v);
            }
        }
        hs.beta - inner
    };

    if dphi(0.0) >= 0.0 {
        return Ok(0.0);
    }
    let mut hi = hint
        .filter(|h| *h > 0.0 && h.is_finite())
        .unwrap_or_else(|| ((hs.alpha.dot(x_star) - hs.beta) / a2).abs().max(f64::MIN_POSITIVE));
    let mut doublings = 0;
    while dphi(hi) < 0.0 {
        if doublings == MAX_DOUBLINGS {
            return Err(Error::DivergingBracket { doublings });
        }
        hi *= 2.0;
        doublings += 1;
    }
    let width = tol * hi.max(1.0);
    let mut lo = 0.0;
    for _ in 0..MAX_BISECTIONS {
        if hi - lo <= width {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if dphi(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn stats(value: f64, grad: Array1<f64>, weighted_sq: f64, lipschitz_weighted_sq: f64) -> BatchStats {
        BatchStats { value, grad, weighted_sq, lipschitz_weighted_sq, lower_bound: 0.0 }
    }

    /// Stats whose Polyak quotient (mu = 1) equals `q`.
    fn with_quotient(q: f64) -> BatchStats {
        stats(q, array![1.0], 1.0, 1.0)
    }

    #[test]
    fn l_adapt_examples() {
        let same = stats(0.0, array![1.0, 2.0], 5.0, 5.0);
        assert!((l_adapt(&same).unwrap() - 1.0).abs() < 1e-15);
        let cancel = stats(0.0, array![0.0, 0.0], 4.0, 4.0);
        assert_eq!(l_adapt(&cancel).unwrap(), 0.0);
        // grads [1,0] and [0,1] with weights 1/2
        let half = stats(0.0, array![0.5, 0.5], 1.0, 1.0);
        assert_eq!(l_adapt(&half).unwrap(), 0.5);
        assert!(matches!(l_adapt(&stats(0.0, array![0.0], 0.0, 0.0)), Err(Error::DegenerateBatch)));
    }

    #[test]
    fn halfspace_examples() {
        // row a = [1, 0], b = 0, equality, x = [2, 0]: grad = [2, 0]
        let hs = halfspace(&array![2.0, 0.0], &stats(2.0, array![2.0, 0.0], 4.0, 4.0)).unwrap();
        assert_eq!(hs.alpha, array![2.0, 0.0]);
        assert_eq!(hs.beta, 0.0);
        let err = halfspace(&array![0.0], &stats(0.0, array![0.0], 0.0, 0.0));
        assert!(matches!(err, Err(Error::DegenerateBatch)));
    }

    #[test]
    fn decmsps_constant_schedule_quotients() {
        let p = DecmSpsParams { c: 1.0, gamma_b: 2.0, schedule: Schedule::Constant };
        let mut st = DecmSpsState::new(p).unwrap();
        assert_eq!(decmsps_next(&mut st, &with_quotient(0.5), 1.0, 0).unwrap(), 0.5);
        assert_eq!(decmsps_next(&mut st, &with_quotient(3.0), 1.0, 1).unwrap(), 0.5);
    }

    #[test]
    fn decmsps_invsqrt_schedule_quotients() {
        let p = DecmSpsParams { c: 1.0, gamma_b: 2.0, schedule: Schedule::InvSqrt };
        let mut st = DecmSpsState::new(p).unwrap();
        assert_eq!(decmsps_next(&mut st, &with_quotient(0.5), 1.0, 0).unwrap(), 0.5);
        let t1 = decmsps_next(&mut st, &with_quotient(3.0), 1.0, 1).unwrap();
        assert!((t1 - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn decmsps_single_row_is_constant() {
        // For one LFP row f = ||grad f||^2 / 2, so the quotient is always 1/2.
        for c in [0.1, 0.2, 0.5, 1.0, 3.0] {
            let p = DecmSpsParams { c, gamma_b: 1.0 / (2.0 * c), schedule: Schedule::Constant };
            let mut st = DecmSpsState::new(p).unwrap();
            for k in 0..20 {
                let g = 0.3 + k as f64;
                let s = stats(0.5 * g * g, array![g], g * g, g * g);
                let t = decmsps_next(&mut st, &s, 1.0, k).unwrap();
                assert!((t - 1.0 / (2.0 * c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decmsps_skip_leaves_state() {
        let mut st = DecmSpsState::new(DecmSpsParams::default()).unwrap();
        let before = st.clone();
        let zero = stats(0.0, array![0.0, 0.0], 0.0, 0.0);
        assert!(decmsps_next(&mut st, &zero, 1.0, 0).is_err());
        assert_eq!(st, before);
        assert!(DecmSpsState::new(DecmSpsParams { c: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn block_adaptive_examples() {
        assert_eq!(block_adaptive_step(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(block_adaptive_step(1.0, 1.0, 0.5).unwrap(), 2.0);
        assert_eq!(block_adaptive_step(1.0, 4.0, 1.0).unwrap(), 0.25);
        assert!(block_adaptive_step(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn exact_step_examples() {
        let hs = Halfspace { alpha: array![2.0, 0.0], beta: 0.0 };
        let t = exact_projective_step(&Kernel::Euclidean, &array![2.0, 0.0], &hs, EXACT_TOL, None).unwrap();
        assert_eq!(t, 1.0);
        let x_next = array![2.0, 0.0] - &(t * &hs.alpha);
        assert_eq!(x_next, array![0.0, 0.0]);

        // Already on the boundary: <alpha, S(x_star)> = beta.
        let en = Kernel::elastic_net(1.0);
        let xs = array![3.0, -0.5];
        let hs = Halfspace { alpha: array![1.0, 1.0], beta: 2.0 };
        assert_eq!(exact_projective_step(&en, &xs, &hs, EXACT_TOL, None).unwrap(), 0.0);
        assert_eq!(exact_projective_step(&Kernel::Euclidean, &array![2.0, 0.0], &Halfspace { alpha: array![1.0, 0.0], beta: 2.0 }, EXACT_TOL, None).unwrap(), 0.0);

        let zero = Halfspace { alpha: array![0.0, 0.0], beta: 1.0 };
        assert!(matches!(
            exact_projective_step(&en, &xs, &zero, EXACT_TOL, None),
            Err(Error::DegenerateHalfspace)
        ));
    }

    #[test]
    fn exact_step_elastic_net_lands_on_boundary() {
        let en = Kernel::elastic_net(1.0);
        let xs = array![3.0, -2.5, 0.2, 1.5];
        let alpha = array![1.0, -0.5, 2.0, 0.3];
        let x = en.grad_conj(&xs);
        let hs = Halfspace { beta: alpha.dot(&x) - 1.7, alpha };
        for hint in [None, Some(1e-3), Some(50.0)] {
            let t = exact_projective_step(&en, &xs, &hs, EXACT_TOL, hint).unwrap();
            let xn = en.grad_conj(&(&xs - &(t * &hs.alpha)));
            assert!((hs.alpha.dot(&xn) - hs.beta).abs() <= 1e-9, "{hint:?}");
        }
    }

    #[test]
    fn exact_step_diverging_bracket() {
        // phi'(t) = -1 - (x_star_0 - t - 1) stays negative for every reachable t.
        let en = Kernel::elastic_net(1.0);
        let hs = Halfspace { alpha: array![1.0, 0.0], beta: -1.0 };
        let xs = array![f64::MAX / 4.0, 0.0];
        let err = exact_projective_step(&en, &xs, &hs, EXACT_TOL, Some(1.0));
        assert!(matches!(err, Err(Error::DivergingBracket { doublings: MAX_DOUBLINGS })));
    }

    #[test]
    fn bounds_match_lemma_form() {
        let p = DecmSpsParams { c: 0.2, gamma_b: 100.0, schedule: Schedule::Constant };
        let (lo, hi) = p.bounds(1.0, 1.0, 7);
        assert!((lo - 5.0 * 0.5).abs() < 1e-15);
        assert!((hi - 100.0).abs() < 1e-12);
    }
}
