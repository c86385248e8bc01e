//! Checks of the theory against concrete problems and run traces.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::deviation::{ConstraintKind, LfpProblem, Problem};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{cgls, norm, singular_values};
use crate::sampling::{Sampler, SamplerConfig};
use crate::solver::{RunRecord, SolverConfig, StepsizeRule};

/// Largest column count accepted by [`eta_constant`].
pub const ETA_MAX_COLS: usize = 12;
/// Singular values below this fraction of the largest one count as zero.
const RANK_TOL: f64 = 1e-12;
/// Slack for the stepsize bound audit.
pub const STEP_BOUND_SLACK: f64 = 1e-12;
/// Slack for the descent audit.
pub const DESCENT_SLACK: f64 = 1e-8;

/// Smallest positive singular value of `a`, or `None` for a zero matrix.
fn smallest_positive_singular_value(a: ArrayView2<'_, f64>) -> Option<f64> {
    let sv = singular_values(a);
    let top = sv.last().copied().unwrap_or(0.0);
    if top == 0.0 {
        return None;
    }
    sv.into_iter().find(|&s| s > RANK_TOL * top)
}

/// `eta = s~^2 |x_hat|_min / (|x_hat|_min + 2 lambda)` where `s~` is the smallest positive
/// singular value over all nonzero column submatrices of `a`.
pub fn eta_constant(a: ArrayView2<'_, f64>, xhat: &Array1<f64>, lambda: f64) -> Result<f64> {
    let n = a.ncols();
    if n > ETA_MAX_COLS {
        return Err(Error::DimensionTooLarge { n, max: ETA_MAX_COLS });
    }
    if xhat.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: xhat.len() });
    }
    let xmin = xhat
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min);
    if !xmin.is_finite() {
        return Err(Error::ZeroVector);
    }
    let mut sigma = f64::INFINITY;
    for mask in 1u32..(1u32 << n) {
        let cols: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let sub = a.select(Axis(1), &cols);
        if let Some(s) = smallest_positive_singular_value(sub.view()) {
            sigma = sigma.min(s);
        }
    }
    if !sigma.is_finite() {
        return Err(Error::ZeroMatrix);
    }
    Ok(sigma * sigma * xmin / (xmin + 2.0 * lambda))
}

/// Outcome of [`bdgc_witness_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdgcWitness {
    /// `min_k ||A x_k - b||^2 / D(x_k, x_hat)` over iterates with `D > 0`.
    pub worst_ratio: f64,
    /// `min_k ||A x_k - b||^2 - eta D(x_k, x_hat)`.
    pub worst_slack: f64,
    pub checked: usize,
}

/// Evaluates the growth inequality `||A x - b||^2 >= eta D(x, x_hat)` on stored iterates of a
/// run over an equality system started from `x_0^* = 0`.
pub fn bdgc_witness_check(
    problem: &LfpProblem,
    kernel: &Kernel,
    run: &RunRecord,
    xhat: &Array1<f64>,
    eta: f64,
) -> Result<BdgcWitness> {
    if problem.kinds().iter().any(|k| *k != ConstraintKind::Equality) {
        return Err(Error::IncompatibleRun("inequality rows present".into()));
    }
    let iterates = run
        .iterates
        .as_ref()
        .ok_or_else(|| Error::IncompatibleRun("run did not store iterates".into()))?;
    match iterates.first() {
        Some((0, s)) if s.x_star.iter().all(|v| *v == 0.0) => {}
        _ => return Err(Error::IncompatibleRun("run must start from x_0^* = 0".into())),
    }
    let mut out = BdgcWitness { worst_ratio: f64::INFINITY, worst_slack: f64::INFINITY, checked: 0 };
    for (_, st) in iterates {
        let r = problem.matrix().dot(&st.x) - problem.rhs();
        let lhs = r.dot(&r);
        let d = kernel.bregman_distance(&st.x, &st.x_star, xhat)?;
        out.worst_slack = out.worst_slack.min(lhs - eta * d);
        if d > 0.0 {
            out.worst_ratio = out.worst_ratio.min(lhs / d);
            out.checked += 1;
        }
    }
    Ok(out)
}

/// `c gamma_b >= tau / (12 ln(1 + m))`, inclusive up to a relative `1e-12` for roundoff.
pub fn adaptivity_condition(c: f64, gamma_b: f64, tau: usize, m: usize) -> bool {
    let rhs = tau as f64 / (12.0 * (1.0 + m as f64).ln());
    c * gamma_b > 0.0 && c * gamma_b >= rhs * (1.0 - 1e-12)
}

/// Full-batch gradient descent on `F = (1/m) sum f_i` from zero with step `1/L_max`.
/// Returns the best value seen and the point attaining it.
pub fn inner_optimum_oracle(problem: &Problem, iters: usize) -> (f64, Array1<f64>) {
    let step = 1.0 / problem.lipschitz_max();
    let mut x = Array1::zeros(problem.dim());
    let stacked = match problem {
        Problem::Sfp(p) => Some(p.stacked_matrix()),
        Problem::Lfp(_) => None,
    };
    let value_grad = |x: &Array1<f64>| -> (f64, Array1<f64>) {
        match (problem, &stacked) {
            (Problem::Sfp(p), Some(a)) => sfp_value_grad(p, a, x),
            _ => (problem.full_value(x), problem.full_grad(x)),
        }
    };
    let (mut f, mut g) = value_grad(&x);
    let mut best = (f, x.clone());
    for _ in 0..iters {
        x.scaled_add(-step, &g);
        (f, g) = value_grad(&x);
        if f < best.0 {
            best = (f, x.clone());
        }
    }
    best
}

fn sfp_value_grad(p: &crate::deviation::SfpProblem, a: &Array2<f64>, x: &Array1<f64>) -> (f64, Array1<f64>) {
    let mut r = a.dot(x);
    let mut value = 0.0;
    let mut offset = 0;
    for blk in p.blocks() {
        let rows = blk.center.len();
        let mut seg = r.slice_mut(ndarray::s![offset..offset + rows]);
        seg -= &blk.center;
        let nd = seg.dot(&seg).sqrt();
        if nd <= blk.radius {
            seg.fill(0.0);
        } else {
            seg *= 1.0 - blk.radius / nd;
            value += 0.5 * seg.dot(&seg);
        }
        offset += rows;
    }
    let m = p.num_constraints() as f64;
    (value / m, a.t().dot(&r) / m)
}

/// Monte Carlo estimate of `E[sum_{i in J} w_i f_i(x)]` (with `l* = 0`) over `samples` batches.
pub fn sigma_tau_sq_estimate(problem: &Problem, x: &Array1<f64>, sampler: &SamplerConfig, samples: usize) -> Result<f64> {
    let mut s = Sampler::new(sampler, problem.num_constraints())?;
    let mut total = 0.0;
    for _ in 0..samples {
        total += problem.batch_eval(&s.draw(), x)?.value;
    }
    Ok(total / samples.max(1) as f64)
}

/// `max_k dist(x_k, C) / ||A x_k - b||` for stored iterates of a run on a consistent equality
/// system, with `C = {x : A x = b}`. Iterates with zero residual are skipped.
pub fn hoffman_empirical_ratio(problem: &LfpProblem, run: &RunRecord) -> Result<f64> {
    if problem.kinds().iter().any(|k| *k != ConstraintKind::Equality) {
        return Err(Error::IncompatibleRun("the affine-set ratio needs equality rows".into()));
    }
    let iterates = run
        .iterates
        .as_ref()
        .ok_or_else(|| Error::IncompatibleRun("run did not store iterates".into()))?;
    let a = problem.matrix();
    let mut worst: f64 = 0.0;
    for (_, st) in iterates {
        let r = a.dot(&st.x) - problem.rhs();
        let nr = norm(&r);
        if nr == 0.0 {
            continue;
        }
        // Minimum-norm solution of A d = r, so dist(x, C) = ||d||.
        let (d, _) = cgls(a.view(), &r, 1e-14, 10 * a.ncols().max(a.nrows()));
        worst = worst.max(norm(&d) / nr);
    }
    Ok(worst)
}

/// Result of [`audit_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryAudit {
    /// `None` when the rule is not DecmSPS.
    pub stepsize_bounds_ok: Option<bool>,
    /// `None` unless the rule is projective and a feasible reference is given.
    pub descent_ok: Option<bool>,
    pub max_l_adapt: f64,
    /// Largest Bregman distance to the reference over recorded rows.
    pub max_bregman: Option<f64>,
    /// Largest amount by which any audited inequality failed (negative when all hold strictly).
    pub worst_violation: f64,
    pub worst_iteration: Option<usize>,
    pub checks: usize,
}

impl TheoryAudit {
    pub fn passed(&self) -> bool {
        self.stepsize_bounds_ok != Some(false) && self.descent_ok != Some(false)
    }

    pub fn lines(&self) -> Vec<String> {
        let flag = |f: Option<bool>| match f {
            Some(true) => "ok",
            Some(false) => "violated",
            None => "n/a",
        };
        let mut out = vec![
            format!("stepsize_bounds {}", flag(self.stepsize_bounds_ok)),
            format!("descent {}", flag(self.descent_ok)),
            format!("max_l_adapt {:.16e}", self.max_l_adapt),
            format!("checks {}", self.checks),
            format!("worst_violation {:.16e}", self.worst_violation),
        ];
        if let Some(k) = self.worst_iteration {
            out.push(format!("worst_iteration {k}"));
        }
        if let Some(d) = self.max_bregman {
            out.push(format!("max_bregman {d:.16e}"));
        }
        out
    }
}

struct Tracker {
    worst: f64,
    at: Option<usize>,
    checks: usize,
}

impl Tracker {
    fn see(&mut self, violation: f64, k: usize) {
        self.checks += 1;
        if self.at.is_none() || violation > self.worst {
            self.worst = violation;
            self.at = Some(k);
        }
    }
}

/// Audits a run trace.
///
/// DecmSPS: every recorded step satisfies the two-sided bound
/// `lambda_k L~ <= t_k <= (gamma_b / lambda_0) lambda_k` and steps are nonincreasing, both with
/// relative slack [`STEP_BOUND_SLACK`].
///
/// Projective rules with a feasible `xhat`: for rows `k, k+1` both recorded,
/// `D(x_{k+1}) <= D(x_k) - mu / (2 L_max^2 l_adapt) sum w ||grad f_i||^2 + 1e-8`; across gaps in
/// the record only `D` nonincreasing is checked.
pub fn audit_run(run: &RunRecord, config: &SolverConfig, problem: &Problem, xhat: Option<&Array1<f64>>) -> TheoryAudit {
    let mu = config.kernel.mu();
    let l_max = problem.lipschitz_max();
    let mut tr = Tracker { worst: f64::NEG_INFINITY, at: None, checks: 0 };
    let mut stepsize_bounds_ok = None;
    let mut descent_ok = None;

    if let StepsizeRule::Decmsps(p) = config.stepsize_rule {
        let mut ok = true;
        let mut prev: Option<f64> = None;
        for row in &run.rows {
            let Some(t) = row.t else { continue };
            let (lo, hi) = p.bounds(mu, l_max, row.k);
            let scale = STEP_BOUND_SLACK * hi.max(1.0);
            let mut v = (lo - t).max(t - hi);
            if let Some(tp) = prev {
                v = v.max(t - tp);
            }
            tr.see(v, row.k);
            ok &= v <= scale;
            prev = Some(t);
        }
        stepsize_bounds_ok = Some(ok);
    }

    let breg: Vec<Option<f64>> = match xhat {
        Some(xh) => {
            let k = config.kernel;
            let have = run.rows.iter().all(|r| r.bregman_dist.is_some());
            if have {
                run.rows.iter().map(|r| r.bregman_dist).collect()
            } else {
                // Fall back to stored iterates when the run had no reference.
                let by_k: std::collections::HashMap<usize, f64> = run
                    .iterates
                    .iter()
                    .flatten()
                    .map(|(k_, st)| (*k_, k.bregman_from_dual(&st.x_star, xh)))
                    .collect();
                run.rows.iter().map(|r| by_k.get(&r.k).copied()).collect()
            }
        }
        None => vec![None; run.rows.len()],
    };
    let max_bregman = breg.iter().flatten().copied().reduce(f64::max);

    if config.stepsize_rule.is_projective() && xhat.is_some() {
        let mut ok = true;
        for (j, pair) in run.rows.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            let (Some(da), Some(db)) = (breg[j], breg[j + 1]) else { continue };
            let decrease = match (a.t, a.l_adapt, a.weighted_sq) {
                (Some(_), Some(la), Some(wsq)) if b.k == a.k + 1 && la > 0.0 => {
                    mu / (2.0 * l_max * l_max * la) * wsq
                }
                _ => 0.0,
            };
            let v = db - (da - decrease);
            tr.see(v, a.k);
            ok &= v <= DESCENT_SLACK;
        }
        descent_ok = Some(ok);
    }

    TheoryAudit {
        stepsize_bounds_ok,
        descent_ok,
        max_l_adapt: run.l_adapt_max,
        max_bregman,
        worst_violation: if tr.at.is_some() { tr.worst } else { 0.0 },
        worst_iteration: tr.at,
        checks: tr.checks,
    }
}
