//! The SBBP iteration: sample a batch, pick a stepsize, step the dual iterate, map back to the
//! primal through `grad psi^*`.

use std::io::Write;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::deviation::{MiniBatch, Problem, Residual};
use crate::diagnostics::adaptivity_condition;
use crate::error::{Error, Result};
use crate::kernel::{IterateState, Kernel};
use crate::linalg::norm;
use crate::sampling::{Sampler, SamplerConfig};
use crate::stepsize::{
    self, block_adaptive_step, decmsps_next, exact_projective_step, halfspace, msps_max_step, DecmSpsParams,
    DecmSpsState, EXACT_TOL,
};

fn default_exact_tol() -> f64 {
    EXACT_TOL
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepsizeRule {
    Decmsps(DecmSpsParams),
    ExactProjective {
        #[serde(default = "default_exact_tol")]
        tol: f64,
    },
    BlockAdaptive,
    /// `min{ mu P / c, gamma_b }` with no running minimum; a comparison baseline only.
    MspsMax { c: f64, gamma_b: f64 },
}

impl StepsizeRule {
    pub fn is_projective(&self) -> bool {
        matches!(self, StepsizeRule::ExactProjective { .. } | StepsizeRule::BlockAdaptive)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kernel: Kernel,
    pub stepsize_rule: StepsizeRule,
    pub sampler: SamplerConfig,
    pub max_iters: usize,
    /// Stop once `||x_k - ref|| / ||ref||` drops to this value; needs a reference.
    pub tol_rel_err: Option<f64>,
    /// Stop once the sampled batch gradient norm drops to this value.
    pub tol_batch_grad: Option<f64>,
    pub record_every: usize,
    /// Keep a copy of every recorded iterate pair.
    pub store_iterates: bool,
}

impl SolverConfig {
    pub fn new(kernel: Kernel, stepsize_rule: StepsizeRule, sampler: SamplerConfig) -> Self {
        Self {
            kernel,
            stepsize_rule,
            sampler,
            max_iters: 20_000,
            tol_rel_err: None,
            tol_batch_grad: None,
            record_every: 10,
            store_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.record_every == 0 {
            return bad("record_every must be at least 1".into());
        }
        for (name, tol) in [("tol_rel_err", self.tol_rel_err), ("tol_batch_grad", self.tol_batch_grad)] {
            if let Some(t) = tol {
                if !(t >= 0.0) {
                    return bad(format!("{name} must be nonnegative"));
                }
            }
        }
        if !(self.kernel.lambda() >= 0.0 && self.kernel.lambda().is_finite()) {
            return bad("kernel lambda must be finite and nonnegative".into());
        }
        match self.stepsize_rule {
            StepsizeRule::Decmsps(p) => p.validate(),
            StepsizeRule::ExactProjective { tol } if !(tol > 0.0) => bad("exact step tol must be positive".into()),
            StepsizeRule::MspsMax { c, gamma_b } if !(c > 0.0 && gamma_b > 0.0) => {
                bad("mSPS baseline needs c > 0 and gamma_b > 0".into())
            }
            _ => Ok(()),
        }
    }
}

/// Stepsize rule plus whatever state it carries across iterations.
#[derive(Clone, Debug)]
pub struct StepsizeEngine {
    rule: StepsizeRule,
    decmsps: Option<DecmSpsState>,
    mu: f64,
    l_max: f64,
}

impl StepsizeEngine {
    pub fn new(rule: StepsizeRule, kernel: &Kernel, problem: &Problem) -> Result<Self> {
        let decmsps = match rule {
            StepsizeRule::Decmsps(p) => Some(DecmSpsState::new(p)?),
            _ => None,
        };
        Ok(Self { rule, decmsps, mu: kernel.mu(), l_max: problem.lipschitz_max() })
    }

    pub fn decmsps_state(&self) -> Option<&DecmSpsState> {
        self.decmsps.as_ref()
    }
}

/// What happened in one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub batch_value: f64,
    pub batch_grad_norm: f64,
    /// `sum w ||grad f_i||^2`
    pub weighted_sq: f64,
    pub l_adapt: Option<f64>,
    pub t: Option<f64>,
    pub skipped: bool,
}

/// One SBBP step from `state` on `batch`. A zero batch gradient returns `state` unchanged
/// and marks the step skipped.
pub fn sbbp_step(
    kernel: &Kernel,
    problem: &Problem,
    state: &IterateState,
    batch: &MiniBatch,
    engine: &mut StepsizeEngine,
    k: usize,
) -> Result<(IterateState, StepInfo)> {
    let stats = problem.batch_eval(batch, &state.x)?;
    let g2 = stats.grad_norm_sq();
    if !(stats.value.is_finite() && g2.is_finite() && stats.weighted_sq.is_finite()) {
        return Err(Error::NonFinite { iteration: k });
    }
    let mut info = StepInfo {
        batch_value: stats.value,
        batch_grad_norm: g2.sqrt(),
        weighted_sq: stats.weighted_sq,
        l_adapt: None,
        t: None,
        skipped: false,
    };
    if g2 == 0.0 {
        info.skipped = true;
        return Ok((state.clone(), info));
    }
    let la = stepsize::l_adapt(&stats)?;
    info.l_adapt = Some(la);
    let t = match engine.rule {
        StepsizeRule::Decmsps(_) => {
            let st = engine.decmsps.as_mut().expect("DecmSPS state");
            decmsps_next(st, &stats, engine.mu, k)?
        }
        StepsizeRule::ExactProjective { tol } => {
            let hs = halfspace(&state.x, &stats)?;
            let hint = 2.0 * engine.mu / (engine.l_max * la);
            exact_projective_step(kernel, &state.x_star, &hs, tol, Some(hint))?
        }
        StepsizeRule::BlockAdaptive => block_adaptive_step(engine.mu, engine.l_max, la)?,
        StepsizeRule::MspsMax { c, gamma_b } => msps_max_step(&stats, engine.mu, c, gamma_b)?,
    };
    info.t = Some(t);
    let mut x_star = state.x_star.clone();
    x_star.scaled_add(-t, &stats.grad);
    if !x_star.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { iteration: k });
    }
    let x = kernel.grad_conj(&x_star);
    Ok((IterateState { x, x_star }, info))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxIters,
    RelErr,
    BatchGrad,
}

/// Metrics of `x_k` plus the step taken from it. The final row carries no step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub k: usize,
    pub t: Option<f64>,
    pub batch_value: Option<f64>,
    pub batch_grad_norm: Option<f64>,
    pub l_adapt: Option<f64>,
    pub weighted_sq: Option<f64>,
    pub skipped: bool,
    pub rel_error: Option<f64>,
    pub residual: f64,
    pub rel_residual: Option<f64>,
    pub bregman_dist: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    pub final_state: IterateState,
    pub iterations_used: usize,
    pub stop_reason: StopReason,
    /// `(k, state_k)` at every recorded row when requested.
    pub iterates: Option<Vec<(usize, IterateState)>>,
    /// Running maximum of `l_adapt` over every non-skipped step.
    pub l_adapt_max: f64,
    pub warnings: Vec<String>,
}

pub const CSV_HEADER: [&str; 8] = [
    "k",
    "t",
    "batch_value",
    "batch_grad_norm",
    "l_adapt",
    "rel_error",
    "residual",
    "bregman_dist",
];

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

impl RunRecord {
    pub fn final_row(&self) -> &RunRow {
        self.rows.last().expect("a run records at least its final row")
    }

    /// Writes the trace as CSV, then each footer line as `# audit: <line>`.
    pub fn write_csv<W: Write>(&self, out: W, footer: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                fmt_opt(r.t),
                fmt_opt(r.batch_value),
                fmt_opt(r.batch_grad_norm),
                fmt_opt(r.l_adapt),
                fmt_opt(r.rel_error),
                fmt_num(r.residual),
                fmt_opt(r.bregman_dist),
            ])?;
        }
        w.flush()?;
        let mut out = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        for line in footer {
            writeln!(out, "# audit: {line}")?;
        }
        Ok(())
    }
}

/// `||x - reference|| / ||reference||`.
pub fn rel_error(x: &Array1<f64>, reference: &Array1<f64>) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(Error::DimensionMismatch { expected: reference.len(), found: x.len() });
    }
    let nr = norm(reference);
    if nr == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(norm(&(x - reference)) / nr)
}

pub fn positive_residual(problem: &Problem, x: &Array1<f64>) -> Residual {
    problem.positive_residual(x)
}

/// Runs SBBP from `x_0 = x_0^* = 0` until a stopping test fires.
///
/// Tests are evaluated every iteration in the order: relative error (when `reference` is given
/// and a tolerance is set), iteration cap, sampled batch gradient norm.
pub fn run(config: &SolverConfig, problem: &Problem, reference: Option<&Array1<f64>>) -> Result<RunRecord> {
    run_observed(config, problem, reference, |_, _, _| {})
}

/// As [`run`], also calling `observe(k, state_before, step)` for every step taken.
pub fn run_observed<F>(
    config: &SolverConfig,
    problem: &Problem,
    reference: Option<&Array1<f64>>,
    mut observe: F,
) -> Result<RunRecord>
where
    F: FnMut(usize, &IterateState, &StepInfo),
{
    config.validate()?;
    let n = problem.dim();
    if let Some(r) = reference {
        if r.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: r.len() });
        }
        if norm(r) == 0.0 {
            return Err(Error::ZeroReference);
        }
    }
    let kernel = config.kernel;
    let mut sampler = Sampler::new(&config.sampler, problem.num_constraints())?;
    let mut engine = StepsizeEngine::new(config.stepsize_rule, &kernel, problem)?;

    let mut warnings = Vec::new();
    if let (StepsizeRule::Decmsps(p), Problem::Lfp(lfp)) = (config.stepsize_rule, problem) {
        let m = lfp.num_constraints();
        if !adaptivity_condition(p.c, p.gamma_b, config.sampler.tau, m) {
            warnings.push(format!(
                "c*gamma_b = {} is below tau/(12 ln(1+m)); DecmSPS may reduce to a constant step",
                p.c * p.gamma_b
            ));
        }
    }

    let mut state = IterateState::zeros(n);
    let mut rows = Vec::new();
    let mut iterates = config.store_iterates.then(Vec::new);
    let mut l_adapt_max: f64 = 0.0;
    let mut k = 0;

    let metrics = |k: usize, state: &IterateState| -> Result<RunRow> {
        let res = problem.positive_residual(&state.x);
        Ok(RunRow {
            k,
            t: None,
            batch_value: None,
            batch_grad_norm: None,
            l_adapt: None,
            weighted_sq: None,
            skipped: false,
            rel_error: reference.map(|r| rel_error(&state.x, r)).transpose()?,
            residual: res.residual,
            rel_residual: res.relative,
            bregman_dist: reference.map(|r| kernel.bregman_from_dual(&state.x_star, r)),
        })
    };

    let stop_reason = loop {
        if let (Some(tol), Some(r)) = (config.tol_rel_err, reference) {
            if rel_error(&state.x, r)? <= tol {
                rows.push(metrics(k, &state)?);
                break StopReason::RelErr;
            }
        }
        if k == config.max_iters {
            rows.push(metrics(k, &state)?);
            break StopReason::MaxIters;
        }
        let batch = sampler.draw();
        if let Some(tol) = config.tol_batch_grad {
            let stats = problem.batch_eval(&batch, &state.x)?;
            let gn = stats.grad_norm_sq().sqrt();
            if gn <= tol {
                let mut row = metrics(k, &state)?;
                row.batch_value = Some(stats.value);
                row.batch_grad_norm = Some(gn);
                rows.push(row);
                break StopReason::BatchGrad;
            }
        }
        let (next, info) = sbbp_step(&kernel, problem, &state, &batch, &mut engine, k)?;
        observe(k, &state, &info);
        if let Some(la) = info.l_adapt {
            l_adapt_max = l_adapt_max.max(la);
        }
        if k % config.record_every == 0 {
            let mut row = metrics(k, &state)?;
            row.t = info.t;
            row.batch_value = Some(info.batch_value);
            row.batch_grad_norm = Some(info.batch_grad_norm);
            row.l_adapt = info.l_adapt;
            row.weighted_sq = Some(info.weighted_sq);
            row.skipped = info.skipped;
            rows.push(row);
            if let Some(it) = iterates.as_mut() {
                it.push((k, state.clone()));
            }
        }
        state = next;
        k += 1;
    };
    if let Some(it) = iterates.as_mut() {
        it.push((k, state.clone()));
    }

    Ok(RunRecord {
        rows,
        final_state: state,
        iterations_used: k,
        stop_reason,
        iterates,
        l_adapt_max,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deviation::{ConstraintKind, LfpProblem};
    use crate::sampling::SamplingMode;
    use ndarray::array;

    fn single(a: Array1<f64>, b: f64, kind: ConstraintKind) -> Problem {
        let n = a.len();
        LfpProblem::new(a.into_shape_with_order((1, n)).unwrap(), array![b], vec![kind])
            .unwrap()
            .into()
    }

    fn cfg(kernel: Kernel, rule: StepsizeRule, tau: usize) -> SolverConfig {
        let mut c = SolverConfig::new(
            kernel,
            rule,
            SamplerConfig { mode: SamplingMode::UniformNoReplacement, tau, seed: 1 },
        );
        c.record_every = 1;
        c
    }

    const EXACT: StepsizeRule = StepsizeRule::ExactProjective { tol: EXACT_TOL };

    #[test]
    fn exact_step_projects_single_row() {
        let p = single(array![1.0, 0.0], 0.0, ConstraintKind::Equality);
        let state = IterateState { x: array![2.0, 0.0], x_star: array![2.0, 0.0] };
        let mut eng = StepsizeEngine::new(EXACT, &Kernel::Euclidean, &p).unwrap();
        let (next, info) =
            sbbp_step(&Kernel::Euclidean, &p, &state, &MiniBatch::uniform(vec![0]), &mut eng, 0).unwrap();
        assert_eq!(next.x, array![0.0, 0.0]);
        assert_eq!(info.t, Some(1.0));
    }

    #[test]
    fn feasible_batch_is_skipped() {
        let p = single(array![1.0, 0.0], 0.0, ConstraintKind::Inequality);
        let state = IterateState { x: array![-1.0, 0.0], x_star: array![-1.0, 0.0] };
        let rule = StepsizeRule::Decmsps(DecmSpsParams::default());
        let mut eng = StepsizeEngine::new(rule, &Kernel::Euclidean, &p).unwrap();
        let before = eng.decmsps_state().cloned();
        let (next, info) =
            sbbp_step(&Kernel::Euclidean, &p, &state, &MiniBatch::uniform(vec![0]), &mut eng, 0).unwrap();
        assert!(info.skipped && info.t.is_none());
        assert_eq!(next, state);
        assert_eq!(eng.decmsps_state().cloned(), before);
    }

    #[test]
    fn elastic_net_dual_step() {
        // f = 0.5 (x_0 - 3)^2 at x = 0 has gradient [-3, 0]; block adaptive gives t = 1.
        let p = single(array![1.0, 0.0], 3.0, ConstraintKind::Equality);
        let en = Kernel::elastic_net(1.0);
        let mut eng = StepsizeEngine::new(StepsizeRule::BlockAdaptive, &en, &p).unwrap();
        let (next, info) =
            sbbp_step(&en, &p, &IterateState::zeros(2), &MiniBatch::uniform(vec![0]), &mut eng, 0).unwrap();
        assert_eq!(info.t, Some(1.0));
        assert_eq!(next.x_star, array![3.0, 0.0]);
        assert_eq!(next.x, array![2.0, 0.0]);
    }

    #[test]
    fn max_iters_bounds() {
        let p = single(array![1.0], 0.5, ConstraintKind::Equality);
        let mut c = cfg(Kernel::Euclidean, StepsizeRule::BlockAdaptive, 1);
        c.max_iters = 0;
        assert!(matches!(run(&c, &p, None), Err(Error::InvalidConfig(_))));
        c.max_iters = 1;
        let rec = run(&c, &p, None).unwrap();
        assert_eq!(rec.iterations_used, 1);
        assert_eq!(rec.stop_reason, StopReason::MaxIters);
        assert_eq!(rec.rows.len(), 2);
    }

    #[test]
    fn one_by_one_converges_in_one_step() {
        let p = single(array![1.0], 0.5, ConstraintKind::Equality);
        let mut c = cfg(Kernel::Euclidean, EXACT, 1);
        c.tol_rel_err = Some(1e-10);
        let rec = run(&c, &p, Some(&array![0.5])).unwrap();
        assert_eq!(rec.iterations_used, 1);
        assert_eq!(rec.stop_reason, StopReason::RelErr);
        assert_eq!(rec.final_row().rel_error, Some(0.0));
    }

    #[test]
    fn batch_grad_stop() {
        let p = single(array![1.0], 0.5, ConstraintKind::Equality);
        let mut c = cfg(Kernel::Euclidean, EXACT, 1);
        c.tol_batch_grad = Some(0.0);
        let rec = run(&c, &p, None).unwrap();
        assert_eq!(rec.stop_reason, StopReason::BatchGrad);
        assert_eq!(rec.iterations_used, 1);
    }

    #[test]
    fn rel_error_examples() {
        let r = array![1.0, -2.0];
        assert_eq!(rel_error(&r, &r).unwrap(), 0.0);
        assert_eq!(rel_error(&(2.0 * &r), &r).unwrap(), 1.0);
        assert_eq!(rel_error(&array![0.0, 0.0], &r).unwrap(), 1.0);
        assert!(matches!(rel_error(&r, &array![0.0, 0.0]), Err(Error::ZeroReference)));
    }

    #[test]
    fn positive_residual_examples() {
        let p = single(array![1.0], 0.0, ConstraintKind::Inequality);
        assert_eq!(positive_residual(&p, &array![3.0]).residual, 3.0);
        assert_eq!(positive_residual(&p, &array![-1.0]).residual, 0.0);
        let p = single(array![1.0], 0.0, ConstraintKind::Equality);
        assert_eq!(positive_residual(&p, &array![-3.0]).residual, 3.0);
    }

    #[test]
    fn csv_layout() {
        let p = single(array![1.0], 0.5, ConstraintKind::Equality);
        let mut c = cfg(Kernel::Euclidean, EXACT, 1);
        c.max_iters = 2;
        let rec = run(&c, &p, None).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf, &["ok".to_string()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 8);
        assert_eq!(first[0], "0");
        assert_eq!(first[5], "");
        assert!(text.ends_with("# audit: ok\n"));
    }

    #[test]
    fn rule_config_round_trip() {
        for rule in [
            StepsizeRule::Decmsps(DecmSpsParams::default()),
            EXACT,
            StepsizeRule::BlockAdaptive,
            StepsizeRule::MspsMax { c: 0.1, gamma_b: 100.0 },
        ] {
            let s = serde_json::to_string(&rule).unwrap();
            assert_eq!(serde_json::from_str::<StepsizeRule>(&s).unwrap(), rule, "{s}");
        }
        let r: StepsizeRule = serde_json::from_str(r#"{"rule":"decmsps","c":0.1,"gamma_b":100}"#).unwrap();
        assert_eq!(r, StepsizeRule::Decmsps(DecmSpsParams { c: 0.1, gamma_b: 100.0, ..Default::default() }));
    }
}
