//! Experiment driver: JSON configs, seeded trials run in parallel, pointwise medians, CSV output.
//!
//! A run directory holds:
//!
//! - `config.json`: the canonical config that was run
//! - `long.csv`: `curve,trial,k,metric,value` for every recorded row of every trial
//! - `medians.csv`: `curve,k,metric,median`, pointwise over trials
//! - `summary.csv`: per-curve median iteration counts
//! - `timing.csv`: per-trial CPU seconds (kept apart so the other files are reproducible)
//! - `errors.csv`: aborted trials
//! - `traces/<instance>__<curve>.csv`: the trial-0 trace with its audit footer
//!
//! Curves are labelled `<instance>/<curve>`. Trial `t` uses seed `base_seed + t` for the sampler
//! and `spec.seed + base_seed + t` for the instance.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deviation::Problem;
use crate::diagnostics::audit_run;
use crate::error::{Error, Result};
use crate::instances::{gen_lfp, gen_sfp, LfpSpec, SfpSpec};
use crate::kernel::Kernel;
use crate::sampling::{optimal_block_size, SamplerConfig, SamplingMode};
use crate::solver::{fmt_num, run, RunRecord, SolverConfig, StepsizeRule, StopReason};
use crate::stepsize::{DecmSpsParams, Schedule};

pub const DEFAULT_TRIALS: usize = 50;
pub const DEFAULT_RECORD_EVERY: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 20_000;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const METRICS: [&str; 5] = ["rel_error", "residual", "rel_residual", "t", "l_adapt"];
const PLOT_METRICS: [&str; 2] = ["rel_error", "residual"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LfpParams,
    LfpBlocksize,
    LfpCompare,
    SfpNoise,
    Custom,
}

/// A named generator spec; exactly one of `lfp` and `sfp` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lfp: Option<LfpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sfp: Option<SfpSpec>,
}

impl InstanceConfig {
    pub fn lfp(name: &str, spec: LfpSpec) -> Self {
        Self { name: name.into(), lfp: Some(spec), sfp: None }
    }

    pub fn sfp(name: &str, spec: SfpSpec) -> Self {
        Self { name: name.into(), lfp: None, sfp: Some(spec) }
    }

    /// Number of constraints (rows for LFP, blocks for SFP).
    pub fn num_constraints(&self) -> usize {
        match (&self.lfp, &self.sfp) {
            (Some(l), _) => l.m,
            (_, Some(s)) => s.m,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauKeyword {
    /// `floor(m / sigma_max(A)^2)`, computed per generated instance.
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tau {
    Fixed(usize),
    Keyword(TauKeyword),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    pub name: String,
    /// Elastic net with the experiment `lambda` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Kernel>,
    pub stepsize: StepsizeRule,
    #[serde(default)]
    pub sampling: SamplingMode,
    pub tau: Tau,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_rel_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_batch_grad: Option<f64>,
    /// Instance names this curve runs on; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<String>>,
}

fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}

impl CurveConfig {
    fn new(name: &str, kernel: Option<Kernel>, stepsize: StepsizeRule, tau: Tau) -> Self {
        Self {
            name: name.into(),
            kernel,
            stepsize,
            sampling: SamplingMode::UniformNoReplacement,
            tau,
            max_iters: DEFAULT_MAX_ITERS,
            tol_rel_err: None,
            tol_batch_grad: None,
            instances: None,
        }
    }

    fn runs_on(&self, instance: &str) -> bool {
        self.instances.as_ref().is_none_or(|v| v.iter().any(|i| i == instance))
    }

    /// Solver config for one trial; `tau` must already be resolved.
    pub fn solver_config(&self, lambda: f64, record_every: usize, tau: usize, seed: u64) -> SolverConfig {
        let kernel = self.kernel.unwrap_or(Kernel::elastic_net(lambda));
        let mut cfg = SolverConfig::new(kernel, self.stepsize, SamplerConfig { mode: self.sampling, tau, seed });
        cfg.max_iters = self.max_iters;
        cfg.tol_rel_err = self.tol_rel_err;
        cfg.tol_batch_grad = self.tol_batch_grad;
        cfg.record_every = record_every;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub trials: usize,
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub lambda: f64,
    pub record_every: usize,
    pub instances: Vec<InstanceConfig>,
    pub curves: Vec<CurveConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Option<ExperimentKind>,
    trials: Option<usize>,
    base_seed: Option<u64>,
    output: Option<PathBuf>,
    lambda: Option<f64>,
    record_every: Option<usize>,
    m: Option<usize>,
    n: Option<usize>,
    s: Option<usize>,
    instances: Option<Vec<InstanceConfig>>,
    curves: Option<Vec<CurveConfig>>,
}

const REQUIRED_KEYS: &str = "experiment (plus instances and curves when experiment is \"custom\")";

fn config_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Parses and validates a JSON config, filling defaults and the built-in instances and curves.
///
/// Top-level keys: `experiment`, `trials`, `base_seed`, `output`, `lambda`, `record_every`,
/// `instances`, `curves`, and the LFP shorthand `m`, `n`, `s` which replaces the built-in
/// instance list by a single `<m>x<n>` instance.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    if text.trim().is_empty() {
        return Err(config_err(format!("empty document; required keys: {REQUIRED_KEYS}")));
    }
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), msg: e.to_string() })?;
    let experiment = raw
        .experiment
        .ok_or_else(|| config_err(format!("missing key `experiment`; required keys: {REQUIRED_KEYS}")))?;
    let lambda = raw.lambda.unwrap_or(DEFAULT_LAMBDA);

    let shorthand = raw.m.is_some() || raw.n.is_some() || raw.s.is_some();
    let instances = match (raw.instances, shorthand) {
        (Some(_), true) => return Err(config_err("keys `m`/`n`/`s` cannot be combined with `instances`")),
        (Some(v), false) => v,
        (None, true) => {
            if matches!(experiment, ExperimentKind::SfpNoise) {
                return Err(config_err("keys `m`/`n`/`s` describe an LFP instance; sfp_noise needs `instances`"));
            }
            let (Some(m), Some(n)) = (raw.m, raw.n) else {
                return Err(config_err("shorthand needs both `m` and `n`"));
            };
            vec![InstanceConfig::lfp(&format!("{m}x{n}"), LfpSpec::new(m, n, raw.s.unwrap_or(20), 0))]
        }
        (None, false) => builtin_instances(experiment)
            .ok_or_else(|| config_err("custom experiments need `instances`"))?,
    };
    let curves = match raw.curves {
        Some(v) => v,
        None => builtin_curves(experiment).ok_or_else(|| config_err("custom experiments need `curves`"))?,
    };
    let mut cfg = ExperimentConfig {
        experiment,
        trials: raw.trials.unwrap_or(DEFAULT_TRIALS),
        base_seed: raw.base_seed.unwrap_or(0),
        output: raw.output,
        lambda,
        record_every: raw.record_every.unwrap_or(DEFAULT_RECORD_EVERY),
        instances,
        curves,
    };
    for c in &mut cfg.curves {
        c.kernel.get_or_insert(Kernel::elastic_net(lambda));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '='))
}

impl ExperimentConfig {
    /// The built-in config for `kind` with default trials and seed.
    pub fn builtin(kind: ExperimentKind) -> Result<Self> {
        parse_config(&format!("{{\"experiment\": {}}}", serde_json::to_string(&kind).expect("enum serializes")))
    }

    /// Pretty JSON that parses back to an equal config.
    pub fn to_canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(config_err("`trials` must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(config_err("`record_every` must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err("`lambda` must be finite and nonnegative"));
        }
        if self.instances.is_empty() || self.curves.is_empty() {
            return Err(config_err("`instances` and `curves` must be nonempty"));
        }
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            let ctx = |e: Error| config_err(format!("instance `{}`: {e}", inst.name));
            if !safe_name(&inst.name) {
                return Err(config_err(format!("instance name `{}` must use [A-Za-z0-9._=-]", inst.name)));
            }
            if !seen.insert(inst.name.as_str()) {
                return Err(config_err(format!("duplicate instance `{}`", inst.name)));
            }
            match (&inst.lfp, &inst.sfp) {
                (Some(l), None) => l.validate().map_err(ctx)?,
                (None, Some(s)) => s.validate().map_err(ctx)?,
                _ => return Err(config_err(format!("instance `{}` needs exactly one of `lfp`, `sfp`", inst.name))),
            }
        }
        let mut curve_names = BTreeSet::new();
        for c in &self.curves {
            if !safe_name(&c.name) {
                return Err(config_err(format!("curve name `{}` must use [A-Za-z0-9._=-]", c.name)));
            }
            if !curve_names.insert(c.name.as_str()) {
                return Err(config_err(format!("duplicate curve `{}`", c.name)));
            }
            let ctx = |e: Error| config_err(format!("curve `{}`: {e}", c.name));
            if let Some(list) = &c.instances {
                if let Some(bad) = list.iter().find(|i| !seen.contains(i.as_str())) {
                    return Err(config_err(format!("curve `{}` names unknown instance `{bad}`", c.name)));
                }
            }
            c.solver_config(self.lambda, self.record_every, 1, 0).validate().map_err(ctx)?;
            let mut used = false;
            for inst in self.instances.iter().filter(|i| c.runs_on(&i.name)) {
                used = true;
                let m = inst.num_constraints();
                match c.tau {
                    Tau::Fixed(t) if t == 0 || t > m => {
                        return Err(config_err(format!(
                            "curve `{}`: tau = {t} out of range for instance `{}` with {m} constraints",
                            c.name, inst.name
                        )));
                    }
                    Tau::Keyword(TauKeyword::Optimal) if inst.lfp.is_none() => {
                        return Err(config_err(format!(
                            "curve `{}`: tau = \"optimal\" needs an LFP instance, `{}` is SFP",
                            c.name, inst.name
                        )));
                    }
                    _ => {}
                }
            }
            if !used {
                return Err(config_err(format!("curve `{}` runs on no instance", c.name)));
            }
        }
        Ok(())
    }

    /// `(instance index, curve index)` pairs in output order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, inst) in self.instances.iter().enumerate() {
            for (c, curve) in self.curves.iter().enumerate() {
                if curve.runs_on(&inst.name) {
                    out.push((i, c));
                }
            }
        }
        out
    }
}

fn builtin_instances(kind: ExperimentKind) -> Option<Vec<InstanceConfig>> {
    let lfp = |m: usize, n: usize| InstanceConfig::lfp(&format!("{m}x{n}"), LfpSpec::new(m, n, 20, 0));
    Some(match kind {
        ExperimentKind::LfpParams => vec![lfp(400, 100), lfp(800, 200)],
        ExperimentKind::LfpBlocksize => vec![lfp(400, 100)],
        ExperimentKind::LfpCompare => vec![lfp(500, 200), lfp(1000, 200), lfp(1000, 500), lfp(2000, 200)],
        ExperimentKind::SfpNoise => {
            let mut v = Vec::new();
            for sigma in [0.01, 0.1] {
                for consistent in [true, false] {
                    let tag = if consistent { "consistent" } else { "inconsistent" };
                    let spec = SfpSpec { total_rows: 800, m: 80, n: 200, xi: 10, s: 20, sigma, consistent, seed: 0 };
                    v.push(InstanceConfig::sfp(&format!("sigma{sigma}_{tag}"), spec));
                }
            }
            v
        }
        ExperimentKind::Custom => return None,
    })
}

fn decmsps(c: f64, gamma_b: f64) -> StepsizeRule {
    StepsizeRule::Decmsps(DecmSpsParams { c, gamma_b, schedule: Schedule::Constant })
}

const EXACT: StepsizeRule = StepsizeRule::ExactProjective { tol: crate::stepsize::EXACT_TOL };

fn builtin_curves(kind: ExperimentKind) -> Option<Vec<CurveConfig>> {
    let with_tol = |mut c: CurveConfig| {
        c.tol_rel_err = Some(1e-10);
        c
    };
    Some(match kind {
        ExperimentKind::LfpParams => {
            let mut v = Vec::new();
            for c in [0.1, 0.2, 0.5, 1.0] {
                v.push(with_tol(CurveConfig::new(&format!("decmsps_c{c}"), None, decmsps(c, 100.0), Tau::Fixed(50))));
            }
            for g in [2.0, 20.0, 50.0, 100.0] {
                v.push(with_tol(CurveConfig::new(&format!("decmsps_gb{g}"), None, decmsps(0.2, g), Tau::Fixed(50))));
            }
            v
        }
        ExperimentKind::LfpBlocksize => {
            let mut v = Vec::new();
            for (rule_name, rule) in
                [("decmsps", decmsps(0.5, 100.0)), ("block", StepsizeRule::BlockAdaptive), ("exact", EXACT)]
            {
                for (tau_name, tau) in [
                    ("20", Tau::Fixed(20)),
                    ("100", Tau::Fixed(100)),
                    ("200", Tau::Fixed(200)),
                    ("opt", Tau::Keyword(TauKeyword::Optimal)),
                ] {
                    let mut c = with_tol(CurveConfig::new(&format!("{rule_name}_tau{tau_name}"), None, rule, tau));
                    c.sampling = SamplingMode::Partition;
                    v.push(c);
                }
            }
            v
        }
        ExperimentKind::LfpCompare => vec![
            with_tol(CurveConfig::new("sbp_block", Some(Kernel::Euclidean), StepsizeRule::BlockAdaptive, Tau::Fixed(20))),
            with_tol(CurveConfig::new("sbbp_block", None, StepsizeRule::BlockAdaptive, Tau::Fixed(20))),
            with_tol(CurveConfig::new("sbbp_exact", None, EXACT, Tau::Fixed(20))),
            with_tol(CurveConfig::new("sbbp_decmsps", None, decmsps(0.2, 100.0), Tau::Fixed(20))),
        ],
        ExperimentKind::SfpNoise => {
            let only = |mut c: CurveConfig, consistent: bool| {
                let tag = if consistent { "consistent" } else { "inconsistent" };
                c.instances = Some(vec![format!("sigma0.01_{tag}"), format!("sigma0.1_{tag}")]);
                c
            };
            vec![
                CurveConfig::new("rbp_exact", None, EXACT, Tau::Fixed(1)),
                CurveConfig::new("sbbp_block", None, StepsizeRule::BlockAdaptive, Tau::Fixed(20)),
                CurveConfig::new("sbbp_exact", None, EXACT, Tau::Fixed(20)),
                only(CurveConfig::new("sbbp_decmsps", None, decmsps(0.2, 100.0), Tau::Fixed(20)), true),
                only(CurveConfig::new("sbbp_decmsps_c0.1", None, decmsps(0.1, 100.0), Tau::Fixed(20)), false),
            ]
        }
        ExperimentKind::Custom => return None,
    })
}

/// A generated instance with its reference point.
pub struct Generated {
    pub problem: Problem,
    pub xhat: Array1<f64>,
    /// Whether `xhat` is known to be feasible.
    pub feasible_reference: bool,
}

pub fn generate_instance(inst: &InstanceConfig, seed_offset: u64) -> Result<Generated> {
    match (&inst.lfp, &inst.sfp) {
        (Some(spec), _) => {
            let spec = LfpSpec { seed: spec.seed.wrapping_add(seed_offset), ..spec.clone() };
            let (p, xhat) = gen_lfp(&spec)?;
            Ok(Generated { problem: p.into(), xhat, feasible_reference: true })
        }
        (_, Some(spec)) => {
            let spec = SfpSpec { seed: spec.seed.wrapping_add(seed_offset), ..spec.clone() };
            let g = gen_sfp(&spec)?;
            Ok(Generated { problem: g.problem.into(), xhat: g.xhat, feasible_reference: spec.consistent })
        }
        _ => Err(config_err(format!("instance `{}` has no spec", inst.name))),
    }
}

fn resolve_tau(tau: Tau, problem: &Problem) -> Result<usize> {
    match (tau, problem) {
        (Tau::Fixed(t), _) => Ok(t),
        (Tau::Keyword(TauKeyword::Optimal), Problem::Lfp(p)) => optimal_block_size(p.matrix().view()),
        (Tau::Keyword(TauKeyword::Optimal), Problem::Sfp(_)) => {
            Err(config_err("tau = \"optimal\" is defined for LFP instances only"))
        }
    }
}

struct TrialOutput {
    pair: usize,
    trial: usize,
    outcome: std::result::Result<RunRecord, String>,
    cpu_seconds: f64,
    audit: Vec<String>,
}

/// Per-curve line of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub curve: String,
    pub trials: usize,
    pub converged: usize,
    pub aborted: usize,
    /// Median of `iterations_used` over completed trials.
    pub median_iters: Option<f64>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbortedTrial {
    pub curve: String,
    pub trial: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub summary: Vec<SummaryRow>,
    pub aborted: Vec<AbortedTrial>,
}

/// Median; the mean of the two middle values for even counts. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[h] } else { 0.5 * (v[h - 1] + v[h]) })
}

/// Pointwise medians over trials at the union of recorded `k`.
///
/// Each trace is a `(k, value)` list sorted by `k`. At a given `k` a trial contributes its last
/// value at or before `k`, so trials that stopped early carry their final value forward.
pub fn pointwise_medians(traces: &[Vec<(usize, f64)>]) -> Vec<(usize, f64)> {
    let ks: BTreeSet<usize> = traces.iter().flatten().map(|&(k, _)| k).collect();
    let mut cursors = vec![0usize; traces.len()];
    let mut out = Vec::with_capacity(ks.len());
    let mut vals = Vec::with_capacity(traces.len());
    for k in ks {
        vals.clear();
        for (tr, cur) in traces.iter().zip(cursors.iter_mut()) {
            while *cur < tr.len() && tr[*cur].0 <= k {
                *cur += 1;
            }
            if *cur > 0 {
                vals.push(tr[*cur - 1].1);
            }
        }
        if let Some(m) = median(&vals) {
            out.push((k, m));
        }
    }
    out
}

fn metric_trace(rec: &RunRecord, metric: &str) -> Vec<(usize, f64)> {
    rec.rows
        .iter()
        .filter_map(|r| {
            let v = match metric {
                "rel_error" => r.rel_error,
                "residual" => Some(r.residual),
                "rel_residual" => r.rel_residual,
                "t" => r.t,
                "l_adapt" => r.l_adapt,
                _ => None,
            };
            v.map(|v| (r.k, v))
        })
        .collect()
}

fn run_job(cfg: &ExperimentConfig, pairs: &[(usize, usize)], inst: usize, trial: usize) -> Vec<TrialOutput> {
    let seed = cfg.base_seed.wrapping_add(trial as u64);
    let targets: Vec<usize> = (0..pairs.len()).filter(|&p| pairs[p].0 == inst).collect();
    let generated = generate_instance(&cfg.instances[inst], seed);
    targets
        .into_iter()
        .map(|pair| {
            let start = Instant::now();
            let curve = &cfg.curves[pairs[pair].1];
            let result = generated.as_ref().map_err(|e| format!("instance generation failed: {e}")).and_then(|g| {
                let tau = resolve_tau(curve.tau, &g.problem).map_err(|e| e.to_string())?;
                let sc = curve.solver_config(cfg.lambda, cfg.record_every, tau, seed);
                let rec = run(&sc, &g.problem, Some(&g.xhat)).map_err(|e| e.to_string())?;
                let audit = if trial == 0 {
                    let reference = g.feasible_reference.then_some(&g.xhat);
                    let mut lines = vec![format!("tau {tau}")];
                    lines.extend(audit_run(&rec, &sc, &g.problem, reference).lines());
                    lines.extend(rec.warnings.iter().map(|w| format!("warning {w}")));
                    lines
                } else {
                    Vec::new()
                };
                Ok((rec, audit))
            });
            let cpu_seconds = start.elapsed().as_secs_f64();
            let (outcome, audit) = match result {
                Ok((r, a)) => (Ok(r), a),
                Err(e) => (Err(e), Vec::new()),
            };
            TrialOutput { pair, trial, outcome, cpu_seconds, audit }
        })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Runs every trial of every curve and writes the run directory.
///
/// Trials run on a rayon pool of `threads` workers (the global pool when `None`); results are
/// gathered in order and written by the calling thread, so the files do not depend on the
/// thread count. A failed trial is recorded in `errors.csv` and the rest continue.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, threads: Option<usize>) -> Result<ExperimentOutcome> {
    config.validate()?;
    let pairs = config.pairs();
    let jobs: Vec<(usize, usize)> =
        (0..config.instances.len()).flat_map(|i| (0..config.trials).map(move |t| (i, t))).collect();
    let work = || -> Vec<TrialOutput> {
        jobs.par_iter().flat_map_iter(|&(i, t)| run_job(config, &pairs, i, t)).collect()
    };
    let mut outputs = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config_err(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    outputs.sort_by_key(|o| (o.pair, o.trial));

    fs::create_dir_all(out_dir.join("traces"))?;
    fs::write(out_dir.join("config.json"), config.to_canonical() + "\n")?;

    let label = |pair: usize| {
        let (i, c) = pairs[pair];
        format!("{}/{}", config.instances[i].name, config.curves[c].name)
    };

    let mut long = csv_writer(&out_dir.join("long.csv"))?;
    long.write_record(["curve", "trial", "k", "metric", "value"])?;
    let mut timing = csv_writer(&out_dir.join("timing.csv"))?;
    timing.write_record(["curve", "trial", "cpu_seconds"])?;
    let mut errors = csv_writer(&out_dir.join("errors.csv"))?;
    errors.write_record(["curve", "trial", "error"])?;
    let mut medians = csv_writer(&out_dir.join("medians.csv"))?;
    medians.write_record(["curve", "k", "metric", "median"])?;

    let mut summary = Vec::new();
    let mut aborted = Vec::new();
    for (pair, chunk) in outputs.chunk_by(|a, b| a.pair == b.pair).map(|c| (c[0].pair, c)) {
        let name = label(pair);
        let mut iters = Vec::new();
        let mut converged = 0;
        let mut n_aborted = 0;
        for o in chunk {
            timing.write_record([name.clone(), o.trial.to_string(), format!("{:.6}", o.cpu_seconds)])?;
            match &o.outcome {
                Ok(rec) => {
                    iters.push(rec.iterations_used as f64);
                    if rec.stop_reason != StopReason::MaxIters {
                        converged += 1;
                    }
                    for metric in METRICS {
                        for (k, v) in metric_trace(rec, metric) {
                            long.write_record([&name, &o.trial.to_string(), &k.to_string(), metric, &fmt_num(v)])?;
                        }
                    }
                    if o.trial == 0 {
                        let (i, c) = pairs[pair];
                        let path = out_dir
                            .join("traces")
                            .join(format!("{}__{}.csv", config.instances[i].name, config.curves[c].name));
                        rec.write_csv(BufWriter::new(File::create(path)?), &o.audit)?;
                    }
                }
                Err(e) => {
                    n_aborted += 1;
                    errors.write_record([name.clone(), o.trial.to_string(), e.clone()])?;
                    aborted.push(AbortedTrial { curve: name.clone(), trial: o.trial, error: e.clone() });
                }
            }
        }
        for metric in METRICS {
            let traces: Vec<Vec<(usize, f64)>> =
                chunk.iter().filter_map(|o| o.outcome.as_ref().ok()).map(|r| metric_trace(r, metric)).collect();
            for (k, m) in pointwise_medians(&traces) {
                medians.write_record([&name, &k.to_string(), metric, &fmt_num(m)])?;
            }
        }
        let status = if n_aborted == chunk.len() {
            "aborted"
        } else if 2 * converged > chunk.len() {
            "ok"
        } else {
            "not_converged"
        };
        summary.push(SummaryRow {
            curve: name,
            trials: chunk.len(),
            converged,
            aborted: n_aborted,
            median_iters: median(&iters),
            status: status.into(),
        });
    }
    long.flush()?;
    timing.flush()?;
    errors.flush()?;
    medians.flush()?;
    write_summary(&out_dir.join("summary.csv"), &summary)?;
    Ok(ExperimentOutcome { summary, aborted })
}

const SUMMARY_HEADER: [&str; 6] = ["curve", "trials", "converged", "aborted", "median_iters", "status"];

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.curve.clone(),
            r.trials.to_string(),
            r.converged.to_string(),
            r.aborted.to_string(),
            r.median_iters.map(|m| m.to_string()).unwrap_or_default(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn malformed(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::InvalidProblem(format!("malformed CSV {}: {msg}", path.display()))
}

/// Reads a `summary.csv` written by [`run_experiment`].
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(malformed(path, "unexpected header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<usize>().map_err(|e| malformed(path, e));
        let median_iters = match &rec[4] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| malformed(path, e))?),
        };
        out.push(SummaryRow {
            curve: rec[0].to_string(),
            trials: num(1)?,
            converged: num(2)?,
            aborted: num(3)?,
            median_iters,
            status: rec[5].to_string(),
        });
    }
    Ok(out)
}

/// Medians from `medians.csv` keyed by `(curve label, metric)`.
pub fn read_medians(path: &Path) -> Result<BTreeMap<(String, String), Vec<(usize, f64)>>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(["curve", "k", "metric", "median"]) {
        return Err(malformed(path, "unexpected header"));
    }
    let mut out: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let k = rec[1].parse::<usize>().map_err(|e| malformed(path, e))?;
        let v = rec[3].parse::<f64>().map_err(|e| malformed(path, e))?;
        out.entry((rec[0].to_string(), rec[2].to_string())).or_default().push((k, v));
    }
    Ok(out)
}

/// Aligned text table of the merged summaries, sorted by curve label.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| a.curve.cmp(&b.curve));
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.curve.clone(),
                r.trials.to_string(),
                r.converged.to_string(),
                r.aborted.to_string(),
                r.median_iters.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
                r.status.clone(),
            ]
        })
        .collect();
    let mut widths = SUMMARY_HEADER.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[&str]| {
        let mut s = String::new();
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i == 0 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("  {c:>w$}"));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = String::from("# median_iters over completed trials; curves carry their final value forward\n");
    out.push_str(&line(&SUMMARY_HEADER));
    for row in &cells {
        out.push_str(&line(&row.each_ref().map(String::as_str)));
    }
    out
}

/// Merges the summaries of the run directories into one table and writes plot data.
///
/// Each directory gets `plot_<instance>_<metric>.csv` files with columns `curve,k,median_value`
/// for relative error and residual.
pub fn report(dirs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for dir in dirs {
        rows.extend(read_summary(&dir.join("summary.csv"))?);
        let medians = read_medians(&dir.join("medians.csv"))?;
        let mut plots: BTreeMap<(String, &str), Vec<(String, usize, f64)>> = BTreeMap::new();
        for ((label, metric), points) in &medians {
            let Some(metric) = PLOT_METRICS.iter().find(|m| *m == metric) else { continue };
            let (inst, curve) = label.split_once('/').ok_or_else(|| malformed(dir, "curve label without `/`"))?;
            let entry = plots.entry((inst.to_string(), metric)).or_default();
            entry.extend(points.iter().map(|&(k, v)| (curve.to_string(), k, v)));
        }
        for ((inst, metric), points) in plots {
            let mut w = csv_writer(&dir.join(format!("plot_{inst}_{metric}.csv")))?;
            w.write_record(["curve", "k", "median_value"])?;
            for (curve, k, v) in points {
                w.write_record([curve, k.to_string(), fmt_num(v)])?;
            }
            w.flush()?;
        }
    }
    Ok(render_table(&rows))
}
