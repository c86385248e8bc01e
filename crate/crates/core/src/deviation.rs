//! Deviation functions `f_i` for linear feasibility (LFP) and split feasibility (SFP) problems.
//!
//! Each `f_i` is smooth, convex, nonnegative, and vanishes exactly on the i-th constraint set:
//!
//! - LFP row: `f_i(x) = 0.5 e(Ax - b)_i^2 / ||a_i||^2` where `e` keeps equality residuals and
//!   clips inequality residuals at zero. Gradient Lipschitz constant 1.
//! - SFP block: `f_i(x) = 0.5 dist(A_i x, Q_i)^2` with `Q_i` a Euclidean ball. Gradient
//!   Lipschitz constant `||A_i||_2^2`.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, norm};

/// Row norms of an LFP matrix must be within this distance of 1.
pub const UNIT_ROW_TOL: f64 = 1e-10;

/// Blocks with at most this many rows or columns get their Lipschitz constant from a full SVD.
const EXACT_SVD_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    Equality,
    Inequality,
}

impl ConstraintKind {
    fn token(self) -> &'static str {
        match self {
            ConstraintKind::Equality => "E",
            ConstraintKind::Inequality => "I",
        }
    }
}

/// The residual map `e`: identity on equality rows, `max(r, 0)` on inequality rows.
pub fn residual_map_e(kinds: &[ConstraintKind], r: &Array1<f64>) -> Result<Array1<f64>> {
    if kinds.len() != r.len() {
        return Err(Error::DimensionMismatch {
            expected: kinds.len(),
            found: r.len(),
        });
    }
    Ok(Array1::from_iter(
        kinds.iter().zip(r.iter()).map(|(&k, &v)| e_component(k, v)),
    ))
}

#[inline]
fn e_component(kind: ConstraintKind, r: f64) -> f64 {
    match kind {
        ConstraintKind::Equality => r,
        ConstraintKind::Inequality => r.max(0.0),
    }
}

/// Euclidean projection onto the ball `{y : ||y - center|| <= radius}`.
pub fn ball_project(center: &Array1<f64>, radius: f64, y: &Array1<f64>) -> Array1<f64> {
    let d = y - center;
    let nd = norm(&d);
    if nd <= radius {
        y.clone()
    } else {
        center + &(d * (radius / nd))
    }
}

/// How [`LfpProblem::with_policy`] treats rows whose norm is not 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RowPolicy {
    Reject,
    #[default]
    Rescale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LfpProblem {
    a: Array2<f64>,
    b: Array1<f64>,
    kinds: Vec<ConstraintKind>,
    row_norm_sq: Array1<f64>,
}

impl LfpProblem {
    pub fn new(a: Array2<f64>, b: Array1<f64>, kinds: Vec<ConstraintKind>) -> Result<Self> {
        Self::with_policy(a, b, kinds, RowPolicy::Rescale)
    }

    /// Builds the problem, rescaling non-unit rows (and the matching entries of `b`) or
    /// rejecting them according to `policy`. Zero rows are always rejected.
    pub fn with_policy(
        mut a: Array2<f64>,
        mut b: Array1<f64>,
        kinds: Vec<ConstraintKind>,
        policy: RowPolicy,
    ) -> Result<Self> {
        let m = a.nrows();
        if b.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: b.len() });
        }
        if kinds.len() != m {
            return Err(Error::DimensionMismatch { expected: m, found: kinds.len() });
        }
        if m == 0 || a.ncols() == 0 {
            return Err(Error::InvalidProblem("empty constraint matrix".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite entry".into()));
        }
        for (i, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
            let nr = row.dot(&row).sqrt();
            if nr == 0.0 {
                return Err(Error::NonUnitRow { row: i, norm: 0.0 });
            }
            if (nr - 1.0).abs() > UNIT_ROW_TOL {
                match policy {
                    RowPolicy::Reject => return Err(Error::NonUnitRow { row: i, norm: nr }),
                    RowPolicy::Rescale => {
                        row /= nr;
                        b[i] /= nr;
                    }
                }
            }
        }
        let row_norm_sq = a.map_axis(Axis(1), |r| r.dot(&r));
        Ok(Self { a, b, kinds, row_norm_sq })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &Array1<f64> {
        &self.b
    }

    pub fn kinds(&self) -> &[ConstraintKind] {
        &self.kinds
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// `e(Ax - b)`.
    pub fn residual(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut r = self.a.dot(x) - &self.b;
        r.iter_mut()
            .zip(self.kinds.iter())
            .for_each(|(v, &k)| *v = e_component(k, *v));
        r
    }

    /// Scaled residual `e(a_i x - b_i) / ||a_i||^2`; the gradient is this times `a_i`.
    #[inline]
    fn scaled_residual(&self, i: usize, x: &Array1<f64>) -> f64 {
        let r = e_component(self.kinds[i], self.a.row(i).dot(x) - self.b[i]);
        r / self.row_norm_sq[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfpBlock {
    pub a: Array2<f64>,
    pub center: Array1<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SfpProblem {
    blocks: Vec<SfpBlock>,
    lipschitz: Vec<f64>,
    n: usize,
    clean_rhs: Option<Array1<f64>>,
}

impl SfpProblem {
    /// Builds the problem and precomputes `L_i = ||A_i||_2^2` for every block.
    pub fn new(blocks: Vec<SfpBlock>) -> Result<Self> {
        let n = blocks
            .first()
            .map(|b| b.a.ncols())
            .ok_or_else(|| Error::InvalidProblem("no blocks".into()))?;
        let mut lipschitz = Vec::with_capacity(blocks.len());
        for (i, blk) in blocks.iter().enumerate() {
            if blk.a.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, found: blk.a.ncols() });
            }
            if blk.center.len() != blk.a.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: blk.a.nrows(),
                    found: blk.center.len(),
                });
            }
            if !(blk.radius >= 0.0 && blk.radius.is_finite()) {
                return Err(Error::InvalidProblem(format!("block {i} has radius {}", blk.radius)));
            }
            let l = block_lipschitz(&blk.a)
                .map_err(|_| Error::InvalidProblem(format!("block {i} has a zero matrix")))?;
            lipschitz.push(l);
        }
        Ok(Self { blocks, lipschitz, n, clean_rhs: None })
    }

    /// Attaches the noiseless right-hand side `b = A x_hat` (stacked over blocks), enabling the
    /// relative residual `||Ax - b|| / ||b||`.
    pub fn with_clean_rhs(mut self, b: Array1<f64>) -> Result<Self> {
        let total: usize = self.blocks.iter().map(|b| b.a.nrows()).sum();
        if b.len() != total {
            return Err(Error::DimensionMismatch { expected: total, found: b.len() });
        }
        self.clean_rhs = Some(b);
        Ok(self)
    }

    pub fn blocks(&self) -> &[SfpBlock] {
        &self.blocks
    }

    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }

    pub fn clean_rhs(&self) -> Option<&Array1<f64>> {
        self.clean_rhs.as_ref()
    }

    pub fn num_constraints(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stacked matrix `[A_1; ...; A_m]`.
    pub fn stacked_matrix(&self) -> Array2<f64> {
        let views: Vec<_> = self.blocks.iter().map(|b| b.a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("blocks share column count")
    }

    /// `A_i x - P_{Q_i}(A_i x)`.
    fn block_residual(&self, i: usize, x: &Array1<f64>) -> Array1<f64> {
        let blk = &self.blocks[i];
        let mut d = blk.a.dot(x) - &blk.center;
        let nd = norm(&d);
        if nd <= blk.radius {
            d.fill(0.0);
        } else {
            d *= 1.0 - blk.radius / nd;
        }
        d
    }
}

fn block_lipschitz(a: &Array2<f64>) -> Result<f64> {
    if a.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    if a.nrows().min(a.ncols()) <= EXACT_SVD_DIM {
        let sv = linalg::singular_values(a.view());
        let top = sv.last().copied().unwrap_or(0.0);
        Ok(top * top)
    } else {
        linalg::spectral_norm_sq(a.view())
    }
}

/// A weighted mini-batch of distinct constraint indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl MiniBatch {
    /// Validates distinctness, range, positivity, and that weights sum to one within 1e-12.
    pub fn new(indices: Vec<usize>, weights: Vec<f64>, m: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        if indices.len() != weights.len() {
            return Err(Error::InvalidBatch("indices and weights differ in length".into()));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange { index: i, len: m });
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidBatch("duplicate index".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidBatch("non-positive weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidBatch(format!("weights sum to {total}")));
        }
        Ok(Self { indices, weights })
    }

    /// Uniform weights `1/|J|`. Indices must already be distinct and in range.
    pub fn uniform(indices: Vec<usize>) -> Self {
        let w = 1.0 / indices.len() as f64;
        let weights = vec![w; indices.len()];
        Self { indices, weights }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Aggregates of one batch at one point, consumed by every stepsize rule.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    /// `sum w_i f_i(x)`
    pub value: f64,
    /// `sum w_i grad f_i(x)`
    pub grad: Array1<f64>,
    /// `sum w_i ||grad f_i(x)||^2`
    pub weighted_sq: f64,
    /// `sum (w_i / L_i) ||grad f_i(x)||^2`
    pub lipschitz_weighted_sq: f64,
    /// Lower bound `l*_J` on `sum w_i f_i`; zero for both families.
    pub lower_bound: f64,
}

impl BatchStats {
    pub fn grad_norm_sq(&self) -> f64 {
        self.grad.dot(&self.grad)
    }
}

/// Positive residual of a point: `||e(Ax - b)||` for LFPs, the norm of block distances for SFPs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub residual: f64,
    /// `||Ax - b|| / ||b||` for SFPs carrying their noiseless right-hand side.
    pub relative: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Problem {
    Lfp(LfpProblem),
    Sfp(SfpProblem),
}

impl From<LfpProblem> for Problem {
    fn from(p: LfpProblem) -> Self {
        Problem::Lfp(p)
    }
}

impl From<SfpProblem> for Problem {
    fn from(p: SfpProblem) -> Self {
        Problem::Sfp(p)
    }
}

impl Problem {
    pub fn num_constraints(&self) -> usize {
        match self {
            Problem::Lfp(p) => p.num_constraints(),
            Problem::Sfp(p) => p.num_constraints(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Lfp(p) => p.dim(),
            Problem::Sfp(p) => p.dim(),
        }
    }

    fn check(&self, i: usize, x: &Array1<f64>) -> Result<()> {
        let m = self.num_constraints();
        if i >= m {
            return Err(Error::IndexOutOfRange { index: i, len: m });
        }
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        Ok(())
    }

    pub fn lipschitz(&self, i: usize) -> f64 {
        match self {
            Problem::Lfp(_) => 1.0,
            Problem::Sfp(p) => p.lipschitz[i],
        }
    }

    /// `L_max = max_i L_i`.
    pub fn lipschitz_max(&self) -> f64 {
        match self {
            Problem::Lfp(_) => 1.0,
            Problem::Sfp(p) => p.lipschitz.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn f_value(&self, i: usize, x: &Array1<f64>) -> Result<f64> {
        self.check(i, x)?;
        Ok(match self {
            Problem::Lfp(p) => {
                let s = p.scaled_residual(i, x);
                0.5 * s * s * p.row_norm_sq[i]
            }
            Problem::Sfp(p) => {
                let r = p.block_residual(i, x);
                0.5 * r.dot(&r)
            }
        })
    }

    pub fn f_grad(&self, i: usize, x: &Array1<f64>) -> Result<Array1<f64>> {
        self.check(i, x)?;
        Ok(match self {
            Problem::Lfp(p) => p.a.row(i).to_owned() * p.scaled_residual(i, x),
            Problem::Sfp(p) => p.blocks[i].a.t().dot(&p.block_residual(i, x)),
        })
    }

    /// One pass over the batch computing every aggregate the stepsize rules need.
    pub fn batch_eval(&self, batch: &MiniBatch, x: &Array1<f64>) -> Result<BatchStats> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: x.len() });
        }
        let m = self.num_constraints();
        let mut stats = BatchStats {
            value: 0.0,
            grad: Array1::zeros(self.dim()),
            weighted_sq: 0.0,
            lipschitz_weighted_sq: 0.0,
            lower_bound: 0.0,
        };
        for (&i, &w) in batch.indices.iter().zip(batch.weights.iter()) {
            if i >= m {
                return Err(Error::IndexOutOfRange { index: i, len: m });
            }
            match self {
                Problem::Lfp(p) => {
                    let s = p.scaled_residual(i, x);
                    if s == 0.0 {
                        continue;
                    }
                    let gsq = s * s * p.row_norm_sq[i];
                    stats.value += w * 0.5 * gsq;
                    stats.grad.scaled_add(w * s, &p.a.row(i));
                    stats.weighted_sq += w * gsq;
                    stats.lipschitz_weighted_sq += w * gsq;
                }
                Problem::Sfp(p) => {
                    let r = p.block_residual(i, x);
                    let rsq = r.dot(&r);
                    if rsq == 0.0 {
                        continue;
                    }
                    let g = p.blocks[i].a.t().dot(&r);
                    let gsq = g.dot(&g);
                    stats.value += w * 0.5 * rsq;
                    stats.grad.scaled_add(w, &g);
                    stats.weighted_sq += w * gsq;
                    stats.lipschitz_weighted_sq += w * gsq / p.lipschitz[i];
                }
            }
        }
        Ok(stats)
    }

    /// Proximity function `F(x) = (1/m) sum_i f_i(x)`.
    pub fn full_value(&self, x: &Array1<f64>) -> f64 {
        let m = self.num_constraints();
        let total: f64 = match self {
            Problem::Lfp(p) => p
                .residual(x)
                .iter()
                .zip(p.row_norm_sq.iter())
                .map(|(r, nsq)| 0.5 * r * r / nsq)
                .sum(),
            Problem::Sfp(p) => (0..m)
                .map(|i| {
                    let r = p.block_residual(i, x);
                    0.5 * r.dot(&r)
                })
                .sum(),
        };
        total / m as f64
    }

    /// `grad F(x) = (1/m) sum_i grad f_i(x)`.
    pub fn full_grad(&self, x: &Array1<f64>) -> Array1<f64> {
        let m = self.num_constraints();
        let mut g = match self {
            Problem::Lfp(p) => {
                let scaled = &p.residual(x) / &p.row_norm_sq;
                p.a.t().dot(&scaled)
            }
            Problem::Sfp(p) => {
                let mut g = Array1::zeros(p.n);
                for i in 0..m {
                    let r = p.block_residual(i, x);
                    g += &p.blocks[i].a.t().dot(&r);
                }
                g
            }
        };
        g /= m as f64;
        g
    }

    pub fn positive_residual(&self, x: &Array1<f64>) -> Residual {
        match self {
            Problem::Lfp(p) => Residual {
                residual: norm(&p.residual(x)),
                relative: None,
            },
            Problem::Sfp(p) => {
                let mut dist_sq = 0.0;
                let mut diff_sq = 0.0;
                let mut offset = 0;
                for (i, blk) in p.blocks.iter().enumerate() {
                    let r = p.block_residual(i, x);
                    dist_sq += r.dot(&r);
                    if let Some(b) = &p.clean_rhs {
                        let rows = blk.a.nrows();
                        let d = blk.a.dot(x) - &b.slice(ndarray::s![offset..offset + rows]);
                        diff_sq += d.dot(&d);
                        offset += rows;
                    }
                }
                let relative = p.clean_rhs.as_ref().map(|b| {
                    let nb = norm(b);
                    if nb > 0.0 {
                        diff_sq.sqrt() / nb
                    } else {
                        diff_sq.sqrt()
                    }
                });
                Residual { residual: dist_sq.sqrt(), relative }
            }
        }
    }

    /// Serializes to the line-oriented text format (17 significant digits).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            Problem::Lfp(p) => {
                writeln!(out, "LFP {} {}", p.num_constraints(), p.dim()).unwrap();
                for row in p.a.rows() {
                    push_row(&mut out, row);
                }
                push_row(&mut out, p.b.view());
                let kinds: Vec<&str> = p.kinds.iter().map(|k| k.token()).collect();
                out.push_str(&kinds.join(" "));
                out.push('\n');
            }
            Problem::Sfp(p) => {
                let xi = p.blocks[0].a.nrows();
                writeln!(out, "SFP {} {} {}", p.num_constraints(), p.dim(), xi).unwrap();
                for blk in &p.blocks {
                    for row in blk.a.rows() {
                        push_row(&mut out, row);
                    }
                    push_row(&mut out, blk.center.view());
                    writeln!(out, "{}", fmt_f64(blk.radius)).unwrap();
                }
            }
        }
        out
    }

    /// Parses the text format written by [`Problem::to_text`]. LFP rows are validated with
    /// [`RowPolicy::Rescale`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty input".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let dims = |k: usize| -> Result<Vec<usize>> {
            if fields.len() != k + 1 {
                return Err(Error::Parse { line: hline, msg: format!("expected {k} dimensions") });
            }
            fields[1..]
                .iter()
                .map(|f| f.parse::<usize>().map_err(|e| Error::Parse { line: hline, msg: e.to_string() }))
                .collect()
        };
        let mut next_row = |len: usize| -> Result<Vec<f64>> {
            let (ln, line) = lines
                .next()
                .ok_or(Error::Parse { line: 0, msg: "unexpected end of input".into() })?;
            parse_row(ln, line, len)
        };
        match fields.first().copied() {
            Some("LFP") => {
                let d = dims(2)?;
                let (m, n) = (d[0], d[1]);
                let mut a = Array2::zeros((m, n));
                for i in 0..m {
                    a.row_mut(i).assign(&Array1::from(next_row(n)?));
                }
                let b = Array1::from(next_row(m)?);
                let (ln, kline) = lines
                    .next()
                    .ok_or(Error::Parse { line: 0, msg: "missing constraint kinds".into() })?;
                let kinds = kline
                    .split_whitespace()
                    .map(|t| match t {
                        "E" => Ok(ConstraintKind::Equality),
                        "I" => Ok(ConstraintKind::Inequality),
                        other => Err(Error::Parse { line: ln, msg: format!("unknown kind {other:?}") }),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if kinds.len() != m {
                    return Err(Error::Parse { line: ln, msg: format!("expected {m} kinds") });
                }
                Ok(Problem::Lfp(LfpProblem::new(a, b, kinds)?))
            }
            Some("SFP") => {
                let d = dims(3)?;
                let (m, n, xi) = (d[0], d[1], d[2]);
                let mut blocks = Vec::with_capacity(m);
                for _ in 0..m {
                    let mut a = Array2::zeros((xi, n));
                    for r in 0..xi {
                        a.row_mut(r).assign(&Array1::from(next_row(n)?));
                    }
                    let center = Array1::from(next_row(xi)?);
                    let radius = next_row(1)?[0];
                    blocks.push(SfpBlock { a, center, radius });
                }
                Ok(Problem::Sfp(SfpProblem::new(blocks)?))
            }
            _ => Err(Error::Parse { line: hline, msg: format!("unknown header {header:?}") }),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_row(out: &mut String, row: ArrayView1<'_, f64>) {
    let parts: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
    out.push_str(&parts.join(" "));
    out.push('\n');
}

fn parse_row(line_no: usize, line: &str, len: usize) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse { line: line_no, msg: format!("{t:?}: {e}") }))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != len {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected {len} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}
