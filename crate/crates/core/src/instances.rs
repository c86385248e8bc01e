//! Seeded synthetic instances: sparse-solution linear feasibility problems and ball-constrained
//! split feasibility problems, consistent or made inconsistent along a left null-space direction.
//!
//! All draws come from stream [`INSTANCE_STREAM`] of the spec seed, in this order: the matrix
//! (row-major standard normals), the support of `x_hat` (a partial Fisher–Yates over `0..n`),
//! the `s` nonzero values, and finally the noise.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::deviation::{ConstraintKind, LfpProblem, SfpBlock, SfpProblem};
use crate::error::{Error, Result};
use crate::linalg::{cgls, norm};
use crate::rng::{SeededRng, INSTANCE_STREAM};

pub const NULLSPACE_ATTEMPTS: usize = 5;
const NULLSPACE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfpSpec {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    /// All rows are inequalities when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kinds: Option<Vec<ConstraintKind>>,
    #[serde(default)]
    pub seed: u64,
}

impl LfpSpec {
    pub fn new(m: usize, n: usize, s: usize, seed: u64) -> Self {
        Self { m, n, s, kinds: None, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::InvalidConfig("LFP needs m, n >= 1".into()));
        }
        if self.s == 0 || self.s > self.n {
            return Err(Error::InvalidConfig(format!("sparsity s = {} must lie in 1..={}", self.s, self.n)));
        }
        if let Some(k) = &self.kinds {
            if k.len() != self.m {
                return Err(Error::InvalidConfig(format!("{} kinds given for {} rows", k.len(), self.m)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfpSpec {
    /// Total row count `M = m * xi`.
    #[serde(rename = "M")]
    pub total_rows: usize,
    pub m: usize,
    pub n: usize,
    pub xi: usize,
    pub s: usize,
    pub sigma: f64,
    pub consistent: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SfpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.m == 0 || self.n == 0 || self.xi == 0 {
            return bad("SFP needs m, n, xi >= 1".into());
        }
        if self.total_rows != self.m * self.xi {
            return bad(format!("M = {} differs from m * xi = {}", self.total_rows, self.m * self.xi));
        }
        if self.s == 0 || self.s > self.n {
            return bad(format!("sparsity s = {} must lie in 1..={}", self.s, self.n));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be finite and nonnegative".into());
        }
        if !self.consistent && self.total_rows <= self.n {
            return bad("the inconsistent construction needs M > n".into());
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.standard_normal())
}

fn sparse_vector(rng: &mut SeededRng, n: usize, s: usize) -> Array1<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..s {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    let mut support = idx[..s].to_vec();
    support.sort_unstable();
    let mut x = Array1::zeros(n);
    for &j in &support {
        x[j] = rng.standard_normal();
    }
    x
}

/// Row-normalized Gaussian `A`, `s`-sparse `x_hat`, and `b = A x_hat`.
pub fn gen_lfp(spec: &LfpSpec) -> Result<(LfpProblem, Array1<f64>)> {
    spec.validate()?;
    let mut rng = SeededRng::with_stream(spec.seed, INSTANCE_STREAM);
    let mut a = gaussian_matrix(&mut rng, spec.m, spec.n);
    for mut row in a.axis_iter_mut(Axis(0)) {
        let nr = row.dot(&row).sqrt();
        row /= nr;
    }
    let xhat = sparse_vector(&mut rng, spec.n, spec.s);
    let b = a.dot(&xhat);
    let kinds = spec.kinds.clone().unwrap_or_else(|| vec![ConstraintKind::Inequality; spec.m]);
    Ok((LfpProblem::new(a, b, kinds)?, xhat))
}

/// Unit vector `v` with `A^T v ~ 0`, drawn as the least-squares residual of a Gaussian `v0`.
pub fn nullspace_unit_vector(a: ArrayView2<'_, f64>, rng: &mut SeededRng) -> Result<Array1<f64>> {
    for _ in 0..NULLSPACE_ATTEMPTS {
        let v0 = Array1::from_shape_simple_fn(a.nrows(), || rng.standard_normal());
        match nullspace_from(a, &v0) {
            Err(Error::RankDeficient { .. }) => continue,
            other => return other,
        }
    }
    Err(Error::RankDeficient { attempts: NULLSPACE_ATTEMPTS })
}

/// Normalized residual of `min_y ||A y - v0||`, refined by up to two extra solves when the
/// first one leaves `||A^T v||` above `1e-8`.
pub fn nullspace_from(a: ArrayView2<'_, f64>, v0: &Array1<f64>) -> Result<Array1<f64>> {
    if v0.len() != a.nrows() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), found: v0.len() });
    }
    let cap = 10 * a.ncols().max(1);
    let mut r = v0.clone();
    for pass in 0..3 {
        let (y, _) = cgls(a, &r, 1e-12, cap);
        r -= &a.dot(&y);
        let nr = norm(&r);
        if nr < 1e-12 {
            return Err(Error::RankDeficient { attempts: 1 });
        }
        if norm(&a.t().dot(&r)) / nr <= NULLSPACE_TOL || pass == 2 {
            return Ok(r / nr);
        }
    }
    unreachable!()
}

/// A generated split feasibility instance.
#[derive(Clone, Debug)]
pub struct SfpInstance {
    pub problem: SfpProblem,
    pub xhat: Array1<f64>,
    /// Noiseless `A x_hat`.
    pub b: Array1<f64>,
    /// Stacked ball centers.
    pub b_sigma: Array1<f64>,
    pub radius: f64,
    /// Stacked measurement matrix.
    pub a: Array2<f64>,
}

/// Gaussian `A` (not normalized), `s`-sparse `x_hat`, `b = A x_hat`, and balls of radius `r`
/// around perturbed centers.
///
/// Consistent: centers `b + sigma sign(eps)`, `r = sqrt(xi) sigma`, so `x_hat` sits on every
/// sphere. Inconsistent: centers `b + sigma sqrt(M) v` with `v` in the left null space and
/// `r = sqrt(xi) sigma / 2`, which puts the centers farther from `range(A)` than the balls reach.
pub fn gen_sfp(spec: &SfpSpec) -> Result<SfpInstance> {
    spec.validate()?;
    let mut rng = SeededRng::with_stream(spec.seed, INSTANCE_STREAM);
    let a = gaussian_matrix(&mut rng, spec.total_rows, spec.n);
    let xhat = sparse_vector(&mut rng, spec.n, spec.s);
    let b = a.dot(&xhat);
    let sig = spec.sigma;
    let (b_sigma, radius) = if spec.consistent {
        let noise = Array1::from_shape_simple_fn(spec.total_rows, || {
            if rng.standard_normal() >= 0.0 {
                sig
            } else {
                -sig
            }
        });
        (&b + &noise, (spec.xi as f64).sqrt() * sig)
    } else {
        let v = nullspace_unit_vector(a.view(), &mut rng)?;
        (&b + &(v * (sig * (spec.total_rows as f64).sqrt())), 0.5 * (spec.xi as f64).sqrt() * sig)
    };

    let mut blocks: Vec<SfpBlock> = (0..spec.m)
        .map(|i| {
            let rows = i * spec.xi..(i + 1) * spec.xi;
            SfpBlock {
                a: a.slice(s![rows.clone(), ..]).to_owned(),
                center: b_sigma.slice(s![rows]).to_owned(),
                radius,
            }
        })
        .collect();

    let mut radius = radius;
    if spec.consistent {
        // Rounding in the centers leaves x_hat a few ulps off the spheres; the radius is raised
        // to the largest computed distance so that every f_i(x_hat) is exactly zero.
        let mut widest = radius;
        for (i, blk) in blocks.iter().enumerate() {
            let dist = norm(&(blk.a.dot(&xhat) - &blk.center));
            let gap = (dist - radius).abs();
            if gap > 1e-10 * (1.0 + radius) {
                return Err(Error::InvalidProblem(format!("block {i} misses its sphere by {gap:e}")));
            }
            widest = widest.max(dist);
        }
        radius = widest;
        blocks.iter_mut().for_each(|blk| blk.radius = radius);
    } else {
        let (y, _) = cgls(a.view(), &b_sigma, 1e-12, 10 * spec.n);
        let dist = norm(&(&b_sigma - &a.dot(&y)));
        let reach = (spec.m as f64).sqrt() * radius;
        if dist - reach < 0.5 * sig * (spec.total_rows as f64).sqrt() - 1e-8 {
            return Err(Error::InvalidProblem(format!(
                "infeasibility gap too small: dist {dist} vs reach {reach}"
            )));
        }
    }

    let problem = SfpProblem::new(blocks)?.with_clean_rhs(b.clone())?;
    Ok(SfpInstance { problem, xhat, b, b_sigma, radius, a })
}
