//! Mini-batch index selection: uniform sampling without replacement and random partitions.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::deviation::MiniBatch;
use crate::error::{Error, Result};
use crate::rng::{SeededRng, SAMPLER_STREAM};

pub use crate::linalg::spectral_norm_sq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    UniformNoReplacement,
    Partition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default)]
    pub mode: SamplingMode,
    pub tau: usize,
    #[serde(default)]
    pub seed: u64,
}

fn check_tau(m: usize, tau: usize) -> Result<()> {
    if tau == 0 || tau > m {
        return Err(Error::BlockSizeOutOfRange { tau, m });
    }
    Ok(())
}

/// Draws `tau` distinct indices uniformly from `0..m` with weights `1/tau`.
pub fn draw_uniform_batch(rng: &mut SeededRng, m: usize, tau: usize) -> Result<MiniBatch> {
    check_tau(m, tau)?;
    let mut pool: Vec<usize> = (0..m).collect();
    Ok(MiniBatch::uniform(partial_shuffle(rng, &mut pool, tau).to_vec()))
}

/// Moves a uniform random `tau`-subset of `pool` to its front, in random order.
fn partial_shuffle<'a>(rng: &mut SeededRng, pool: &'a mut [usize], tau: usize) -> &'a [usize] {
    let m = pool.len();
    for i in 0..tau {
        let j = i + rng.below(m - i);
        pool.swap(i, j);
    }
    &pool[..tau]
}

/// Disjoint index blocks covering `0..m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    block_size: usize,
}

impl Partition {
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }
}

/// Chops a random permutation of `0..m` into `floor(m / tau)` blocks; the remainder joins the
/// last block.
pub fn build_partition(rng: &mut SeededRng, m: usize, tau: usize) -> Result<Partition> {
    check_tau(m, tau)?;
    let mut perm: Vec<usize> = (0..m).collect();
    rng.shuffle(&mut perm);
    let l = m / tau;
    let mut blocks: Vec<Vec<usize>> = perm.chunks(tau).take(l).map(<[usize]>::to_vec).collect();
    if let Some(last) = blocks.last_mut() {
        last.extend_from_slice(&perm[l * tau..]);
    }
    Ok(Partition { blocks, block_size: tau })
}

/// Picks one block uniformly, weighted `1/|block|`.
pub fn draw_partition_block(rng: &mut SeededRng, partition: &Partition) -> MiniBatch {
    let b = rng.below(partition.blocks.len());
    MiniBatch::uniform(partition.blocks[b].clone())
}

/// `max(1, floor(m / sigma_max(A)^2))`, clamped to `m`.
///
/// The quotient is nudged up by a relative `1e-9` before flooring so that roundoff in the
/// spectral norm cannot drop an exact integer (e.g. `A = I`) to the integer below.
pub fn optimal_block_size(a: ArrayView2<'_, f64>) -> Result<usize> {
    let m = a.nrows();
    let s2 = spectral_norm_sq(a)?;
    let tau = (m as f64 / s2 * (1.0 + 1e-9)).floor();
    Ok((tau as usize).clamp(1, m.max(1)))
}

/// Per-run sampler owning its generator.
#[derive(Clone, Debug)]
pub struct Sampler {
    rng: SeededRng,
    tau: usize,
    state: SamplerState,
}

#[derive(Clone, Debug)]
enum SamplerState {
    Uniform(Vec<usize>),
    Partition(Partition),
}

impl Sampler {
    /// Uses stream [`SAMPLER_STREAM`] of `config.seed`. A partition is drawn once, here.
    pub fn new(config: &SamplerConfig, m: usize) -> Result<Self> {
        check_tau(m, config.tau)?;
        let mut rng = SeededRng::with_stream(config.seed, SAMPLER_STREAM);
        let state = match config.mode {
            SamplingMode::UniformNoReplacement => SamplerState::Uniform((0..m).collect()),
            SamplingMode::Partition => SamplerState::Partition(build_partition(&mut rng, m, config.tau)?),
        };
        Ok(Self { rng, tau: config.tau, state })
    }

    pub fn draw(&mut self) -> MiniBatch {
        match &mut self.state {
            SamplerState::Uniform(pool) => {
                MiniBatch::uniform(partial_shuffle(&mut self.rng, pool, self.tau).to_vec())
            }
            SamplerState::Partition(p) => draw_partition_block(&mut self.rng, p),
        }
    }

    pub fn partition(&self) -> Option<&Partition> {
        match &self.state {
            SamplerState::Partition(p) => Some(p),
            SamplerState::Uniform(_) => None,
        }
    }
}
