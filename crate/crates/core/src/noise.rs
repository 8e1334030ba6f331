//! Square-integrable zero-mean Lévy noise in the eigenbasis of its covariance.
//!
//! Two laws are available: a 𝒬-Wiener process and a compensated compound
//! Poisson process whose jumps are centred Gaussian vectors. Both have exact
//! increment samplers and closed-form cumulants.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{HambitError, Result};
use crate::hilbert::CovarianceOp;
use crate::rng::{path_rng, Domain};

#[derive(Debug, Clone, PartialEq)]
pub enum LevySpec {
    Wiener { q: CovarianceOp },
    /// Jumps arrive at rate `intensity` and are `N(0, jump_cov)`; with
    /// centred jumps the compensator vanishes.
    CompensatedCompoundPoisson {
        intensity: f64,
        jump_cov: CovarianceOp,
    },
}

impl LevySpec {
    pub fn wiener(q: CovarianceOp) -> Self {
        LevySpec::Wiener { q }
    }

    pub fn compound_poisson(intensity: f64, jump_cov: CovarianceOp) -> Result<Self> {
        if !(intensity.is_finite() && intensity >= 0.0) {
            return Err(HambitError::param(
                "intensity",
                format!("must be finite and nonnegative, got {intensity}"),
            ));
        }
        Ok(LevySpec::CompensatedCompoundPoisson {
            intensity,
            jump_cov,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            LevySpec::Wiener { q } => q.dim(),
            LevySpec::CompensatedCompoundPoisson { jump_cov, .. } => jump_cov.dim(),
        }
    }

    /// The covariance operator 𝒬 of `L(1)`.
    pub fn covariance_of(&self) -> CovarianceOp {
        match self {
            LevySpec::Wiener { q } => q.clone(),
            LevySpec::CompensatedCompoundPoisson {
                intensity,
                jump_cov,
            } => jump_cov.scaled(*intensity),
        }
    }

    /// `Ψ_L(v) = log E[exp(i(v, L(1)))]`.
    pub fn cumulant(&self, v: &[f64]) -> Result<Complex64> {
        if v.len() != self.dim() {
            return Err(HambitError::dims("cumulant argument", self.dim(), v.len()));
        }
        Ok(Complex64::new(self.cumulant_re(v), 0.0))
    }

    pub(crate) fn cumulant_re(&self, v: &[f64]) -> f64 {
        match self {
            LevySpec::Wiener { q } => -0.5 * q.quadratic_form(v),
            LevySpec::CompensatedCompoundPoisson {
                intensity,
                jump_cov,
            } => intensity * (-0.5 * jump_cov.quadratic_form(v)).exp_m1(),
        }
    }

    pub(crate) fn sampler(&self, dt: f64) -> Result<IncrementSampler> {
        check_dt(dt)?;
        Ok(match self {
            LevySpec::Wiener { q } => IncrementSampler::Gaussian {
                scale: q.eigenvalues().iter().map(|l| (l * dt).sqrt()).collect(),
            },
            LevySpec::CompensatedCompoundPoisson {
                intensity,
                jump_cov,
            } => {
                let rate = intensity * dt;
                let counts = if rate > 0.0 {
                    Some(Poisson::new(rate).map_err(|e| HambitError::param("intensity", e.to_string()))?)
                } else {
                    None
                };
                IncrementSampler::CompoundPoisson {
                    counts,
                    jump_sd: jump_cov.eigenvalues().iter().map(|l| l.sqrt()).collect(),
                }
            }
        })
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(HambitError::param("dt", format!("must be positive, got {dt}")))
    }
}

/// Draws single increments `L(t+dt) − L(t)`.
#[derive(Debug, Clone)]
pub(crate) enum IncrementSampler {
    Gaussian {
        scale: Vec<f64>,
    },
    CompoundPoisson {
        counts: Option<Poisson<f64>>,
        jump_sd: Vec<f64>,
    },
}

impl IncrementSampler {
    pub(crate) fn fill(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            IncrementSampler::Gaussian { scale } => {
                for (o, s) in out.iter_mut().zip(scale) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = s * z;
                }
            }
            IncrementSampler::CompoundPoisson { counts, jump_sd } => {
                let k = counts.as_ref().map_or(0.0, |p| p.sample(rng));
                if k == 0.0 {
                    out.fill(0.0);
                    return;
                }
                // A sum of k independent N(0, Σ) jumps is N(0, kΣ).
                let root_k = k.sqrt();
                for (o, s) in out.iter_mut().zip(jump_sd) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = root_k * s * z;
                }
            }
        }
    }

    /// Jump count and jump sizes for one step, or `None` for Gaussian noise.
    pub(crate) fn jumps(&self, rng: &mut ChaCha8Rng, dim: usize) -> Option<Vec<Vec<f64>>> {
        match self {
            IncrementSampler::Gaussian { .. } => None,
            IncrementSampler::CompoundPoisson { counts, jump_sd } => {
                let k = counts.as_ref().map_or(0.0, |p| p.sample(rng)) as usize;
                Some(
                    (0..k)
                        .map(|_| {
                            (0..dim)
                                .map(|m| jump_sd[m] * rng.sample::<f64, _>(StandardNormal))
                                .collect()
                        })
                        .collect(),
                )
            }
        }
    }
}

/// Increments `ΔL` indexed by `(path, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBatch {
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    dim: usize,
    data: Vec<f64>,
}

impl IncrementBatch {
    /// `data` is path-major, then step, then coordinate.
    pub fn new(n_paths: usize, n_steps: usize, dt: f64, dim: usize, data: Vec<f64>) -> Result<Self> {
        check_dt(dt)?;
        if dim == 0 {
            return Err(HambitError::param("dim", "must be at least 1"));
        }
        if data.len() != n_paths * n_steps * dim {
            return Err(HambitError::dims("increment data", n_paths * n_steps * dim, data.len()));
        }
        Ok(Self {
            n_paths,
            n_steps,
            dt,
            dim,
            data,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All increments of one path, step-major.
    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.n_steps * self.dim;
        &self.data[p * len..(p + 1) * len]
    }

    pub fn increment(&self, p: usize, n: usize) -> &[f64] {
        let start = (p * self.n_steps + n) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Sums blocks of `factor` consecutive increments, giving the same paths
    /// on a grid `factor` times coarser.
    pub fn aggregate(&self, factor: usize) -> Result<IncrementBatch> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(HambitError::param(
                "factor",
                format!("{factor} does not divide {} steps", self.n_steps),
            ));
        }
        let coarse_steps = self.n_steps / factor;
        let mut data = vec![0.0; self.n_paths * coarse_steps * self.dim];
        for p in 0..self.n_paths {
            for n in 0..coarse_steps {
                let out = &mut data[(p * coarse_steps + n) * self.dim..][..self.dim];
                for k in 0..factor {
                    for (o, v) in out.iter_mut().zip(self.increment(p, n * factor + k)) {
                        *o += v;
                    }
                }
            }
        }
        IncrementBatch::new(self.n_paths, coarse_steps, self.dt * factor as f64, self.dim, data)
    }

    /// Keeps the first `n_paths` paths.
    pub fn take_paths(&self, n_paths: usize) -> IncrementBatch {
        let n = n_paths.min(self.n_paths);
        Self {
            n_paths: n,
            n_steps: self.n_steps,
            dt: self.dt,
            dim: self.dim,
            data: self.data[..n * self.n_steps * self.dim].to_vec(),
        }
    }
}

/// Exact increments of `L` on a uniform grid. Path `p` always uses the same
/// random stream, so the batch does not depend on the thread count.
pub fn sample_increments(
    spec: &LevySpec,
    dt: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<IncrementBatch> {
    let sampler = spec.sampler(dt)?;
    let dim = spec.dim();
    let mut data = vec![0.0; n_paths * n_steps * dim];
    if n_steps > 0 {
        data.par_chunks_mut(n_steps * dim)
            .enumerate()
            .for_each(|(p, path)| {
                let mut rng = path_rng(seed, Domain::Noise, p);
                for step in path.chunks_exact_mut(dim) {
                    sampler.fill(&mut rng, step);
                }
            });
    }
    IncrementBatch::new(n_paths, n_steps, dt, dim, data)
}
