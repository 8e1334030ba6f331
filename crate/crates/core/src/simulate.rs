//! Direct quadrature, series truncation and projection of Hambit fields,
//! together with covariance and characteristic-functional calculators.
//!
//! All routes share one convention: on `[s_i, s_{i+1})` the integrand is
//! frozen at its left endpoint, so `X(t_n) = Σ_{i<n} Γ(t_n, s_i)(σ(s_i)) ΔL_i`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::analysis::{jackknife_mean, ComplexEstimate, MeanEstimate};
use crate::error::{HambitError, Result};
use crate::hilbert::{hs_norm_sq_with_root, CovarianceOp};
use crate::kernels::{
    gamma_diff_op_norm_bound, sample_volatility, KernelSpec, SigmaPath, VolatilityModel,
    VolatilityPaths,
};
use crate::linalg;
use crate::noise::{sample_increments, IncrementBatch, LevySpec};
use crate::rng::SeedMode;

/// Largest Gram condition number accepted by [`project`].
pub const MAX_GRAM_CONDITION: f64 = 1e12;

const GRID_TOL: f64 = 1e-9;

/// Uniform grid `t_n = n·dt`, `n = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(HambitError::param("dt", format!("must be positive, got {dt}")));
        }
        Ok(Self { dt, n_steps })
    }

    /// `n_steps` equal steps up to `horizon`.
    pub fn over(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(HambitError::param("n_steps", "must be at least 1"));
        }
        Self::new(horizon / n_steps as f64, n_steps)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..=self.n_steps).collect()
    }

    /// Index `n` with `t_n = t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        grid_index(t, self.dt, self.n_steps)
    }
}

fn grid_index(t: f64, dt: f64, n_max: usize) -> Result<usize> {
    let pos = t / dt;
    let n = pos.round();
    if !(t >= 0.0) || (pos - n).abs() > GRID_TOL * pos.abs().max(1.0) || n > n_max as f64 {
        return Err(HambitError::NotOnGrid { value: t });
    }
    Ok(n as usize)
}

/// Kernel, volatility and noise with matching dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct HambitModel {
    pub kernel: KernelSpec,
    pub vol: VolatilityModel,
    pub noise: LevySpec,
}

impl HambitModel {
    pub fn new(kernel: KernelSpec, vol: VolatilityModel, noise: LevySpec) -> Result<Self> {
        if vol.dim_u() != kernel.dim_u() {
            return Err(HambitError::dims("volatility dimension (dim_u)", kernel.dim_u(), vol.dim_u()));
        }
        if noise.dim() != kernel.dim_v() {
            return Err(HambitError::dims("noise dimension (dim_v)", kernel.dim_v(), noise.dim()));
        }
        Ok(Self { kernel, vol, noise })
    }

    pub fn dim_h(&self) -> usize {
        self.kernel.dim_h()
    }
}

/// Noise increments and volatility values on one grid, shared by every
/// route so that all of them see the same randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct Drivers {
    increments: IncrementBatch,
    sigma: VolatilityPaths,
    seed: u64,
}

impl Drivers {
    pub fn new(increments: IncrementBatch, sigma: VolatilityPaths) -> Result<Self> {
        if increments.n_paths() != sigma.n_paths() {
            return Err(HambitError::dims("driver paths", increments.n_paths(), sigma.n_paths()));
        }
        if increments.n_steps() != sigma.n_steps() {
            return Err(HambitError::dims("driver steps", increments.n_steps(), sigma.n_steps()));
        }
        if (increments.dt() - sigma.dt()).abs() > GRID_TOL * increments.dt() {
            return Err(HambitError::param("dt", "noise and volatility grids differ"));
        }
        Ok(Self {
            increments,
            sigma,
            seed: 0,
        })
    }

    pub fn sample(model: &HambitModel, grid: TimeGrid, n_paths: usize, seed: u64, mode: SeedMode) -> Result<Self> {
        let increments = sample_increments(&model.noise, grid.dt, grid.n_steps, n_paths, seed)?;
        let sigma = sample_volatility(&model.vol, grid.dt, grid.n_steps, n_paths, seed, mode)?;
        Ok(Self {
            seed,
            ..Self::new(increments, sigma)?
        })
    }

    /// Master seed the drivers were sampled from (0 when assembled by hand).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &IncrementBatch {
        &self.increments
    }

    pub fn sigma(&self) -> &VolatilityPaths {
        &self.sigma
    }

    pub fn n_paths(&self) -> usize {
        self.increments.n_paths()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            dt: self.increments.dt(),
            n_steps: self.increments.n_steps(),
        }
    }

    /// The same paths on a grid `factor` times coarser.
    pub fn aggregate(&self, factor: usize) -> Result<Drivers> {
        Ok(Self {
            seed: self.seed,
            ..Drivers::new(self.increments.aggregate(factor)?, self.sigma.subsample(factor)?)?
        })
    }

    /// The same noise with different volatility paths.
    pub fn with_sigma(&self, sigma: VolatilityPaths) -> Result<Drivers> {
        Ok(Self {
            seed: self.seed,
            ..Drivers::new(self.increments.clone(), sigma)?
        })
    }
}

/// ℋ-valued sample paths at selected times.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    times: Vec<f64>,
    dim: usize,
    n_paths: usize,
    data: Vec<f64>,
    seed: u64,
}

impl PathEnsemble {
    /// `data` is path-major, then time, then coordinate.
    pub fn new(times: Vec<f64>, dim: usize, n_paths: usize, data: Vec<f64>, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(HambitError::param("dim", "must be at least 1"));
        }
        if data.len() != times.len() * dim * n_paths {
            return Err(HambitError::dims("ensemble data", times.len() * dim * n_paths, data.len()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) || times.first().is_some_and(|&t| t < 0.0) {
            return Err(HambitError::param("times", "must be nonnegative and increasing"));
        }
        Ok(Self {
            times,
            dim,
            n_paths,
            data,
            seed,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self, p: usize, k: usize) -> &[f64] {
        let start = (p * self.times.len() + k) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Position of `t` among the stored times.
    pub fn time_position(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= GRID_TOL * t.abs().max(1.0))
            .ok_or(HambitError::NotOnGrid { value: t })
    }

    /// Values of every path at stored time `k`.
    pub fn slice_at(&self, k: usize) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n_paths).map(move |p| self.value(p, k))
    }

    pub fn max_abs_diff(&self, other: &PathEnsemble) -> Result<f64> {
        if self.data.len() != other.data.len() || self.dim != other.dim {
            return Err(HambitError::dims("ensemble size", self.data.len(), other.data.len()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn check_outputs(outputs: &[usize], grid: TimeGrid) -> Result<()> {
    if outputs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HambitError::param("outputs", "time indices must be strictly increasing"));
    }
    if let Some(&last) = outputs.last() {
        if last > grid.n_steps {
            return Err(HambitError::param(
                "outputs",
                format!("index {last} beyond {} steps", grid.n_steps),
            ));
        }
    }
    Ok(())
}

fn check_kernel_drivers(kernel: &KernelSpec, drivers: &Drivers) -> Result<()> {
    if drivers.sigma.dim() != kernel.dim_u() {
        return Err(HambitError::dims("volatility dimension (dim_u)", kernel.dim_u(), drivers.sigma.dim()));
    }
    if drivers.increments.dim() != kernel.dim_v() {
        return Err(HambitError::dims("noise dimension (dim_v)", kernel.dim_v(), drivers.increments.dim()));
    }
    Ok(())
}

/// `B_c ΔL_i` for every step below `n_max` and every component.
fn component_forcing(kernel: &KernelSpec, increments: &[f64], n_max: usize) -> Vec<f64> {
    let (dim_v, dim_h, nc) = (kernel.dim_v(), kernel.dim_h(), kernel.components().len());
    let mut out = vec![0.0; n_max * nc * dim_h];
    for i in 0..n_max {
        let dl = &increments[i * dim_v..(i + 1) * dim_v];
        for (c, comp) in kernel.components().iter().enumerate() {
            let dst = &mut out[(i * nc + c) * dim_h..][..dim_h];
            comp.b.apply_into(dl, dst);
        }
    }
    out
}

/// Left-point quadrature `X(t_n) = Σ_{i<n} Γ(t_n, s_i)(σ(s_i)) ΔL_i` at the
/// requested grid indices.
pub fn hambit_direct(kernel: &KernelSpec, drivers: &Drivers, outputs: &[usize]) -> Result<PathEnsemble> {
    check_kernel_drivers(kernel, drivers)?;
    let grid = drivers.grid();
    check_outputs(outputs, grid)?;
    let dim_h = kernel.dim_h();
    let nc = kernel.components().len();
    let n_max = outputs.last().copied().unwrap_or(0);
    let row = outputs.len() * dim_h;
    let mut data = vec![0.0; drivers.n_paths() * row];
    data.par_chunks_mut(row.max(1)).enumerate().for_each(|(p, out)| {
        let forcing = component_forcing(kernel, drivers.increments.path(p), n_max);
        let sigma = drivers.sigma.path(p);
        let mut weights = vec![0.0; nc];
        for (k, &n) in outputs.iter().enumerate() {
            let x = &mut out[k * dim_h..(k + 1) * dim_h];
            for i in 0..n {
                kernel.weights_into((n - i) as f64 * grid.dt, sigma.at(i), &mut weights);
                for (c, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let f = &forcing[(i * nc + c) * dim_h..][..dim_h];
                    for (xv, fv) in x.iter_mut().zip(f) {
                        *xv += w * fv;
                    }
                }
            }
        }
    });
    let times = outputs.iter().map(|&n| grid.time(n)).collect();
    PathEnsemble::new(times, dim_h, drivers.n_paths(), data, drivers.seed)
}

/// Series truncation levels `(N, M, K)`: the first `N` coordinates of 𝒰,
/// `M` of 𝒱 and `K` of ℋ are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationLevels {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

impl TruncationLevels {
    pub fn new(n: usize, m: usize, k: usize) -> Self {
        Self { n, m, k }
    }

    pub fn full(kernel: &KernelSpec) -> Self {
        Self::new(kernel.dim_u(), kernel.dim_v(), kernel.dim_h())
    }

    pub fn validate(&self, kernel: &KernelSpec) -> Result<()> {
        for (space, level, dim) in [
            ("U", self.n, kernel.dim_u()),
            ("V", self.m, kernel.dim_v()),
            ("H", self.k, kernel.dim_h()),
        ] {
            if level == 0 || level > dim {
                return Err(HambitError::TruncationExceedsDim { space, level, dim });
            }
        }
        Ok(())
    }

    fn keeps(&self, n: usize, m: usize, k: usize) -> bool {
        n < self.n && m < self.m && k < self.k
    }
}

/// Truncated series and its scalar components `Y_{n,m,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesOutput {
    pub ensemble: PathEnsemble,
    pub levels: TruncationLevels,
    /// Indexed `[path][time][n][m][k]` over the kept ranges.
    components: Vec<f64>,
}

impl SeriesOutput {
    pub fn component(&self, p: usize, time: usize, n: usize, m: usize, k: usize) -> f64 {
        let l = self.levels;
        let per_time = l.n * l.m * l.k;
        let n_times = self.ensemble.times().len();
        self.components[(p * n_times + time) * per_time + (n * l.m + m) * l.k + k]
    }
}

/// Coefficients `(Γ(t,s)(u_n) v_m, h_k)` at a given lag.
fn coordinate_kernel(kernel: &KernelSpec, lag: f64, n: usize, m: usize, k: usize) -> f64 {
    kernel
        .components()
        .iter()
        .filter(|c| c.phi == n)
        .map(|c| c.g.eval_lag(lag) * c.b.entry(k, m))
        .sum()
}

/// `X_{N,M,K}(t) = Σ_{n<N, m<M, k<K} Y_{n,m,k}(t) h_k` with each `Y` a
/// scalar left-point sum against `ΔL_m`.
pub fn vmv_series(
    kernel: &KernelSpec,
    drivers: &Drivers,
    levels: TruncationLevels,
    outputs: &[usize],
) -> Result<SeriesOutput> {
    check_kernel_drivers(kernel, drivers)?;
    levels.validate(kernel)?;
    let grid = drivers.grid();
    check_outputs(outputs, grid)?;
    let dim_h = kernel.dim_h();
    let per_time = levels.n * levels.m * levels.k;
    let n_times = outputs.len();
    let n_paths = drivers.n_paths();
    let mut comps = vec![0.0; n_paths * n_times * per_time];
    comps
        .par_chunks_mut((n_times * per_time).max(1))
        .enumerate()
        .for_each(|(p, out)| {
            let sigma = drivers.sigma.path(p);
            for (slot, &nt) in outputs.iter().enumerate() {
                let y = &mut out[slot * per_time..(slot + 1) * per_time];
                for i in 0..nt {
                    let lag = (nt - i) as f64 * grid.dt;
                    let s = sigma.at(i);
                    let dl = drivers.increments.increment(p, i);
                    for n in 0..levels.n {
                        if s[n] == 0.0 {
                            continue;
                        }
                        for m in 0..levels.m {
                            let drive = s[n] * dl[m];
                            for k in 0..levels.k {
                                let a = coordinate_kernel(kernel, lag, n, m, k);
                                y[(n * levels.m + m) * levels.k + k] += a * drive;
                            }
                        }
                    }
                }
            }
        });
    let mut data = vec![0.0; n_paths * n_times * dim_h];
    for (x, y) in data.chunks_exact_mut(dim_h).zip(comps.chunks_exact(per_time)) {
        for n in 0..levels.n {
            for m in 0..levels.m {
                for k in 0..levels.k {
                    x[k] += y[(n * levels.m + m) * levels.k + k];
                }
            }
        }
    }
    let times = outputs.iter().map(|&n| grid.time(n)).collect();
    Ok(SeriesOutput {
        ensemble: PathEnsemble::new(times, dim_h, n_paths, data, drivers.seed)?,
        levels,
        components: comps,
    })
}

/// Minkowski tail bound on `(E|X(t) − X_{N,M,K}(t)|²)^{1/2}`:
/// the sum over every discarded triple of
/// `(q_m Σ_i (Γ(t,s_i)(u_n)v_m, h_k)² E[σ_n(s_i)²] Δt)^{1/2}`.
pub fn truncation_error_bound(model: &HambitModel, levels: TruncationLevels, grid: TimeGrid, t: f64) -> Result<f64> {
    levels.validate(&model.kernel)?;
    let nt = grid.index_of(t)?;
    let q = model.noise.covariance_of();
    let k = &model.kernel;
    let mut total = 0.0;
    for n in 0..k.dim_u() {
        for m in 0..k.dim_v() {
            for h in 0..k.dim_h() {
                if levels.keeps(n, m, h) {
                    continue;
                }
                let mut second = 0.0;
                for i in 0..nt {
                    let a = coordinate_kernel(k, (nt - i) as f64 * grid.dt, n, m, h);
                    if a != 0.0 {
                        second += a * a * model.vol.second_moment_bound(n, grid.time(i)) * grid.dt;
                    }
                }
                total += (q.eigenvalues()[m] * second).sqrt();
            }
        }
    }
    Ok(total)
}

fn gamma_q_gamma(g: &DMatrix<f64>, q: &CovarianceOp) -> DMatrix<f64> {
    let mut scaled = g.clone();
    for (c, &l) in q.eigenvalues().iter().enumerate() {
        scaled.column_mut(c).scale_mut(l);
    }
    scaled * g.transpose()
}

fn check_q(kernel: &KernelSpec, q: &CovarianceOp) -> Result<()> {
    if q.dim() != kernel.dim_v() {
        return Err(HambitError::dims("covariance dimension (dim_v)", kernel.dim_v(), q.dim()));
    }
    Ok(())
}

/// `∫₀ᵗ Γ(t,s)(σ(s)) 𝒬 Γ(t,s)(σ(s))* ds` by left-point quadrature on the
/// grid of `sigma`.
pub fn conditional_covariance(kernel: &KernelSpec, sigma: SigmaPath<'_>, q: &CovarianceOp, t: f64) -> Result<DMatrix<f64>> {
    check_q(kernel, q)?;
    if sigma.dim != kernel.dim_u() {
        return Err(HambitError::dims("volatility dimension (dim_u)", kernel.dim_u(), sigma.dim));
    }
    let n = grid_index(t, sigma.dt, sigma.n_points() - 1)?;
    let mut out = DMatrix::zeros(kernel.dim_h(), kernel.dim_h());
    for i in 0..n {
        let g = kernel.gamma_matrix((n - i) as f64 * sigma.dt, sigma.at(i));
        out += gamma_q_gamma(&g, q) * sigma.dt;
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// `∫₀^∞ G(s) 𝒬 G(s)* ds` with `G(s) = Γ(s,0)(σ₀)`, integrated by composite
/// Simpson up to a horizon (at least `horizon`) where the exponential tail
/// is below `tol/2`, with a step keeping the Simpson error below `tol/2`.
pub fn stationary_covariance(
    kernel: &KernelSpec,
    sigma0: &[f64],
    q: &CovarianceOp,
    horizon: f64,
    tol: f64,
) -> Result<DMatrix<f64>> {
    check_q(kernel, q)?;
    if sigma0.len() != kernel.dim_u() {
        return Err(HambitError::dims("volatility dimension (dim_u)", kernel.dim_u(), sigma0.len()));
    }
    if !(tol > 0.0 && horizon >= 0.0) {
        return Err(HambitError::param("tol", "tolerance must be positive and horizon nonnegative"));
    }
    let comps = kernel.components();
    let mut kappa_min = f64::INFINITY;
    let mut kappa_max: f64 = 0.0;
    let mut amplitude = 0.0;
    for (i, c) in comps.iter().enumerate() {
        let kappa = c.g.decay_rate().ok_or(HambitError::NonDecayingKernel { component: i })?;
        kappa_min = kappa_min.min(kappa);
        kappa_max = kappa_max.max(kappa);
        amplitude += sigma0[c.phi].abs() * c.g.sup_abs() * c.b.op_norm();
    }
    let scale = amplitude * amplitude * q.trace();
    let dim_h = kernel.dim_h();
    if scale == 0.0 {
        return Ok(DMatrix::zeros(dim_h, dim_h));
    }
    // ‖G(s)𝒬G(s)*‖ ≤ scale·e^{−2κ_min s}
    let tail_horizon = ((scale / (kappa_min * tol)).ln() / (2.0 * kappa_min)).max(0.0);
    let upper = horizon.max(tail_horizon);
    // |f⁗| ≤ (2κ_max)⁴·scale
    let m4 = (2.0 * kappa_max).powi(4) * scale;
    let h_max = (90.0 * tol / (upper * m4)).powf(0.25);
    let mut intervals = (upper / h_max).ceil().max(2.0) as usize;
    intervals += intervals % 2;
    let h = upper / intervals as f64;
    let pair: Vec<DMatrix<f64>> = comps
        .iter()
        .flat_map(|a| {
            comps.iter().map(move |b| {
                let ga = a.b.matrix() * sigma0[a.phi];
                let gb = b.b.matrix() * sigma0[b.phi];
                let mut scaled = ga;
                for (c, &l) in q.eigenvalues().iter().enumerate() {
                    scaled.column_mut(c).scale_mut(l);
                }
                scaled * gb.transpose()
            })
        })
        .collect();
    let nc = comps.len();
    let mut out = DMatrix::zeros(dim_h, dim_h);
    let mut g = vec![0.0; nc];
    for step in 0..=intervals {
        let s = step as f64 * h;
        let w = if step == 0 || step == intervals {
            1.0
        } else if step % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for (gi, c) in g.iter_mut().zip(comps) {
            *gi = c.g.eval_lag(s);
        }
        for a in 0..nc {
            for b in 0..nc {
                out += &pair[a * nc + b] * (w * g[a] * g[b]);
            }
        }
    }
    out *= h / 3.0;
    Ok((&out + out.transpose()) * 0.5)
}

/// Monte Carlo estimate of `E[exp(i(h, X(t)))]`.
pub fn char_functional_mc(ensemble: &PathEnsemble, t: f64, h: &[f64]) -> Result<ComplexEstimate> {
    if h.len() != ensemble.dim() {
        return Err(HambitError::dims("functional direction", ensemble.dim(), h.len()));
    }
    let k = ensemble.time_position(t)?;
    let phases: Vec<f64> = ensemble
        .slice_at(k)
        .map(|x| x.iter().zip(h).map(|(a, b)| a * b).sum())
        .collect();
    let re: Vec<f64> = phases.iter().map(|p| p.cos()).collect();
    let im: Vec<f64> = phases.iter().map(|p| p.sin()).collect();
    Ok(ComplexEstimate::from_parts(jackknife_mean(&re), jackknife_mean(&im)))
}

/// `E[exp(∫₀ᵗ Ψ_L(Γ(t,s)(σ(s))* h) ds)]`: left-point quadrature along each
/// volatility path, averaged over paths.
pub fn char_functional_analytic(
    model: &HambitModel,
    sigma: &VolatilityPaths,
    t: f64,
    h: &[f64],
) -> Result<Complex64> {
    if sigma.seed_mode() == SeedMode::Shared && !model.vol.is_deterministic() {
        return Err(HambitError::SharedSeed);
    }
    if h.len() != model.dim_h() {
        return Err(HambitError::dims("functional direction", model.dim_h(), h.len()));
    }
    let n = grid_index(t, sigma.dt(), sigma.n_steps())?;
    let kernel = &model.kernel;
    let paths = if model.vol.is_deterministic() { sigma.n_paths().min(1) } else { sigma.n_paths() };
    let values: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let path = sigma.path(p);
            let mut v = vec![0.0; kernel.dim_v()];
            let mut exponent = 0.0;
            for i in 0..n {
                kernel.adjoint_apply((n - i) as f64 * sigma.dt(), path.at(i), h, &mut v);
                exponent += model.noise.cumulant_re(&v) * sigma.dt();
            }
            exponent.exp()
        })
        .collect();
    let mean = if values.is_empty() { 1.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
    Ok(Complex64::new(mean, 0.0))
}

/// Output of [`project`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `H_n = ((ξ_i, ξ_j))`.
    pub gram: DMatrix<f64>,
    /// `C(t,s)_{ij} = (𝒬^{1/2}Γ(t,s)(σ(s))*ξ_i, 𝒬^{1/2}Γ(t,s)(σ(s))*ξ_j)`.
    pub c: DMatrix<f64>,
    /// Symmetric square root of `C`.
    pub gamma: DMatrix<f64>,
    /// Smallest eigenvalue of `C` before clipping.
    pub c_min_eigenvalue: f64,
}

fn gram_matrix(xi: &[Vec<f64>], dim_h: usize) -> Result<DMatrix<f64>> {
    if xi.is_empty() {
        return Err(HambitError::param("xi", "needs at least one vector"));
    }
    if let Some(bad) = xi.iter().find(|v| v.len() != dim_h) {
        return Err(HambitError::dims("projection vector", dim_h, bad.len()));
    }
    let n = xi.len();
    let gram = DMatrix::from_fn(n, n, |i, j| xi[i].iter().zip(&xi[j]).map(|(a, b)| a * b).sum());
    let condition = linalg::condition_number(&gram);
    if !(condition <= MAX_GRAM_CONDITION) {
        return Err(HambitError::SingularGram { condition });
    }
    Ok(gram)
}

/// Gram matrix of `xi`, rejecting nearly dependent families.
pub fn checked_gram(xi: &[Vec<f64>], dim_h: usize) -> Result<DMatrix<f64>> {
    gram_matrix(xi, dim_h)
}

/// Gram matrix, covariance matrix `C(t,s)` and its root `γ(t,s)` for the
/// projection onto `span{ξ_i}`; `σ(s)` is read from `sigma` at grid time `s`.
pub fn project(
    kernel: &KernelSpec,
    sigma: SigmaPath<'_>,
    q: &CovarianceOp,
    t: f64,
    s: f64,
    xi: &[Vec<f64>],
) -> Result<Projection> {
    check_q(kernel, q)?;
    if sigma.dim != kernel.dim_u() {
        return Err(HambitError::dims("volatility dimension (dim_u)", kernel.dim_u(), sigma.dim));
    }
    if s > t {
        return Err(HambitError::TimeOrder { t, s });
    }
    let gram = gram_matrix(xi, kernel.dim_h())?;
    let i = grid_index(s, sigma.dt, sigma.n_points() - 1)?;
    let g = kernel.gamma_matrix(t - s, sigma.at(i));
    let cov = gamma_q_gamma(&g, q);
    let n = xi.len();
    let c = DMatrix::from_fn(n, n, |a, b| {
        let left = DVector::from_column_slice(&xi[a]);
        let right = DVector::from_column_slice(&xi[b]);
        (left.transpose() * &cov * right)[(0, 0)]
    });
    let c = (&c + c.transpose()) * 0.5;
    let root = linalg::sym_sqrt(&c);
    Ok(Projection {
        gram,
        c,
        gamma: root.root,
        c_min_eigenvalue: root.min_eigenvalue,
    })
}

/// Coefficients `a = H⁻¹((f, ξ_i))_i` of the orthogonal projection of `f`.
pub fn projection_coefficients(f: &[f64], xi: &[Vec<f64>]) -> Result<Vec<f64>> {
    let gram = gram_matrix(xi, f.len())?;
    let rhs = DVector::from_iterator(xi.len(), xi.iter().map(|v| v.iter().zip(f).map(|(a, b)| a * b).sum()));
    let chol = gram
        .cholesky()
        .ok_or(HambitError::SingularGram { condition: f64::INFINITY })?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// `Σ_i a_i ξ_i`.
pub fn reconstruct(coefficients: &[f64], xi: &[Vec<f64>]) -> Vec<f64> {
    let dim = xi.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (a, v) in coefficients.iter().zip(xi) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsometryCheck {
    /// Monte Carlo `E|X(t)|²`.
    pub empirical: MeanEstimate,
    /// `E Σ_i ‖Γ(t,s_i)(σ(s_i))𝒬^{1/2}‖²_HS Δt`, averaged over volatility paths.
    pub quadrature: f64,
}

/// Both sides of the Itô isometry at time `t`.
pub fn isometry_check(
    ensemble: &PathEnsemble,
    model: &HambitModel,
    sigma: &VolatilityPaths,
    t: f64,
) -> Result<IsometryCheck> {
    let k = ensemble.time_position(t)?;
    let norms: Vec<f64> = ensemble.slice_at(k).map(|x| x.iter().map(|v| v * v).sum()).collect();
    let n = grid_index(t, sigma.dt(), sigma.n_steps())?;
    let q = model.noise.covariance_of();
    let kernel = &model.kernel;
    let paths = if model.vol.is_deterministic() { sigma.n_paths().min(1) } else { sigma.n_paths() };
    let per_path: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let path = sigma.path(p);
            (0..n)
                .map(|i| {
                    let g = kernel.gamma_matrix((n - i) as f64 * sigma.dt(), path.at(i));
                    hs_norm_sq_with_root(&g, q.eigenvalues()) * sigma.dt()
                })
                .sum::<f64>()
        })
        .collect();
    let quadrature = if per_path.is_empty() { 0.0 } else { per_path.iter().sum::<f64>() / per_path.len() as f64 };
    Ok(IsometryCheck {
        empirical: jackknife_mean(&norms),
        quadrature,
    })
}

/// The two quadrature terms bounding `E|X₁(t) − X₂(t)|²` for fields driven by
/// the same noise:
/// `a = ‖𝒬^{1/2}‖²_HS ∫ ‖Γ₁−Γ₂‖²_op E|σ₁|² ds` and
/// `b = ‖𝒬^{1/2}‖²_HS ∫ ‖Γ₂‖²_op E|σ₁−σ₂|² ds`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxBound {
    pub kernel_term: f64,
    pub volatility_term: f64,
}

impl ApproxBound {
    /// `2(a + b)`, from `|x + y|² ≤ 2|x|² + 2|y|²`.
    pub fn bound(&self) -> f64 {
        2.0 * (self.kernel_term + self.volatility_term)
    }
}

/// Evaluates [`ApproxBound`] on the grid of the volatility paths, with the
/// volatility moments estimated over the sampled paths.
pub fn approx_condition_bound(
    k1: &KernelSpec,
    k2: &KernelSpec,
    sigma1: &VolatilityPaths,
    sigma2: &VolatilityPaths,
    q: &CovarianceOp,
    t: f64,
) -> Result<ApproxBound> {
    check_q(k1, q)?;
    if sigma1.n_paths() != sigma2.n_paths() || sigma1.dim() != sigma2.dim() || sigma1.n_steps() != sigma2.n_steps() {
        return Err(HambitError::param("sigma", "volatility samples must share shape"));
    }
    let n = grid_index(t, sigma1.dt(), sigma1.n_steps())?;
    let paths = sigma1.n_paths().max(1) as f64;
    let mut kernel_term = 0.0;
    let mut volatility_term = 0.0;
    for i in 0..n {
        let s = sigma1.dt() * i as f64;
        let (mut m1, mut md) = (0.0, 0.0);
        for p in 0..sigma1.n_paths() {
            let (a, b) = (sigma1.at(p, i), sigma2.at(p, i));
            m1 += a.iter().map(|v| v * v).sum::<f64>();
            md += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        let diff = gamma_diff_op_norm_bound(k1, k2, t, s)?;
        let op2 = k2.gamma_op_norm_bound(t, s)?;
        kernel_term += diff * diff * m1 / paths * sigma1.dt();
        volatility_term += op2 * op2 * md / paths * sigma1.dt();
    }
    let tr = q.trace();
    Ok(ApproxBound {
        kernel_term: tr * kernel_term,
        volatility_term: tr * volatility_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::LinearMap;
    use crate::kernels::ScalarKernel;
    use approx::assert_abs_diff_eq;

    fn scalar_model(g: ScalarKernel, sigma: f64) -> HambitModel {
        HambitModel::new(
            KernelSpec::single(g, LinearMap::identity(1)).unwrap(),
            VolatilityModel::constant(vec![sigma]).unwrap(),
            LevySpec::wiener(CovarianceOp::identity(1)),
        )
        .unwrap()
    }

    fn fixed_drivers(increments: &[f64], sigma: f64) -> Drivers {
        let n = increments.len();
        let inc = IncrementBatch::new(1, n, 1.0, 1, increments.to_vec()).unwrap();
        let vol = VolatilityModel::constant(vec![sigma]).unwrap();
        let s = sample_volatility(&vol, 1.0, n, 1, 0, SeedMode::Independent).unwrap();
        Drivers::new(inc, s).unwrap()
    }

    #[test]
    fn telescoping_example() {
        let model = scalar_model(ScalarKernel::Constant { value: 1.0 }, 1.0);
        let d = fixed_drivers(&[0.1, -0.2, 0.3], 1.0);
        let x = hambit_direct(&model.kernel, &d, &[0, 3]).unwrap();
        assert_eq!(x.value(0, 0), &[0.0]);
        assert_abs_diff_eq!(x.value(0, 1)[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn zero_volatility_gives_zero_paths() {
        let model = scalar_model(ScalarKernel::Exponential { kappa: 1.0 }, 0.0);
        let d = Drivers::sample(&model, TimeGrid::over(1.0, 20).unwrap(), 5, 3, SeedMode::Independent).unwrap();
        let x = hambit_direct(&model.kernel, &d, &d.grid().all_indices()).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn series_collapses_in_one_dimension() {
        let model = scalar_model(ScalarKernel::Exponential { kappa: 0.7 }, 1.3);
        let d = Drivers::sample(&model, TimeGrid::over(1.0, 16).unwrap(), 4, 8, SeedMode::Independent).unwrap();
        let idx = d.grid().all_indices();
        let direct = hambit_direct(&model.kernel, &d, &idx).unwrap();
        let series = vmv_series(&model.kernel, &d, TruncationLevels::new(1, 1, 1), &idx).unwrap();
        for p in 0..4 {
            for k in 0..idx.len() {
                assert_abs_diff_eq!(series.component(p, k, 0, 0, 0), direct.value(p, k)[0], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn truncation_levels_are_checked() {
        let model = scalar_model(ScalarKernel::Exponential { kappa: 1.0 }, 1.0);
        let d = Drivers::sample(&model, TimeGrid::over(1.0, 4).unwrap(), 1, 0, SeedMode::Independent).unwrap();
        assert!(matches!(
            vmv_series(&model.kernel, &d, TruncationLevels::new(1, 2, 1), &[4]),
            Err(HambitError::TruncationExceedsDim { .. })
        ));
        let grid = d.grid();
        assert_eq!(truncation_error_bound(&model, TruncationLevels::new(1, 1, 1), grid, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn conditional_covariance_examples() {
        let model = scalar_model(ScalarKernel::Exponential { kappa: 1.0 }, 1.0);
        let grid = TimeGrid::over(1.0, 1000).unwrap();
        let s = sample_volatility(&model.vol, grid.dt(), grid.n_steps(), 1, 0, SeedMode::Independent).unwrap();
        let q = CovarianceOp::identity(1);
        let c = conditional_covariance(&model.kernel, s.path(0), &q, 1.0).unwrap();
        let exact = (1.0 - (-2.0f64).exp()) / 2.0;
        // the left-point sum skips the lag-zero end, an O(Δs) deficit
        assert!((c[(0, 0)] - exact).abs() < 2.0 * grid.dt());
        let zero_q = conditional_covariance(&model.kernel, s.path(0), &CovarianceOp::zeros(1), 1.0).unwrap();
        assert_eq!(zero_q[(0, 0)], 0.0);
        assert!(matches!(
            conditional_covariance(&model.kernel, s.path(0), &q, 0.00037),
            Err(HambitError::NotOnGrid { .. })
        ));
    }

    #[test]
    fn stationary_covariance_examples() {
        let k1 = KernelSpec::single(ScalarKernel::Exponential { kappa: 1.0 }, LinearMap::identity(1)).unwrap();
        let q = CovarianceOp::identity(1);
        let v1 = stationary_covariance(&k1, &[1.0], &q, 1.0, 1e-10).unwrap()[(0, 0)];
        assert_abs_diff_eq!(v1, 0.5, epsilon = 1e-9);
        let k2 = KernelSpec::single(ScalarKernel::Exponential { kappa: 2.0 }, LinearMap::identity(1)).unwrap();
        let v2 = stationary_covariance(&k2, &[1.0], &q, 1.0, 1e-10).unwrap()[(0, 0)];
        assert_abs_diff_eq!(v2, v1 / 2.0, epsilon = 1e-9);
        let zero = stationary_covariance(&k1, &[1.0], &CovarianceOp::zeros(1), 1.0, 1e-10).unwrap();
        assert_eq!(zero[(0, 0)], 0.0);
        let flat = KernelSpec::single(ScalarKernel::Constant { value: 1.0 }, LinearMap::identity(1)).unwrap();
        assert!(matches!(
            stationary_covariance(&flat, &[1.0], &q, 1.0, 1e-10),
            Err(HambitError::NonDecayingKernel { component: 0 })
        ));
    }

    #[test]
    fn projection_examples() {
        let model = scalar_model(ScalarKernel::Exponential { kappa: 1.0 }, 1.0);
        let s = sample_volatility(&model.vol, 0.25, 8, 1, 0, SeedMode::Independent).unwrap();
        let q = CovarianceOp::identity(1);
        let pr = project(&model.kernel, s.path(0), &q, 2.0, 0.5, &[vec![1.0]]).unwrap();
        assert_eq!(pr.gram[(0, 0)], 1.0);
        assert_abs_diff_eq!(pr.c[(0, 0)], (-3.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(pr.gamma[(0, 0)], (-1.5f64).exp(), epsilon = 1e-15);

        let k2 = KernelSpec::single(ScalarKernel::Constant { value: 1.0 }, LinearMap::identity(2)).unwrap();
        let zero = VolatilityModel::constant(vec![0.0]).unwrap();
        let s0 = sample_volatility(&zero, 0.25, 4, 1, 0, SeedMode::Independent).unwrap();
        let basis = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pr = project(&k2, s0.path(0), &CovarianceOp::identity(2), 1.0, 0.5, &basis).unwrap();
        assert_eq!(pr.gram, DMatrix::identity(2, 2));
        assert_eq!(pr.c, DMatrix::zeros(2, 2));
        assert_eq!(pr.gamma, DMatrix::zeros(2, 2));
        let dependent = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        assert!(matches!(
            project(&k2, s0.path(0), &CovarianceOp::identity(2), 1.0, 0.5, &dependent),
            Err(HambitError::SingularGram { .. })
        ));
    }

    #[test]
    fn characteristic_function_trivial_direction() {
        let model = scalar_model(ScalarKernel::Exponential { kappa: 1.0 }, 1.0);
        let d = Drivers::sample(&model, TimeGrid::over(1.0, 10).unwrap(), 50, 2, SeedMode::Independent).unwrap();
        let x = hambit_direct(&model.kernel, &d, &[10]).unwrap();
        let cf = char_functional_mc(&x, 1.0, &[0.0]).unwrap();
        assert_eq!(cf.value, Complex64::new(1.0, 0.0));
        assert_eq!(cf.stderr, 0.0);
        assert_eq!(char_functional_analytic(&model, d.sigma(), 1.0, &[0.0]).unwrap(), Complex64::new(1.0, 0.0));
        let cf = char_functional_mc(&x, 1.0, &[1.3]).unwrap();
        assert!(cf.value.norm() <= 1.0);
    }

    #[test]
    fn analytic_functional_compound_poisson_closed_form() {
        let noise = LevySpec::compound_poisson(1.5, CovarianceOp::new(vec![0.8]).unwrap()).unwrap();
        let model = HambitModel::new(
            KernelSpec::single(ScalarKernel::Constant { value: 1.0 }, LinearMap::identity(1)).unwrap(),
            VolatilityModel::constant(vec![1.0]).unwrap(),
            noise,
        )
        .unwrap();
        let s = sample_volatility(&model.vol, 0.1, 20, 1, 0, SeedMode::Independent).unwrap();
        let h = 0.9;
        let v = char_functional_analytic(&model, &s, 2.0, &[h]).unwrap();
        let exact = (2.0 * 1.5 * ((-h * h * 0.8 / 2.0f64).exp() - 1.0)).exp();
        assert_abs_diff_eq!(v.re, exact, epsilon = 1e-12);
    }

    #[test]
    fn shared_seed_is_rejected_for_random_volatility() {
        let model = HambitModel::new(
            KernelSpec::single(ScalarKernel::Exponential { kappa: 1.0 }, LinearMap::identity(1)).unwrap(),
            VolatilityModel::scalar_lss(1.0, LevySpec::wiener(CovarianceOp::identity(1))).unwrap(),
            LevySpec::wiener(CovarianceOp::identity(1)),
        )
        .unwrap();
        let s = sample_volatility(&model.vol, 0.1, 10, 2, 0, SeedMode::Shared).unwrap();
        assert!(matches!(
            char_functional_analytic(&model, &s, 1.0, &[1.0]),
            Err(HambitError::SharedSeed)
        ));
    }

    #[test]
    fn isometry_zero_volatility() {
        let model = scalar_model(ScalarKernel::Exponential { kappa: 1.0 }, 0.0);
        let d = Drivers::sample(&model, TimeGrid::over(1.0, 10).unwrap(), 20, 2, SeedMode::Independent).unwrap();
        let x = hambit_direct(&model.kernel, &d, &[10]).unwrap();
        let iso = isometry_check(&x, &model, d.sigma(), 1.0).unwrap();
        assert_eq!(iso.empirical.mean, 0.0);
        assert_eq!(iso.quadrature, 0.0);
    }

    #[test]
    fn projection_reconstructs_in_a_basis() {
        let xi = vec![vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 2.0]];
        let f = [0.3, -1.2, 2.5];
        let a = projection_coefficients(&f, &xi).unwrap();
        let back = reconstruct(&a, &xi);
        for (x, y) in back.iter().zip(&f) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }
}
