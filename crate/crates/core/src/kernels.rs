//! Finite-rank kernels `Γ(t,s)(σ) = Σ_i (σ, u_{φ_i}) g_i(t,s) B_i` and the
//! stochastic volatility models that feed them.
//!
//! Every scalar kernel depends on `t − s` only, so each [`KernelSpec`] is
//! stationary.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{HambitError, Result};
use crate::hilbert::LinearMap;
use crate::linalg::{self, CLIP_TOL};
use crate::noise::LevySpec;
use crate::rng::{path_rng, Domain, SeedMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarKernel {
    /// `e^{−κ(t−s)}`.
    Exponential { kappa: f64 },
    Constant { value: f64 },
    /// `e^{−κ(t−s+offset)}`: an exponential kernel read at a spatial offset.
    ShiftedExponential { kappa: f64, offset: f64 },
}

impl ScalarKernel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScalarKernel::Exponential { kappa } => kappa.is_finite() && kappa >= 0.0,
            ScalarKernel::Constant { value } => value.is_finite(),
            ScalarKernel::ShiftedExponential { kappa, offset } => {
                kappa.is_finite() && kappa >= 0.0 && offset.is_finite() && offset >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(HambitError::param("scalar kernel", format!("invalid parameters in {self:?}")))
        }
    }

    pub fn eval(&self, t: f64, s: f64) -> f64 {
        self.eval_lag(t - s)
    }

    pub fn eval_lag(&self, lag: f64) -> f64 {
        match *self {
            ScalarKernel::Exponential { kappa } => (-kappa * lag).exp(),
            ScalarKernel::Constant { value } => value,
            ScalarKernel::ShiftedExponential { kappa, offset } => (-kappa * (lag + offset)).exp(),
        }
    }

    /// Exponential decay rate, if the kernel decays to zero.
    pub fn decay_rate(&self) -> Option<f64> {
        match *self {
            ScalarKernel::Exponential { kappa } | ScalarKernel::ShiftedExponential { kappa, .. }
                if kappa > 0.0 =>
            {
                Some(kappa)
            }
            _ => None,
        }
    }

    /// `sup |g|` over `t ≥ s`.
    pub fn sup_abs(&self) -> f64 {
        match *self {
            ScalarKernel::Exponential { .. } => 1.0,
            ScalarKernel::Constant { value } => value.abs(),
            ScalarKernel::ShiftedExponential { kappa, offset } => (-kappa * offset).exp(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScalarKernel::Exponential { .. } => "exponential",
            ScalarKernel::Constant { .. } => "constant",
            ScalarKernel::ShiftedExponential { .. } => "shifted_exponential",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelComponent {
    /// Index `n` of the functional `σ ↦ (σ, u_n)`.
    pub phi: usize,
    pub g: ScalarKernel,
    /// `B_i: 𝒱 → ℋ`, stored as a `dim_h × dim_v` matrix.
    pub b: LinearMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    dim_u: usize,
    dim_v: usize,
    dim_h: usize,
    components: Vec<KernelComponent>,
}

impl KernelSpec {
    pub fn new(dim_u: usize, components: Vec<KernelComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| HambitError::param("kernel", "needs at least one component"))?;
        let (dim_h, dim_v) = (first.b.rows(), first.b.cols());
        if dim_u == 0 {
            return Err(HambitError::param("dim_u", "must be at least 1"));
        }
        for (i, c) in components.iter().enumerate() {
            c.g.validate()?;
            if c.phi >= dim_u {
                return Err(HambitError::param(
                    format!("kernel[{i}].phi"),
                    format!("index {} out of range for dim_u = {dim_u}", c.phi),
                ));
            }
            if c.b.rows() != dim_h {
                return Err(HambitError::dims("kernel component rows", dim_h, c.b.rows()));
            }
            if c.b.cols() != dim_v {
                return Err(HambitError::dims("kernel component cols", dim_v, c.b.cols()));
            }
        }
        Ok(Self {
            dim_u,
            dim_v,
            dim_h,
            components,
        })
    }

    /// `Γ(t,s)(σ) = g(t,s)·σ₀·B` with a single scalar coordinate.
    pub fn single(g: ScalarKernel, b: LinearMap) -> Result<Self> {
        Self::new(1, vec![KernelComponent { phi: 0, g, b }])
    }

    pub fn dim_u(&self) -> usize {
        self.dim_u
    }

    pub fn dim_v(&self) -> usize {
        self.dim_v
    }

    pub fn dim_h(&self) -> usize {
        self.dim_h
    }

    pub fn components(&self) -> &[KernelComponent] {
        &self.components
    }

    /// Coefficients `σ_{φ_i} g_i(t,s)` of each component.
    pub(crate) fn weights_into(&self, lag: f64, sigma: &[f64], out: &mut [f64]) {
        for (w, c) in out.iter_mut().zip(&self.components) {
            let s = sigma[c.phi];
            *w = if s == 0.0 { 0.0 } else { s * c.g.eval_lag(lag) };
        }
    }

    /// `Γ(t,s)(σ)` as a dense matrix, without argument checks.
    pub(crate) fn gamma_matrix(&self, lag: f64, sigma: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim_h, self.dim_v);
        for c in &self.components {
            let w = sigma[c.phi] * c.g.eval_lag(lag);
            if w != 0.0 {
                out += c.b.matrix() * w;
            }
        }
        out
    }

    /// `Γ(t,s)(σ)* h` in 𝒱.
    pub(crate) fn adjoint_apply(&self, lag: f64, sigma: &[f64], h: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for c in &self.components {
            let w = sigma[c.phi] * c.g.eval_lag(lag);
            if w == 0.0 {
                continue;
            }
            let b = c.b.matrix();
            for (m, o) in out.iter_mut().enumerate() {
                let col: f64 = (0..self.dim_h).map(|k| b[(k, m)] * h[k]).sum();
                *o += w * col;
            }
        }
    }

    /// Bound on `‖Γ(t,s)‖_op` as a map 𝒰 → L(𝒱,ℋ): the components sharing
    /// a functional are summed exactly, the rest by Cauchy–Schwarz.
    pub fn gamma_op_norm_bound(&self, t: f64, s: f64) -> Result<f64> {
        check_order(t, s)?;
        Ok(op_norm_bound(self.dim_u, |n| self.grouped(n, t - s)))
    }

    fn grouped(&self, n: usize, lag: f64) -> Option<DMatrix<f64>> {
        let mut acc: Option<DMatrix<f64>> = None;
        for c in self.components.iter().filter(|c| c.phi == n) {
            let term = c.b.matrix() * c.g.eval_lag(lag);
            acc = Some(match acc {
                Some(a) => a + term,
                None => term,
            });
        }
        acc
    }

    fn check_sigma(&self, sigma: &[f64]) -> Result<()> {
        if sigma.len() != self.dim_u {
            return Err(HambitError::dims("volatility vector", self.dim_u, sigma.len()));
        }
        Ok(())
    }
}

fn op_norm_bound(dim_u: usize, mut block: impl FnMut(usize) -> Option<DMatrix<f64>>) -> f64 {
    let mut total = 0.0;
    for n in 0..dim_u {
        if let Some(m) = block(n) {
            let norm = LinearMap::from_matrix(m).map_or(f64::INFINITY, |m| m.op_norm());
            total += norm * norm;
        }
    }
    total.sqrt()
}

/// Bound on `‖Γ₁(t,s) − Γ₂(t,s)‖_op`.
pub fn gamma_diff_op_norm_bound(k1: &KernelSpec, k2: &KernelSpec, t: f64, s: f64) -> Result<f64> {
    check_order(t, s)?;
    if (k1.dim_u, k1.dim_v, k1.dim_h) != (k2.dim_u, k2.dim_v, k2.dim_h) {
        return Err(HambitError::param("kernels", "compared kernels must share dimensions"));
    }
    let lag = t - s;
    Ok(op_norm_bound(k1.dim_u, |n| match (k1.grouped(n, lag), k2.grouped(n, lag)) {
        (Some(a), Some(b)) => Some(a - b),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(-b),
        (None, None) => None,
    }))
}

fn check_order(t: f64, s: f64) -> Result<()> {
    if s > t || s.is_nan() || t.is_nan() {
        return Err(HambitError::TimeOrder { t, s });
    }
    Ok(())
}

/// `Γ(t,s)(σ)`.
pub fn eval_gamma(spec: &KernelSpec, t: f64, s: f64, sigma: &[f64]) -> Result<LinearMap> {
    check_order(t, s)?;
    spec.check_sigma(sigma)?;
    LinearMap::from_matrix(spec.gamma_matrix(t - s, sigma))
}

/// A constant `C` with `‖Γ(s+x,s)(σ) − Γ(s+y,s)(σ)‖_op ≤ √C |x−y| |σ|`:
/// `C = (Σ_i κ_i ‖B_i‖_op)²`.
pub fn kernel_lipschitz_bound(spec: &KernelSpec, horizon: f64) -> Result<f64> {
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(HambitError::param("horizon", format!("must be nonnegative, got {horizon}")));
    }
    let mut root = 0.0;
    for c in &spec.components {
        match c.g {
            ScalarKernel::Exponential { kappa } => root += kappa * c.b.op_norm(),
            ScalarKernel::Constant { .. } => {}
            ScalarKernel::ShiftedExponential { .. } => {
                return Err(HambitError::UnsupportedKernel {
                    operation: "kernel_lipschitz_bound",
                    variant: c.g.name().to_string(),
                })
            }
        }
    }
    Ok(root * root)
}

/// Matrix-valued Ornstein–Uhlenbeck process `d𝒴 = ℂ𝒴 dt + d𝒵` with
/// `ℂ𝒴 = (C𝒴 + 𝒴Cᵀ)/2`. `𝒵` jumps at rate `jump_intensity` by
/// `jump_scale · vvᵀ` with `v ~ N(0, I)`, so `E[𝒵(1)] = intensity·scale·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorOu {
    c: DMatrix<f64>,
    jump_intensity: f64,
    jump_scale: f64,
    y0: DMatrix<f64>,
}

impl OperatorOu {
    /// Requires `C + Cᵀ` negative semidefinite and `Y0` symmetric PSD.
    pub fn new(c: DMatrix<f64>, jump_intensity: f64, jump_scale: f64, y0: DMatrix<f64>) -> Result<Self> {
        let d = c.nrows();
        if d == 0 || c.ncols() != d {
            return Err(HambitError::param("operator_ou.c", "must be a nonempty square matrix"));
        }
        if y0.nrows() != d || y0.ncols() != d {
            return Err(HambitError::dims("operator_ou.y0", d, y0.nrows()));
        }
        if c.iter().chain(y0.iter()).any(|v| !v.is_finite()) {
            return Err(HambitError::param("operator_ou", "entries must be finite"));
        }
        let sym_part = &c + c.transpose();
        let top = linalg::sym_eigen(&sym_part).0[0];
        if top > CLIP_TOL {
            return Err(HambitError::param(
                "operator_ou.c",
                format!("symmetric part must be negative semidefinite, largest eigenvalue {top}"),
            ));
        }
        if (&y0 - y0.transpose()).amax() > 1e-12 * (1.0 + y0.amax()) {
            return Err(HambitError::param("operator_ou.y0", "must be symmetric"));
        }
        let min = linalg::min_eigenvalue(&y0);
        if min < -CLIP_TOL {
            return Err(HambitError::param(
                "operator_ou.y0",
                format!("must be positive semidefinite, smallest eigenvalue {min}"),
            ));
        }
        for (name, v) in [("jump_intensity", jump_intensity), ("jump_scale", jump_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(HambitError::param(
                    format!("operator_ou.{name}"),
                    format!("must be finite and nonnegative, got {v}"),
                ));
            }
        }
        Ok(Self {
            c,
            jump_intensity,
            jump_scale,
            y0,
        })
    }

    pub fn d(&self) -> usize {
        self.c.nrows()
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn y0(&self) -> &DMatrix<f64> {
        &self.y0
    }

    pub fn jump_intensity(&self) -> f64 {
        self.jump_intensity
    }

    pub fn jump_scale(&self) -> f64 {
        self.jump_scale
    }

    /// `E[𝒵(1)]`.
    pub fn mean_jump_rate(&self) -> DMatrix<f64> {
        DMatrix::identity(self.d(), self.d()) * (self.jump_intensity * self.jump_scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VolatilityModel {
    Constant { sigma0: Vec<f64> },
    /// `σ(t) = ∫₀ᵗ e^{−ρ(t−s)} dU(s)` with `U` a Lévy process on 𝒰.
    ScalarLss { rho: f64, driver: LevySpec },
    /// `σ = 𝒴^{1/2}`, flattened row-major into `d²` coordinates.
    OperatorOu(OperatorOu),
}

impl VolatilityModel {
    pub fn constant(sigma0: Vec<f64>) -> Result<Self> {
        if sigma0.is_empty() || sigma0.iter().any(|v| !v.is_finite()) {
            return Err(HambitError::param("sigma0", "must be a nonempty finite vector"));
        }
        Ok(VolatilityModel::Constant { sigma0 })
    }

    pub fn scalar_lss(rho: f64, driver: LevySpec) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(HambitError::param("rho", format!("must be positive, got {rho}")));
        }
        Ok(VolatilityModel::ScalarLss { rho, driver })
    }

    pub fn dim_u(&self) -> usize {
        match self {
            VolatilityModel::Constant { sigma0 } => sigma0.len(),
            VolatilityModel::ScalarLss { driver, .. } => driver.dim(),
            VolatilityModel::OperatorOu(ou) => ou.d() * ou.d(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, VolatilityModel::Constant { .. })
    }

    /// `E[(σ(t), u_n)²]`, exact for the constant and LSS models and bounded
    /// by `E‖σ(t)‖²_HS` for the operator model.
    pub fn second_moment_bound(&self, n: usize, t: f64) -> f64 {
        match self {
            VolatilityModel::Constant { sigma0 } => sigma0[n] * sigma0[n],
            VolatilityModel::ScalarLss { rho, driver } => {
                let lambda = driver.covariance_of().eigenvalues()[n];
                lambda * -(-2.0 * rho * t).exp_m1() / (2.0 * rho)
            }
            VolatilityModel::OperatorOu(ou) => expected_hs_norm_sq(ou, t),
        }
    }

    /// `E|σ(t)|²_𝒰`.
    pub fn expected_norm_sq(&self, t: f64) -> f64 {
        match self {
            VolatilityModel::OperatorOu(ou) => expected_hs_norm_sq(ou, t),
            _ => (0..self.dim_u()).map(|n| self.second_moment_bound(n, t)).sum(),
        }
    }
}

/// Sampled `σ(t_n)` for `n = 0..=n_steps`; `σ(t_n)` acts on `[t_n, t_{n+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityPaths {
    n_paths: usize,
    n_steps: usize,
    dt: f64,
    dim: usize,
    data: Vec<f64>,
    clipped_steps: usize,
    min_eigenvalue: f64,
    seed_mode: SeedMode,
}

/// One sampled volatility path.
#[derive(Debug, Clone, Copy)]
pub struct SigmaPath<'a> {
    pub dt: f64,
    pub dim: usize,
    pub values: &'a [f64],
}

impl<'a> SigmaPath<'a> {
    pub fn new(dt: f64, dim: usize, values: &'a [f64]) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(HambitError::param("dt", format!("must be positive, got {dt}")));
        }
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(HambitError::param("sigma path", "length must be a positive multiple of dim"));
        }
        Ok(Self { dt, dim, values })
    }

    pub fn n_points(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn at(&self, n: usize) -> &'a [f64] {
        &self.values[n * self.dim..(n + 1) * self.dim]
    }
}

impl VolatilityPaths {
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

    /// Number of Euler steps whose state needed eigenvalue clipping.
    pub fn clipped_steps(&self) -> usize {
        self.clipped_steps
    }

    /// Smallest state eigenvalue seen before clipping (`+∞` for models
    /// without a matrix state).
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn seed_mode(&self) -> SeedMode {
        self.seed_mode
    }

    pub fn path(&self, p: usize) -> SigmaPath<'_> {
        let len = (self.n_steps + 1) * self.dim;
        SigmaPath {
            dt: self.dt,
            dim: self.dim,
            values: &self.data[p * len..(p + 1) * len],
        }
    }

    pub fn at(&self, p: usize, n: usize) -> &[f64] {
        let start = (p * (self.n_steps + 1) + n) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Every `factor`-th value, i.e. the same paths on a coarser grid.
    pub fn subsample(&self, factor: usize) -> Result<VolatilityPaths> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(HambitError::param(
                "factor",
                format!("{factor} does not divide {} steps", self.n_steps),
            ));
        }
        let coarse = self.n_steps / factor;
        let mut data = Vec::with_capacity(self.n_paths * (coarse + 1) * self.dim);
        for p in 0..self.n_paths {
            for n in 0..=coarse {
                data.extend_from_slice(self.at(p, n * factor));
            }
        }
        Ok(Self {
            n_steps: coarse,
            dt: self.dt * factor as f64,
            data,
            ..self.clone()
        })
    }

    pub fn take_paths(&self, n_paths: usize) -> VolatilityPaths {
        let n = n_paths.min(self.n_paths);
        Self {
            n_paths: n,
            data: self.data[..n * (self.n_steps + 1) * self.dim].to_vec(),
            ..self.clone()
        }
    }
}

struct PathStats {
    clipped: usize,
    min_eigenvalue: f64,
}

/// Samples `n_paths` volatility paths on `t_n = n·dt`.
pub fn sample_volatility(
    model: &VolatilityModel,
    dt: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    mode: SeedMode,
) -> Result<VolatilityPaths> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(HambitError::param("dt", format!("must be positive, got {dt}")));
    }
    let dim = model.dim_u();
    let len = (n_steps + 1) * dim;
    let mut data = vec![0.0; n_paths * len];
    let domain = match mode {
        SeedMode::Independent => Domain::Volatility,
        SeedMode::Shared => Domain::Noise,
    };
    let stats: Vec<PathStats> = match model {
        VolatilityModel::Constant { sigma0 } => {
            for chunk in data.chunks_exact_mut(dim) {
                chunk.copy_from_slice(sigma0);
            }
            vec![]
        }
        VolatilityModel::ScalarLss { rho, driver } => {
            let sampler = LssSampler::new(*rho, driver, dt)?;
            data.par_chunks_mut(len).enumerate().for_each(|(p, path)| {
                let mut rng = path_rng(seed, domain, p);
                sampler.fill(&mut rng, path, dim);
            });
            vec![]
        }
        VolatilityModel::OperatorOu(ou) => {
            let jumps = if ou.jump_intensity * dt > 0.0 && ou.jump_scale > 0.0 {
                Some(
                    Poisson::new(ou.jump_intensity * dt)
                        .map_err(|e| HambitError::param("operator_ou.jump_intensity", e.to_string()))?,
                )
            } else {
                None
            };
            data.par_chunks_mut(len.max(1))
                .enumerate()
                .map(|(p, path)| {
                    let mut rng = path_rng(seed, domain, p);
                    ou_path(ou, jumps.as_ref(), dt, &mut rng, path)
                })
                .collect()
        }
    };
    Ok(VolatilityPaths {
        n_paths,
        n_steps,
        dt,
        dim,
        data,
        clipped_steps: stats.iter().map(|s| s.clipped).sum(),
        min_eigenvalue: stats.iter().map(|s| s.min_eigenvalue).fold(f64::INFINITY, f64::min),
        seed_mode: mode,
    })
}

struct LssSampler {
    decay: f64,
    rho: f64,
    dt: f64,
    gaussian_sd: Option<Vec<f64>>,
    jumps: Option<crate::noise::IncrementSampler>,
}

impl LssSampler {
    fn new(rho: f64, driver: &LevySpec, dt: f64) -> Result<Self> {
        let decay = (-rho * dt).exp();
        Ok(match driver {
            LevySpec::Wiener { q } => {
                let var_factor = -(-2.0 * rho * dt).exp_m1() / (2.0 * rho);
                Self {
                    decay,
                    rho,
                    dt,
                    gaussian_sd: Some(q.eigenvalues().iter().map(|l| (l * var_factor).sqrt()).collect()),
                    jumps: None,
                }
            }
            LevySpec::CompensatedCompoundPoisson { .. } => Self {
                decay,
                rho,
                dt,
                gaussian_sd: None,
                jumps: Some(driver.sampler(dt)?),
            },
        })
    }

    /// Exact OU transitions: the Gaussian convolution in closed form, or the
    /// individually discounted jumps with uniform arrival times.
    fn fill(&self, rng: &mut ChaCha8Rng, path: &mut [f64], dim: usize) {
        path[..dim].fill(0.0);
        for n in 1..path.len() / dim {
            let (prev, next) = path.split_at_mut(n * dim);
            let prev = &prev[(n - 1) * dim..];
            let next = &mut next[..dim];
            for (o, p) in next.iter_mut().zip(prev) {
                *o = self.decay * p;
            }
            if let Some(sd) = &self.gaussian_sd {
                for (o, s) in next.iter_mut().zip(sd) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o += s * z;
                }
            } else if let Some(jumps) = self.jumps.as_ref().and_then(|j| j.jumps(rng, dim)) {
                for jump in jumps {
                    let arrival: f64 = rng.random::<f64>() * self.dt;
                    let discount = (-self.rho * (self.dt - arrival)).exp();
                    for (o, j) in next.iter_mut().zip(&jump) {
                        *o += discount * j;
                    }
                }
            }
        }
    }
}

fn ou_path(
    ou: &OperatorOu,
    jumps: Option<&Poisson<f64>>,
    dt: f64,
    rng: &mut ChaCha8Rng,
    path: &mut [f64],
) -> PathStats {
    let d = ou.d();
    let mut y = ou.y0.clone();
    let mut stats = PathStats {
        clipped: 0,
        min_eigenvalue: f64::INFINITY,
    };
    let mut v = nalgebra::DVector::<f64>::zeros(d);
    for (n, out) in path.chunks_exact_mut(d * d).enumerate() {
        if n > 0 {
            let drift = (&ou.c * &y + &y * ou.c.transpose()) * (0.5 * dt);
            y += drift;
            if let Some(counts) = jumps {
                let k = counts.sample(rng) as usize;
                for _ in 0..k {
                    for vi in v.iter_mut() {
                        *vi = rng.sample(StandardNormal);
                    }
                    y += &v * v.transpose() * ou.jump_scale;
                }
            }
            y = (&y + y.transpose()) * 0.5;
        }
        let root = linalg::sym_sqrt(&y);
        stats.min_eigenvalue = stats.min_eigenvalue.min(root.min_eigenvalue);
        if root.min_eigenvalue < 0.0 {
            if root.clipped {
                stats.clipped += 1;
            }
            y = linalg::clip_psd(&y).0;
        }
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = root.root[(r, c)];
            }
        }
    }
    stats
}

/// `E‖σ(t)‖²_HS = Tr(e^{ℂt}Y₀) + ∫₀ᵗ Tr(e^{ℂs} E[𝒵(1)]) ds`, the integral by
/// composite Simpson on a fixed fine grid.
pub fn expected_hs_norm_sq(model: &OperatorOu, t: f64) -> f64 {
    const INTERVALS: usize = 2000;
    let half = |m: &DMatrix<f64>, s: f64| -> DMatrix<f64> { (m * (0.5 * s)).exp() };
    let conj = |e: &DMatrix<f64>, a: &DMatrix<f64>| (e * a * e.transpose()).trace();
    let initial = conj(&half(&model.c, t), &model.y0);
    let rate = model.mean_jump_rate();
    if t <= 0.0 || rate.amax() == 0.0 {
        return initial;
    }
    let h = t / INTERVALS as f64;
    let step = half(&model.c, h);
    let mut e = DMatrix::identity(model.d(), model.d());
    let mut integral = 0.0;
    for k in 0..=INTERVALS {
        let weight = if k == 0 || k == INTERVALS {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        integral += weight * conj(&e, &rate);
        e = &step * e;
    }
    initial + integral * h / 3.0
}
