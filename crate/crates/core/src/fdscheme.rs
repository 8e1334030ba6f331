//! Upwind finite differences for the transport SPDE `dY = ∂ξ Y dt + β(t) dL(t)`.
//!
//! The scheme is `y_j^{n+1} = λ y_{j+1}^n + (1−λ) y_j^n + β_j^n ΔL^n` with
//! `λ = Δt/Δx ≤ 1`. Information travels left by at most one node per step,
//! so the internal grid carries `J + N + 1` nodes and the active range
//! shrinks by one node per step; after `N` steps exactly the output nodes
//! `0..=J` remain. For a Hambit field `β(t) = Γ(t+·, t)(σ(t))`, `Y₀ = 0` and
//! the boundary value `y_0^n` approximates `X(t_n)`.

use crate::error::{HambitError, Result};
use crate::hilbert::{apply_t_power_binomial, binomial_weights, courant_number, evaluate, GridFunction, LinearMap};
use crate::kernels::KernelSpec;
use crate::simulate::{Drivers, PathEnsemble};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FDConfig {
    dt: f64,
    dx: f64,
    n_steps: usize,
    n_out: usize,
    lambda: f64,
}

impl FDConfig {
    /// `n_steps` time steps `dt` and output nodes `0..=n_out` spaced `dx`.
    pub fn new(dt: f64, dx: f64, n_steps: usize, n_out: usize) -> Result<Self> {
        let lambda = courant_number(dt, dx)?;
        if n_steps == 0 {
            return Err(HambitError::param("n_steps", "must be at least 1"));
        }
        if n_out == 0 {
            return Err(HambitError::param("n_out", "need at least two output nodes (J ≥ 1)"));
        }
        Ok(Self {
            dt,
            dx,
            n_steps,
            n_out,
            lambda,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Index `J` of the last output node.
    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn internal_nodes(&self) -> usize {
        self.n_out + self.n_steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
}

/// Scheme values `y_j^n` on the active nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeState {
    n: usize,
    dx: f64,
    dim: usize,
    values: Vec<f64>,
    active: usize,
}

impl SchemeState {
    /// `y_j^0 = Y₀(x_j)` on the internal grid, extending `y0` flat if short.
    pub fn initial(y0: &GridFunction, config: &FDConfig) -> Result<Self> {
        if y0.delta_x() != config.dx {
            return Err(HambitError::param("y0.delta_x", "initial condition must live on the scheme grid"));
        }
        let nodes = config.internal_nodes();
        let mut values = Vec::with_capacity(nodes * y0.dim());
        for j in 0..nodes {
            values.extend_from_slice(y0.node_extended(j));
        }
        Ok(Self {
            n: 0,
            dx: config.dx,
            dim: y0.dim(),
            values,
            active: nodes,
        })
    }

    /// A state whose active range is exactly the nodes of `f`.
    pub fn from_grid(f: &GridFunction) -> Self {
        Self {
            n: 0,
            dx: f.delta_x(),
            dim: f.dim(),
            values: f.values().to_vec(),
            active: f.n_nodes(),
        }
    }

    pub fn zeros(config: &FDConfig, dim: usize) -> Self {
        Self {
            n: 0,
            dx: config.dx,
            dim,
            values: vec![0.0; config.internal_nodes() * dim],
            active: config.internal_nodes(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn active_nodes(&self) -> usize {
        self.active
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn boundary(&self) -> &[f64] {
        self.node(0)
    }

    /// The first `n_nodes` active nodes as a grid function.
    pub fn to_grid(&self, n_nodes: usize) -> Result<GridFunction> {
        let n = n_nodes.min(self.active);
        GridFunction::new(self.dx, self.dim, self.values[..n * self.dim].to_vec())
    }

    /// One step with precomputed noise terms `β_j^n ΔL^n` (node-major).
    pub(crate) fn advance(&mut self, forcing: &[f64], lambda: f64) -> Result<()> {
        if self.active < 2 {
            return Err(HambitError::GridExhausted { steps: self.n });
        }
        let d = self.dim;
        let next = self.active - 1;
        debug_assert!(forcing.len() >= next * d);
        for j in 0..next {
            for c in 0..d {
                let here = self.values[j * d + c];
                let right = self.values[(j + 1) * d + c];
                self.values[j * d + c] = lambda * right + (1.0 - lambda) * here + forcing[j * d + c];
            }
        }
        self.active = next;
        self.n += 1;
        Ok(())
    }
}

/// `β_j^n` for every node of one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaRow {
    maps: Vec<LinearMap>,
}

impl BetaRow {
    pub fn new(maps: Vec<LinearMap>) -> Result<Self> {
        let first = maps.first().ok_or_else(|| HambitError::param("beta row", "needs at least one node"))?;
        let shape = (first.rows(), first.cols());
        if let Some(bad) = maps.iter().find(|m| (m.rows(), m.cols()) != shape) {
            return Err(HambitError::dims("beta row map rows", shape.0, bad.rows()));
        }
        Ok(Self { maps })
    }

    pub fn zeros(n_nodes: usize, dim_h: usize, dim_v: usize) -> Self {
        Self {
            maps: vec![LinearMap::zeros(dim_h, dim_v); n_nodes],
        }
    }

    /// `β_j^n = Γ(t_n + x_j, t_n)(σ(t_n))`, `j < n_nodes`.
    pub fn hambit(kernel: &KernelSpec, sigma: &[f64], dx: f64, n_nodes: usize) -> Result<Self> {
        if sigma.len() != kernel.dim_u() {
            return Err(HambitError::dims("volatility vector", kernel.dim_u(), sigma.len()));
        }
        let maps = (0..n_nodes)
            .map(|j| LinearMap::from_matrix(kernel.gamma_matrix(j as f64 * dx, sigma)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(maps)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, j: usize) -> &LinearMap {
        &self.maps[j]
    }
}

/// Applies the scheme once to `state` with noise `β^n ΔL^n`.
pub fn step(state: &mut SchemeState, beta: &BetaRow, dl: &[f64], config: &FDConfig) -> Result<()> {
    let next = state.active.saturating_sub(1);
    if beta.len() < next {
        return Err(HambitError::dims("beta row nodes", next, beta.len()));
    }
    let first = beta.map(0);
    if first.rows() != state.dim {
        return Err(HambitError::dims("beta row range (dim_h)", state.dim, first.rows()));
    }
    if first.cols() != dl.len() {
        return Err(HambitError::dims("noise increment (dim_v)", first.cols(), dl.len()));
    }
    let mut forcing = vec![0.0; next * state.dim];
    for (j, out) in forcing.chunks_exact_mut(state.dim.max(1)).enumerate() {
        beta.map(j).apply_into(dl, out);
    }
    state.advance(&forcing, config.lambda)
}

/// Fields at one time index, restricted to the output nodes, one per path.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub fields: Vec<GridFunction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdOutput {
    /// `y_0^n` for `n = 0..=N`.
    pub boundary: PathEnsemble,
    /// Final fields on nodes `0..=J`, one per path.
    pub finals: Vec<GridFunction>,
    pub snapshots: Vec<Snapshot>,
}

fn check_inputs(config: &FDConfig, kernel: &KernelSpec, drivers: &Drivers) -> Result<()> {
    let grid = drivers.grid();
    if (grid.dt() - config.dt).abs() > 1e-12 * config.dt {
        return Err(HambitError::param("dt", "driver grid does not match the scheme time step"));
    }
    if grid.n_steps() < config.n_steps {
        return Err(HambitError::dims("driver steps", config.n_steps, grid.n_steps()));
    }
    if drivers.sigma().dim() != kernel.dim_u() {
        return Err(HambitError::dims("volatility dimension (dim_u)", kernel.dim_u(), drivers.sigma().dim()));
    }
    if drivers.increments().dim() != kernel.dim_v() {
        return Err(HambitError::dims("noise dimension (dim_v)", kernel.dim_v(), drivers.increments().dim()));
    }
    Ok(())
}

fn initial_grid(y0: Option<&GridFunction>, config: &FDConfig, dim_h: usize) -> Result<GridFunction> {
    match y0 {
        Some(f) if f.dim() != dim_h => Err(HambitError::dims("initial condition (dim_h)", dim_h, f.dim())),
        Some(f) if f.delta_x() != config.dx => {
            Err(HambitError::param("y0.delta_x", "initial condition must live on the scheme grid"))
        }
        Some(f) => GridFunction::sample(config.dx, dim_h, config.internal_nodes(), |x, out| {
            let j = (x / config.dx).round() as usize;
            out.copy_from_slice(f.node_extended(j));
        }),
        None => GridFunction::zeros(config.dx, dim_h, config.internal_nodes()),
    }
}

/// `β_j^n ΔL^n` for nodes `j < n_nodes`, node-major.
fn hambit_forcing(kernel: &KernelSpec, sigma: &[f64], dl: &[f64], dx: f64, n_nodes: usize, out: &mut Vec<f64>) {
    let dim_h = kernel.dim_h();
    let comps = kernel.components();
    let bdl: Vec<Vec<f64>> = comps
        .iter()
        .map(|c| {
            let mut v = vec![0.0; dim_h];
            c.b.apply_into(dl, &mut v);
            v
        })
        .collect();
    out.clear();
    out.resize(n_nodes * dim_h, 0.0);
    let mut weights = vec![0.0; comps.len()];
    for j in 0..n_nodes {
        kernel.weights_into(j as f64 * dx, sigma, &mut weights);
        let node = &mut out[j * dim_h..(j + 1) * dim_h];
        for (w, b) in weights.iter().zip(&bdl) {
            if *w != 0.0 {
                for (o, v) in node.iter_mut().zip(b) {
                    *o += w * v;
                }
            }
        }
    }
}

fn collect_output(
    config: &FDConfig,
    dim_h: usize,
    seed: u64,
    per_path: Vec<(Vec<f64>, GridFunction, Vec<GridFunction>)>,
    snapshot_steps: &[usize],
) -> Result<FdOutput> {
    let n_paths = per_path.len();
    let mut boundary = Vec::with_capacity(n_paths * (config.n_steps + 1) * dim_h);
    let mut finals = Vec::with_capacity(n_paths);
    let mut snapshots: Vec<Snapshot> = snapshot_steps
        .iter()
        .map(|&step| Snapshot {
            step,
            fields: Vec::with_capacity(n_paths),
        })
        .collect();
    for (b, f, snaps) in per_path {
        boundary.extend(b);
        finals.push(f);
        for (slot, field) in snapshots.iter_mut().zip(snaps) {
            slot.fields.push(field);
        }
    }
    let times = (0..=config.n_steps).map(|n| n as f64 * config.dt).collect();
    Ok(FdOutput {
        boundary: PathEnsemble::new(times, dim_h, n_paths, boundary, seed)?,
        finals,
        snapshots,
    })
}

fn check_snapshots(config: &FDConfig, snapshots: &[usize]) -> Result<()> {
    if snapshots.windows(2).any(|w| w[0] >= w[1]) || snapshots.last().is_some_and(|&s| s > config.n_steps) {
        return Err(HambitError::param(
            "snapshots",
            format!("steps must be increasing and at most {}", config.n_steps),
        ));
    }
    Ok(())
}

/// Runs the scheme for every path of `drivers`. `snapshots` lists time
/// indices at which the output-node field is kept.
pub fn run(
    config: &FDConfig,
    kernel: &KernelSpec,
    drivers: &Drivers,
    y0: Option<&GridFunction>,
    snapshots: &[usize],
) -> Result<FdOutput> {
    check_inputs(config, kernel, drivers)?;
    check_snapshots(config, snapshots)?;
    let dim_h = kernel.dim_h();
    let start = initial_grid(y0, config, dim_h)?;
    let per_path = (0..drivers.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut state = SchemeState::from_grid(&start);
            let sigma = drivers.sigma().path(p);
            let mut forcing = Vec::new();
            let mut boundary = Vec::with_capacity((config.n_steps + 1) * dim_h);
            let mut snaps = Vec::with_capacity(snapshots.len());
            let mut pending = snapshots.iter().peekable();
            boundary.extend_from_slice(state.boundary());
            for n in 0..=config.n_steps {
                if pending.next_if_eq(&&n).is_some() {
                    snaps.push(state.to_grid(config.n_out + 1)?);
                }
                if n == config.n_steps {
                    break;
                }
                let next = state.active_nodes() - 1;
                let dl = drivers.increments().increment(p, n);
                hambit_forcing(kernel, sigma.at(n), dl, config.dx, next, &mut forcing);
                state.advance(&forcing, config.lambda)?;
                boundary.extend_from_slice(state.boundary());
            }
            Ok((boundary, state.to_grid(config.n_out + 1)?, snaps))
        })
        .collect::<Result<Vec<_>>>()?;
    collect_output(config, dim_h, drivers.seed(), per_path, snapshots)
}

/// The same approximation from `Ỹⁿ = 𝒯ⁿỸ₀ + Σ_{i<n} 𝒯^{n−1−i} β̃ⁱ(ΔLⁱ)`,
/// with every power of `𝒯` expanded binomially. Cost grows like `N³` per
/// path; meant for cross-checking small instances.
pub fn run_iterative_form(
    config: &FDConfig,
    kernel: &KernelSpec,
    drivers: &Drivers,
    y0: Option<&GridFunction>,
) -> Result<FdOutput> {
    check_inputs(config, kernel, drivers)?;
    let dim_h = kernel.dim_h();
    let start = initial_grid(y0, config, dim_h)?;
    let nodes = config.internal_nodes();
    let per_path = (0..drivers.n_paths())
        .into_par_iter()
        .map(|p| {
            let sigma = drivers.sigma().path(p);
            let mut forcing = Vec::new();
            let noise_terms = (0..config.n_steps)
                .map(|i| {
                    let dl = drivers.increments().increment(p, i);
                    hambit_forcing(kernel, sigma.at(i), dl, config.dx, nodes, &mut forcing);
                    GridFunction::new(config.dx, dim_h, forcing.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let mut boundary = Vec::with_capacity((config.n_steps + 1) * dim_h);
            let mut last = start.clone();
            for n in 0..=config.n_steps {
                let mut y = apply_t_power_binomial(&start, config.dt, n)?;
                for (i, term) in noise_terms.iter().enumerate().take(n) {
                    let pushed = apply_t_power_binomial(term, config.dt, n - 1 - i)?;
                    y = y.combine(1.0, &pushed, 1.0)?;
                }
                boundary.extend_from_slice(y.node(0));
                last = y;
            }
            Ok((boundary, last.truncated(config.n_out + 1)?, Vec::new()))
        })
        .collect::<Result<Vec<_>>>()?;
    collect_output(config, dim_h, drivers.seed(), per_path, &[])
}

/// The time-discretized mild solution
/// `Y(t_n) = 𝒮_{t_n}Y₀ + Σ_{i<n} 𝒮_{t_n − t_{i+1}} βⁱ(ΔLⁱ)` with exact
/// shifts, i.e. `βⁱ` read directly from the kernel at
/// `Γ(t_i + x + t_n − t_{i+1}, t_i)`. At the boundary this is the direct
/// quadrature with every lag shortened by one step. `Y₀` is read by linear
/// interpolation.
pub fn exact_mild_reference(
    config: &FDConfig,
    kernel: &KernelSpec,
    drivers: &Drivers,
    y0: Option<&GridFunction>,
) -> Result<FdOutput> {
    check_inputs(config, kernel, drivers)?;
    let dim_h = kernel.dim_h();
    if let Some(f) = y0 {
        if f.dim() != dim_h {
            return Err(HambitError::dims("initial condition (dim_h)", dim_h, f.dim()));
        }
    }
    let n_steps = config.n_steps;
    let comps = kernel.components();
    let per_path = (0..drivers.n_paths())
        .into_par_iter()
        .map(|p| {
            let sigma = drivers.sigma().path(p);
            let bdl: Vec<Vec<f64>> = (0..n_steps)
                .flat_map(|i| {
                    let dl = drivers.increments().increment(p, i);
                    comps.iter().map(move |c| {
                        let mut v = vec![0.0; dim_h];
                        c.b.apply_into(dl, &mut v);
                        v
                    })
                })
                .collect();
            let mut weights = vec![0.0; comps.len()];
            let mut field_at = |n: usize, x: f64| -> Result<Vec<f64>> {
                let mut out = match y0 {
                    Some(f) => evaluate(f, x + n as f64 * config.dt)?,
                    None => vec![0.0; dim_h],
                };
                for i in 0..n {
                    let lag = x + (n - 1 - i) as f64 * config.dt;
                    kernel.weights_into(lag, sigma.at(i), &mut weights);
                    for (c, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            for (o, v) in out.iter_mut().zip(&bdl[i * comps.len() + c]) {
                                *o += w * v;
                            }
                        }
                    }
                }
                Ok(out)
            };
            let mut boundary = Vec::with_capacity((n_steps + 1) * dim_h);
            for n in 0..=n_steps {
                boundary.extend(field_at(n, 0.0)?);
            }
            let mut final_values = Vec::with_capacity((config.n_out + 1) * dim_h);
            for j in 0..=config.n_out {
                final_values.extend(field_at(n_steps, j as f64 * config.dx)?);
            }
            let final_field = GridFunction::new(config.dx, dim_h, final_values)?;
            Ok((boundary, final_field, Vec::new()))
        })
        .collect::<Result<Vec<_>>>()?;
    collect_output(config, dim_h, drivers.seed(), per_path, &[])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialIdentity {
    /// `Σ_k C(m,k) λᵏ(1−λ)^{m−k} (kΔx − t)²`.
    pub lhs: f64,
    /// `t(Δx − Δt)` with `t = mΔt`.
    pub rhs: f64,
}

/// Second moment of `Δx·Binomial(m, λ)` about its mean `t = mΔt`.
pub fn binomial_variance_identity(m: usize, dt: f64, dx: f64) -> Result<BinomialIdentity> {
    let lambda = courant_number(dt, dx)?;
    let t = m as f64 * dt;
    let lhs = binomial_weights(m, lambda)
        .iter()
        .enumerate()
        .map(|(k, w)| w * (k as f64 * dx - t).powi(2))
        .sum();
    Ok(BinomialIdentity {
        lhs,
        rhs: t * (dx - dt),
    })
}
