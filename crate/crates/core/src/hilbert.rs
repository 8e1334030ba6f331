//! Coordinate realizations of the Hilbert spaces 𝒰, 𝒱, ℋ and of the weighted
//! function space ℋ_w on a uniform spatial grid.
//!
//! Every space is truncated to its first `dim` basis vectors and the basis is
//! the standard coordinate basis. A [`GridFunction`] holds ℋ-vectors at the
//! nodes `x_j = j·Δx`; between nodes it is read by linear interpolation and
//! beyond the last node it is constant.

use nalgebra::DMatrix;

use crate::error::{HambitError, Result};

/// Relative slack allowed when checking `dt ≤ dx`.
pub const CFL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordinateSpace {
    dim: usize,
}

impl CoordinateSpace {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(HambitError::param("dim", "must be at least 1"));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// A bounded operator between two coordinate spaces, stored as a dense matrix
/// (rows = codomain dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    matrix: DMatrix<f64>,
}

impl LinearMap {
    /// Builds a map from row-major entries.
    pub fn new(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(HambitError::param("linear map", "rows and cols must be positive"));
        }
        if entries.len() != rows * cols {
            return Err(HambitError::dims("linear map entries", rows * cols, entries.len()));
        }
        Self::from_matrix(DMatrix::from_row_slice(rows, cols, entries))
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(HambitError::param("linear map", "entries must be finite"));
        }
        Ok(Self { matrix })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(rows, cols),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.matrix[(row, col)]
    }

    pub fn adjoint(&self) -> LinearMap {
        Self {
            matrix: self.matrix.transpose(),
        }
    }

    /// `out = A v`.
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols());
        debug_assert_eq!(out.len(), self.rows());
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..self.cols()).map(|c| self.matrix[(r, c)] * v[c]).sum();
        }
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols() {
            return Err(HambitError::dims("linear map argument", self.cols(), v.len()));
        }
        let mut out = vec![0.0; self.rows()];
        self.apply_into(v, &mut out);
        Ok(out)
    }

    /// Largest singular value.
    pub fn op_norm(&self) -> f64 {
        if self.matrix.iter().all(|&v| v == 0.0) {
            return 0.0;
        }
        self.matrix.singular_values().max()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.norm()
    }
}

/// A covariance operator diagonal in the standard basis.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceOp {
    eigenvalues: Vec<f64>,
}

impl CovarianceOp {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(HambitError::param("eigenvalues", "must be non-empty"));
        }
        if let Some(bad) = eigenvalues.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(HambitError::param(
                "eigenvalues",
                format!("must be finite and nonnegative, got {bad}"),
            ));
        }
        Ok(Self { eigenvalues })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            eigenvalues: vec![1.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            eigenvalues: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            eigenvalues: self.eigenvalues.iter().map(|v| v * factor).collect(),
        }
    }

    /// `(Qv, v)`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        self.eigenvalues.iter().zip(v).map(|(l, x)| l * x * x).sum()
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.eigenvalues))
    }
}

/// Exponential weight `w(x) = e^{αx}` for the space ℋ_w.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightFunction {
    alpha: f64,
}

impl WeightFunction {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(HambitError::param("alpha", format!("must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.alpha * x).exp()
    }

    /// `c² = ∫₀^∞ w⁻¹(x) dx`.
    pub fn c_squared(&self) -> f64 {
        1.0 / self.alpha
    }
}

/// Node values of an ℋ-valued function on `x_j = j·Δx`, `j = 0..=J`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    delta_x: f64,
    dim: usize,
    data: Vec<f64>,
}

impl GridFunction {
    /// `data` holds `n_nodes * dim` values, node-major.
    pub fn new(delta_x: f64, dim: usize, data: Vec<f64>) -> Result<Self> {
        if !(delta_x.is_finite() && delta_x > 0.0) {
            return Err(HambitError::param("delta_x", format!("must be positive, got {delta_x}")));
        }
        if dim == 0 {
            return Err(HambitError::param("dim", "must be at least 1"));
        }
        if !data.len().is_multiple_of(dim) || data.len() / dim < 2 {
            return Err(HambitError::param(
                "grid values",
                format!("need at least two nodes of dimension {dim}, got {} values", data.len()),
            ));
        }
        Ok(Self { delta_x, dim, data })
    }

    pub fn from_nodes(delta_x: f64, nodes: &[Vec<f64>]) -> Result<Self> {
        let dim = nodes.first().map_or(0, Vec::len);
        if let Some(bad) = nodes.iter().find(|n| n.len() != dim) {
            return Err(HambitError::dims("grid node", dim, bad.len()));
        }
        Self::new(delta_x, dim, nodes.concat())
    }

    pub fn scalar(delta_x: f64, values: Vec<f64>) -> Result<Self> {
        Self::new(delta_x, 1, values)
    }

    pub fn zeros(delta_x: f64, dim: usize, n_nodes: usize) -> Result<Self> {
        Self::new(delta_x, dim, vec![0.0; dim * n_nodes])
    }

    /// Samples `f` at the nodes `0..n_nodes`.
    pub fn sample(
        delta_x: f64,
        dim: usize,
        n_nodes: usize,
        mut f: impl FnMut(f64, &mut [f64]),
    ) -> Result<Self> {
        let mut data = vec![0.0; dim * n_nodes];
        for (j, node) in data.chunks_exact_mut(dim.max(1)).enumerate() {
            f(j as f64 * delta_x, node);
        }
        Self::new(delta_x, dim, data)
    }

    pub fn delta_x(&self) -> f64 {
        self.delta_x
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_nodes(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Index `J` of the last node.
    pub fn last_index(&self) -> usize {
        self.n_nodes() - 1
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.delta_x
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn node_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// Node `j`, or the last node when `j > J`.
    pub fn node_extended(&self, j: usize) -> &[f64] {
        self.node(j.min(self.last_index()))
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Keeps nodes `0..n_nodes`.
    pub fn truncated(&self, n_nodes: usize) -> Result<Self> {
        let n = n_nodes.min(self.n_nodes());
        Self::new(self.delta_x, self.dim, self.data[..n * self.dim].to_vec())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            delta_x: self.delta_x,
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    fn check_compatible(&self, other: &GridFunction) -> Result<()> {
        if self.dim != other.dim {
            return Err(HambitError::dims("grid function dimension", self.dim, other.dim));
        }
        if self.n_nodes() != other.n_nodes() {
            return Err(HambitError::dims("grid function nodes", self.n_nodes(), other.n_nodes()));
        }
        if self.delta_x != other.delta_x {
            return Err(HambitError::param("delta_x", "grid functions live on different grids"));
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &GridFunction, b: f64) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            delta_x: self.delta_x,
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &GridFunction) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }
}

/// `‖A𝒬^{1/2}‖_HS`: Frobenius norm of `A·diag(√λ)`.
pub fn hs_norm_with_root(a: &LinearMap, q: &CovarianceOp) -> Result<f64> {
    if a.cols() != q.dim() {
        return Err(HambitError::dims("covariance dimension", a.cols(), q.dim()));
    }
    Ok(hs_norm_sq_with_root(a.matrix(), q.eigenvalues()).sqrt())
}

pub(crate) fn hs_norm_sq_with_root(a: &DMatrix<f64>, eigenvalues: &[f64]) -> f64 {
    let mut total = 0.0;
    for (c, &lambda) in eigenvalues.iter().enumerate() {
        total += lambda * a.column(c).norm_squared();
    }
    total
}

/// Right shift by `k` nodes with flat extension past the last node.
pub fn shift(f: &GridFunction, k: usize) -> GridFunction {
    let mut data = Vec::with_capacity(f.data.len());
    for j in 0..f.n_nodes() {
        data.extend_from_slice(f.node_extended(j.saturating_add(k)));
    }
    GridFunction {
        delta_x: f.delta_x,
        dim: f.dim,
        data,
    }
}

/// `⟨f, g⟩_w` with forward differences and left-endpoint quadrature; the
/// derivative vanishes beyond the last node.
pub fn hw_inner(f: &GridFunction, g: &GridFunction, w: &WeightFunction) -> Result<f64> {
    f.check_compatible(g)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = dot(f.node(0), g.node(0));
    let dx = f.delta_x;
    for j in 0..f.last_index() {
        let (f0, f1, g0, g1) = (f.node(j), f.node(j + 1), g.node(j), g.node(j + 1));
        let d: f64 = (0..f.dim).map(|c| (f1[c] - f0[c]) * (g1[c] - g0[c])).sum();
        total += w.eval(f.x(j)) * d / dx;
    }
    Ok(total)
}

/// Discrete `‖f‖_w`.
pub fn hw_norm(f: &GridFunction, w: &WeightFunction) -> f64 {
    let mut total: f64 = f.node(0).iter().map(|v| v * v).sum();
    let dx = f.delta_x;
    for j in 0..f.last_index() {
        let (a, b) = (f.node(j), f.node(j + 1));
        let d: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
        total += w.eval(f.x(j)) * d / dx;
    }
    total.sqrt()
}

/// `δ_x f` by linear interpolation, constant beyond the last node.
pub fn evaluate(f: &GridFunction, x: f64) -> Result<Vec<f64>> {
    if !(x >= 0.0) {
        return Err(HambitError::param("x", format!("evaluation point must be nonnegative, got {x}")));
    }
    let pos = x / f.delta_x;
    let j = pos.floor();
    if j >= f.last_index() as f64 {
        return Ok(f.node(f.last_index()).to_vec());
    }
    let j = j as usize;
    let theta = pos - j as f64;
    let (a, b) = (f.node(j), f.node(j + 1));
    Ok(a.iter().zip(b).map(|(u, v)| u + theta * (v - u)).collect())
}

/// `λ = dt/dx`, rejecting `dt > dx`.
pub fn courant_number(dt: f64, dx: f64) -> Result<f64> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(HambitError::param("dt", format!("must be positive, got {dt}")));
    }
    if !(dx.is_finite() && dx > 0.0) {
        return Err(HambitError::param("dx", format!("must be positive, got {dx}")));
    }
    if dt > dx * (1.0 + CFL_SLACK) {
        return Err(HambitError::CflViolation { dt, dx });
    }
    Ok((dt / dx).min(1.0))
}

/// One application of `𝒯 = ℐ + Δt(𝒮_{Δx} − ℐ)/Δx`.
pub fn apply_t(f: &GridFunction, dt: f64) -> Result<GridFunction> {
    let lambda = courant_number(dt, f.delta_x)?;
    let mut data = Vec::with_capacity(f.data.len());
    for j in 0..f.n_nodes() {
        let (a, b) = (f.node(j), f.node_extended(j + 1));
        data.extend(a.iter().zip(b).map(|(u, v)| (1.0 - lambda) * u + lambda * v));
    }
    Ok(GridFunction {
        delta_x: f.delta_x,
        dim: f.dim,
        data,
    })
}

/// Weights `C(m,k) λᵏ (1−λ)^{m−k}`, `k = 0..=m`.
pub fn binomial_weights(m: usize, lambda: f64) -> Vec<f64> {
    let mut weights = Vec::with_capacity(m + 1);
    let mut binom = 1.0f64;
    for k in 0..=m {
        if k > 0 {
            binom = binom * (m - k + 1) as f64 / k as f64;
        }
        weights.push(binom * lambda.powi(k as i32) * (1.0 - lambda).powi((m - k) as i32));
    }
    weights
}

/// `𝒯ᵐ f = Σ_k C(m,k) λᵏ (1−λ)^{m−k} 𝒮_{kΔx} f`.
pub fn apply_t_power_binomial(f: &GridFunction, dt: f64, m: usize) -> Result<GridFunction> {
    let lambda = courant_number(dt, f.delta_x)?;
    let weights = binomial_weights(m, lambda);
    let mut data = vec![0.0; f.data.len()];
    for j in 0..f.n_nodes() {
        let out = &mut data[j * f.dim..(j + 1) * f.dim];
        for (k, &wk) in weights.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(f.node_extended(j + k)) {
                *o += wk * v;
            }
        }
    }
    Ok(GridFunction {
        delta_x: f.delta_x,
        dim: f.dim,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceConstants {
    pub c_squared: f64,
    /// Uniform bound on `‖𝒮_t‖_op`: `√(2(1+c²))`.
    pub shift_bound: f64,
    /// Evaluation bound `K` with `K² = 2·max(1, c²)`.
    pub eval_bound: f64,
}

pub fn space_constants(w: &WeightFunction) -> SpaceConstants {
    let c_squared = w.c_squared();
    SpaceConstants {
        c_squared,
        shift_bound: (2.0 * (1.0 + c_squared)).sqrt(),
        eval_bound: (2.0 * c_squared.max(1.0)).sqrt(),
    }
}

/// Representer of evaluation at `x`: `h_x(y) = 1 + (1 − e^{−α(x∧y)})/α`,
/// sampled on the grid of `template`.
pub fn representer_hx(x: f64, w: &WeightFunction, template: &GridFunction) -> Result<GridFunction> {
    if !(x >= 0.0) {
        return Err(HambitError::param("x", format!("must be nonnegative, got {x}")));
    }
    let alpha = w.alpha();
    GridFunction::sample(template.delta_x, 1, template.n_nodes(), |y, out| {
        out[0] = 1.0 - (-alpha * x.min(y)).exp_m1() / alpha;
    })
}
