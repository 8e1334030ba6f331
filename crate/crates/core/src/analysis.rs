//! Monte Carlo estimators, convergence studies and rate fitting.
//!
//! Convergence studies couple every refinement level to one master sample
//! drawn on the finest time grid: coarser increments are partial sums of the
//! fine ones and coarser volatility is the fine path read at coarse nodes.
//! Each level compares the upwind scheme with the time-discretized mild
//! solution driven by the same noise, so the reported mean squared error is
//! scheme error only.

use crate::error::{HambitError, Result};
use crate::fdscheme::{exact_mild_reference, run, FDConfig};
use crate::hilbert::{hw_norm, space_constants, WeightFunction};
use crate::kernels::{kernel_lipschitz_bound, ScalarKernel};
use crate::rng::SeedMode;
use crate::simulate::{Drivers, HambitModel, PathEnsemble, TimeGrid};
use num_complex::Complex64;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MeanEstimate {
    /// `|mean − target| ≤ k · stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

/// Mean and jackknife standard error. For the mean the leave-one-out
/// variance reduces to `s²/n`. With fewer than two samples the error is
/// infinite.
pub fn jackknife_mean(samples: &[f64]) -> MeanEstimate {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let stderr = if n < 2 {
        f64::INFINITY
    } else {
        let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
        (ss / ((n - 1) as f64 * n as f64)).sqrt()
    };
    MeanEstimate { mean, stderr, n }
}

/// Complex mean with `stderr = √(se_re² + se_im²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexEstimate {
    pub value: Complex64,
    pub stderr: f64,
}

impl ComplexEstimate {
    pub fn from_parts(re: MeanEstimate, im: MeanEstimate) -> Self {
        Self {
            value: Complex64::new(re.mean, im.mean),
            stderr: re.stderr.hypot(im.stderr),
        }
    }
}

/// Coordinatewise mean and covariance of an ensemble at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub dim: usize,
    pub mean: Vec<MeanEstimate>,
    /// Row-major `dim × dim`, centered at the sample mean with the
    /// `n/(n−1)` correction.
    pub covariance: Vec<MeanEstimate>,
}

impl Moments {
    pub fn cov(&self, i: usize, j: usize) -> MeanEstimate {
        self.covariance[i * self.dim + j]
    }
}

pub fn empirical_moments(ensemble: &PathEnsemble, t: f64) -> Result<Moments> {
    let k = ensemble.time_position(t)?;
    let dim = ensemble.dim();
    let n = ensemble.n_paths();
    if n < 2 {
        return Err(HambitError::param("n_paths", "moments need at least two paths"));
    }
    let column = |c: usize| -> Vec<f64> { ensemble.slice_at(k).map(|v| v[c]).collect() };
    let columns: Vec<Vec<f64>> = (0..dim).map(column).collect();
    let mean: Vec<MeanEstimate> = columns.iter().map(|c| jackknife_mean(c)).collect();
    let correction = n as f64 / (n - 1) as f64;
    let mut covariance = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            let products: Vec<f64> = columns[i]
                .iter()
                .zip(&columns[j])
                .map(|(a, b)| (a - mean[i].mean) * (b - mean[j].mean))
                .collect();
            let e = jackknife_mean(&products);
            covariance.push(MeanEstimate {
                mean: e.mean * correction,
                stderr: e.stderr * correction,
                n,
            });
        }
    }
    Ok(Moments { dim, mean, covariance })
}

/// One spatial and temporal resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub dx: f64,
    pub dt: f64,
}

impl Level {
    pub fn new(dx: f64, dt: f64) -> Self {
        Self { dx, dt }
    }
}

/// Inputs of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    /// Final time `t`.
    pub horizon: f64,
    /// Right end `X` of the output grid; `J = X/Δx`.
    pub x_max: f64,
    pub alpha: f64,
    /// Coarsest first; every `Δt` must be an integer multiple of the finest.
    pub levels: Vec<Level>,
    pub n_paths: usize,
    pub seed: u64,
    pub seed_mode: SeedMode,
}

/// Dyadic refinements of `(dx, dt)`, coarsest first.
pub fn dyadic_levels(dx: f64, dt: f64, count: usize) -> Vec<Level> {
    (0..count)
        .map(|l| {
            let f = 0.5f64.powi(l as i32);
            Level::new(dx * f, dt * f)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub level: usize,
    pub dx: f64,
    pub dt: f64,
    pub lambda: f64,
    pub n_paths: usize,
    pub mse: f64,
    pub stderr: f64,
    pub bound_rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

fn integer_ratio(value: f64, unit: f64, name: &str) -> Result<usize> {
    let ratio = value / unit;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return Err(HambitError::param(
            name.to_string(),
            format!("{value} is not an integer multiple of {unit}"),
        ));
    }
    Ok(rounded as usize)
}

/// Runs the upwind scheme and the discretized mild solution at every level
/// and records `E‖Ỹᴺ − Y_ref‖²_w` on the output nodes.
pub fn convergence_study(model: &HambitModel, spec: &StudySpec) -> Result<ConvergenceTable> {
    if spec.levels.is_empty() {
        return Err(HambitError::InsufficientLevels { needed: 1, found: 0 });
    }
    if spec.n_paths < 2 {
        return Err(HambitError::param("n_paths", "need at least two paths for a standard error"));
    }
    if !(spec.x_max > 0.0) {
        return Err(HambitError::param("x_max", "must be positive"));
    }
    let w = WeightFunction::new(spec.alpha)?;
    let finest = spec.levels.iter().map(|l| l.dt).fold(f64::INFINITY, f64::min);
    let n_fine = integer_ratio(spec.horizon, finest, "horizon")?;
    let master = Drivers::sample(model, TimeGrid::new(finest, n_fine)?, spec.n_paths, spec.seed, spec.seed_mode)?;
    let mut rows = Vec::with_capacity(spec.levels.len());
    for (level, l) in spec.levels.iter().enumerate() {
        let factor = integer_ratio(l.dt, finest, "levels.dt")?;
        let n_steps = integer_ratio(spec.horizon, l.dt, "horizon")?;
        let n_out = integer_ratio(spec.x_max, l.dx, "x_max")?;
        let config = FDConfig::new(l.dt, l.dx, n_steps, n_out)?;
        let drivers = if factor == 1 { master.clone() } else { master.aggregate(factor)? };
        let scheme = run(&config, &model.kernel, &drivers, None, &[])?;
        let reference = exact_mild_reference(&config, &model.kernel, &drivers, None)?;
        let errors: Vec<f64> = scheme
            .finals
            .par_iter()
            .zip(&reference.finals)
            .map(|(a, b)| a.combine(1.0, b, -1.0).map(|d| hw_norm(&d, &w).powi(2)))
            .collect::<Result<_>>()?;
        let est = jackknife_mean(&errors);
        let bound = prop_conv_rhs(model, &w, spec.horizon, l.dx, l.dt, n_out)?;
        rows.push(ConvergenceRow {
            level,
            dx: l.dx,
            dt: l.dt,
            lambda: config.lambda(),
            n_paths: spec.n_paths,
            mse: est.mean,
            stderr: est.stderr,
            bound_rhs: bound.total,
        });
    }
    Ok(ConvergenceTable { rows })
}

/// Explicit right-hand side of the scheme error bound for `Y₀ = 0`, an
/// interpolating `β̃` and time-independent `β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBound {
    /// Shift-Lipschitz constant of `β` in the discrete `ℋ_w` norm, scaled by
    /// `tr 𝒬 · sup E|σ|²`.
    pub c: f64,
    pub shift_bound: f64,
    /// `8Ct²(Δx − Δt)`.
    pub transport_term: f64,
    /// `8Ct(1 + S²/3)Δt²`.
    pub time_term: f64,
    pub total: f64,
}

fn sup_second_moment(model: &HambitModel, t: f64) -> f64 {
    const SAMPLES: usize = 200;
    (0..=SAMPLES)
        .map(|k| model.vol.expected_norm_sq(t * k as f64 / SAMPLES as f64))
        .fold(0.0, f64::max)
}

/// `4t(C₀² + 2Ct)(Δx−Δt) + 8Ct(1 + S²/3)Δt²` with `C₀ = 0`.
///
/// `C = tr 𝒬 · sup_s E|σ(s)|² · (K + Σ_{j<J} w(x_j) D_j² Δx)` with
/// `K` from [`kernel_lipschitz_bound`] and `D_j = Σ_c κ_c² ‖B_c‖ e^{−κ_c x_j}`
/// bounding the second lag derivative on `[x_j, ∞)`.
pub fn prop_conv_rhs(model: &HambitModel, w: &WeightFunction, t: f64, dx: f64, dt: f64, n_out: usize) -> Result<ConvBound> {
    let k = kernel_lipschitz_bound(&model.kernel, t)?;
    let second_derivative = |x: f64| -> f64 {
        model
            .kernel
            .components()
            .iter()
            .map(|c| match c.g {
                ScalarKernel::Exponential { kappa } => kappa * kappa * c.b.op_norm() * (-kappa * x).exp(),
                _ => 0.0,
            })
            .sum()
    };
    let tail: f64 = (0..n_out)
        .map(|j| {
            let x = j as f64 * dx;
            w.eval(x) * second_derivative(x).powi(2) * dx
        })
        .sum();
    let c = model.noise.covariance_of().trace() * sup_second_moment(model, t) * (k + tail);
    let shift_bound = space_constants(w).shift_bound;
    let transport_term = 4.0 * t * (2.0 * c * t) * (dx - dt);
    let time_term = 8.0 * c * t * (1.0 + shift_bound * shift_bound / 3.0) * dt * dt;
    Ok(ConvBound {
        c,
        shift_bound,
        transport_term,
        time_term,
        total: transport_term + time_term,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    DxMinusDt,
    Dt,
}

impl Predictor {
    pub fn value(&self, row: &ConvergenceRow) -> f64 {
        match self {
            Predictor::DxMinusDt => row.dx - row.dt,
            Predictor::Dt => row.dt,
        }
    }
}

/// Least-squares fit of `log mse = intercept + slope · log x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
    /// 95% Student-t interval for the slope; unbounded with three points.
    pub slope_ci: (f64, f64),
    /// Levels entering the fit.
    pub used_levels: Vec<usize>,
    /// Levels skipped because `mse ≤ 0` or the predictor vanished.
    pub excluded_levels: Vec<usize>,
    pub dropped_coarsest: bool,
}

fn ols(points: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let slope_stderr = if points.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    (slope, intercept, r_squared, slope_stderr)
}

fn fit_points(table: &ConvergenceTable, predictor: Predictor, levels: &[usize]) -> Result<RateFit> {
    let points: Vec<(f64, f64)> = levels
        .iter()
        .map(|&i| {
            let row = &table.rows[i];
            (predictor.value(row).ln(), row.mse.ln())
        })
        .collect();
    let (slope, intercept, r_squared, slope_stderr) = ols(&points);
    if !slope.is_finite() {
        return Err(HambitError::param("predictor", "levels do not vary the predictor"));
    }
    let df = points.len() as f64 - 2.0;
    let slope_ci = match StudentsT::new(0.0, 1.0, df) {
        Ok(t) if slope_stderr.is_finite() => {
            let q = t.inverse_cdf(0.975);
            (slope - q * slope_stderr, slope + q * slope_stderr)
        }
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        slope_ci,
        used_levels: levels.to_vec(),
        excluded_levels: Vec::new(),
        dropped_coarsest: false,
    })
}

/// Fits the rows with positive `mse` and positive predictor. If `r² < 0.9`
/// and at least four rows remain, the coarsest is dropped as
/// pre-asymptotic and the fit repeated.
pub fn fit_rate(table: &ConvergenceTable, predictor: Predictor) -> Result<RateFit> {
    let mut order: Vec<usize> = (0..table.rows.len()).collect();
    order.sort_by(|&a, &b| table.rows[b].dt.total_cmp(&table.rows[a].dt));
    let (usable, excluded): (Vec<usize>, Vec<usize>) = order
        .into_iter()
        .partition(|&i| table.rows[i].mse > 0.0 && predictor.value(&table.rows[i]) > 0.0);
    if usable.len() < 3 {
        return Err(HambitError::InsufficientLevels {
            needed: 3,
            found: usable.len(),
        });
    }
    let mut fit = fit_points(table, predictor, &usable)?;
    if fit.r_squared < 0.9 && usable.len() >= 4 {
        fit = fit_points(table, predictor, &usable[1..])?;
        fit.dropped_coarsest = true;
    }
    fit.excluded_levels = excluded;
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn synthetic(f: impl Fn(f64) -> f64) -> ConvergenceTable {
        ConvergenceTable {
            rows: (0..4)
                .map(|l| {
                    let dx = 0.1 * 0.5f64.powi(l);
                    let dt = dx / 2.0;
                    ConvergenceRow {
                        level: l as usize,
                        dx,
                        dt,
                        lambda: 0.5,
                        n_paths: 1,
                        mse: f(dx - dt),
                        stderr: 0.0,
                        bound_rhs: 0.0,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn fit_recovers_power_laws() {
        let fit = fit_rate(&synthetic(|x| 3.0 * x), Predictor::DxMinusDt).unwrap();
        assert_abs_diff_eq!(fit.slope, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        let fit = fit_rate(&synthetic(|x| 0.5 * x * x), Predictor::DxMinusDt).unwrap();
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-10);
        let fit = fit_rate(&synthetic(|_| 0.7), Predictor::Dt).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.0, epsilon = 1e-10);
        assert!(!fit.dropped_coarsest);
    }

    #[test]
    fn fit_excludes_zero_rows() {
        let mut table = synthetic(|x| x);
        table.rows[1].mse = 0.0;
        let fit = fit_rate(&table, Predictor::DxMinusDt).unwrap();
        assert_eq!(fit.excluded_levels, vec![1]);
        table.rows[2].mse = -1.0;
        assert!(matches!(
            fit_rate(&table, Predictor::DxMinusDt),
            Err(HambitError::InsufficientLevels { needed: 3, found: 2 })
        ));
    }

    #[test]
    fn jackknife_matches_sample_formula() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let e = jackknife_mean(&xs);
        assert_eq!(e.mean, 3.5);
        // leave-one-out means and the jackknife variance formula
        let loo: Vec<f64> = (0..4).map(|i| (14.0 - xs[i]) / 3.0).collect();
        let bar = loo.iter().sum::<f64>() / 4.0;
        let var = 3.0 / 4.0 * loo.iter().map(|m| (m - bar).powi(2)).sum::<f64>();
        assert_abs_diff_eq!(e.stderr, var.sqrt(), epsilon = 1e-14);
        let ones = jackknife_mean(&[1.0; 10]);
        assert_eq!((ones.mean, ones.stderr), (1.0, 0.0));
    }

    #[test]
    fn complex_stderr_combines_parts() {
        let c = ComplexEstimate::from_parts(
            MeanEstimate { mean: 1.0, stderr: 0.3, n: 5 },
            MeanEstimate { mean: -2.0, stderr: 0.4, n: 5 },
        );
        assert_eq!(c.value, Complex64::new(1.0, -2.0));
        assert_abs_diff_eq!(c.stderr, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn dyadic_levels_halve() {
        let l = dyadic_levels(0.1, 0.05, 3);
        assert_eq!(l[2], Level::new(0.025, 0.0125));
    }
}
