//! Python bindings for the hambit toolkit.
//!
//! A [`Session`] is built from the same TOML document the command line tool
//! reads; its methods run the simulators and return plain Python values.

use hambit::analysis::{convergence_study, fit_rate, Predictor, StudySpec};
use hambit::cli::{RunConfig, Validated};
use hambit::error::HambitError;
use hambit::fdscheme::{binomial_variance_identity as binomial_identity, run};
use hambit::kernels::sample_volatility;
use hambit::simulate::{
    char_functional_analytic, char_functional_mc, hambit_direct, project, vmv_series, Drivers, PathEnsemble,
    TruncationLevels,
};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: HambitError) -> PyErr {
    match e {
        HambitError::Io { .. } | HambitError::Csv { .. } | HambitError::GridExhausted { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Paths of an `H`-valued process sampled at a set of output times.
#[pyclass(frozen, name = "Ensemble")]
pub struct PyEnsemble {
    inner: PathEnsemble,
}

#[pymethods]
impl PyEnsemble {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn n_paths(&self) -> usize {
        self.inner.n_paths()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    /// Value of path `p` at output position `k`.
    fn value(&self, p: usize, k: usize) -> PyResult<Vec<f64>> {
        if p >= self.inner.n_paths() || k >= self.inner.times().len() {
            return Err(PyValueError::new_err(format!("index ({p}, {k}) out of range")));
        }
        Ok(self.inner.value(p, k).to_vec())
    }

    /// Flat values ordered by path, then time, then coordinate.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyEnsemble) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.n_paths()
    }

    fn __repr__(&self) -> String {
        format!(
            "Ensemble(n_paths={}, times={}, dim={})",
            self.inner.n_paths(),
            self.inner.times().len(),
            self.inner.dim()
        )
    }
}

/// A validated run configuration.
#[pyclass(frozen, name = "Session")]
pub struct Session {
    v: Validated,
}

impl Session {
    fn drivers(&self) -> PyResult<Drivers> {
        let c = &self.v.config;
        Drivers::sample(&self.v.model, self.v.grid, c.n_paths, c.seed, c.seed_mode.into()).map_err(to_py)
    }
}

#[pymethods]
impl Session {
    #[new]
    fn new(toml: &str) -> PyResult<Self> {
        let config = RunConfig::from_toml(toml).map_err(PyValueError::new_err)?;
        let v = config.validate().map_err(PyValueError::new_err)?;
        Ok(Session { v })
    }

    #[staticmethod]
    fn from_file(path: std::path::PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", path.display())))?;
        Session::new(&text)
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.v.hash.clone()
    }

    #[getter]
    fn dim_h(&self) -> usize {
        self.v.model.dim_h()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        let g = self.v.grid;
        (0..=g.n_steps()).map(|n| g.time(n)).collect()
    }

    /// Direct left-point sum at every grid time.
    fn simulate_direct(&self, py: Python<'_>) -> PyResult<PyEnsemble> {
        let d = self.drivers()?;
        let outs = self.v.grid.all_indices();
        let kernel = &self.v.model.kernel;
        let inner = py.detach(|| hambit_direct(kernel, &d, &outs)).map_err(to_py)?;
        Ok(PyEnsemble { inner })
    }

    /// Truncated series representation; `levels` defaults to the config or to full rank.
    #[pyo3(signature = (levels=None))]
    fn simulate_series(&self, py: Python<'_>, levels: Option<(usize, usize, usize)>) -> PyResult<PyEnsemble> {
        let d = self.drivers()?;
        let kernel = &self.v.model.kernel;
        let levels = match (levels, &self.v.config.series) {
            (Some((n, m, k)), _) => TruncationLevels::new(n, m, k),
            (None, Some(s)) => TruncationLevels::new(s.n, s.m, s.k),
            (None, None) => TruncationLevels::full(kernel),
        };
        let outs = self.v.grid.all_indices();
        let out = py.detach(|| vmv_series(kernel, &d, levels, &outs)).map_err(to_py)?;
        Ok(PyEnsemble { inner: out.ensemble })
    }

    /// Boundary values of the upwind scheme at every grid time.
    fn simulate_fd(&self, py: Python<'_>) -> PyResult<PyEnsemble> {
        let d = self.drivers()?;
        let (fd, kernel) = (&self.v.fd, &self.v.model.kernel);
        let out = py.detach(|| run(fd, kernel, &d, None, &[])).map_err(to_py)?;
        Ok(PyEnsemble { inner: out.boundary })
    }

    /// Monte Carlo and analytic characteristic functional at `(t, h)`.
    fn charfn<'py>(&self, py: Python<'py>, t: f64, h: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let d = self.drivers()?;
        let k = self.v.grid.index_of(t).map_err(to_py)?;
        let model = &self.v.model;
        let (mc, exact) = py
            .detach(|| -> Result<_, HambitError> {
                let e = hambit_direct(&model.kernel, &d, &[k])?;
                Ok((char_functional_mc(&e, t, &h)?, char_functional_analytic(model, d.sigma(), t, &h)?))
            })
            .map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("mc", (mc.value.re, mc.value.im))?;
        out.set_item("mc_stderr", mc.stderr)?;
        out.set_item("analytic", (exact.re, exact.im))?;
        Ok(out)
    }

    /// Gram matrix, covariance `C(t,s)` and its root for `span{xi}`, on volatility path 0.
    fn project<'py>(&self, py: Python<'py>, t: f64, s: f64, xi: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.v.config;
        let g = self.v.grid;
        let sigma =
            sample_volatility(&self.v.model.vol, g.dt(), g.n_steps(), 1, c.seed, c.seed_mode.into()).map_err(to_py)?;
        let q = self.v.model.noise.covariance_of();
        let p = project(&self.v.model.kernel, sigma.path(0), &q, t, s, &xi).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("gram", rows(&p.gram))?;
        out.set_item("c", rows(&p.c))?;
        out.set_item("gamma", rows(&p.gamma))?;
        out.set_item("c_min_eigenvalue", p.c_min_eigenvalue)?;
        Ok(out)
    }

    /// Convergence table of the scheme over the `[converge]` levels, with rate fits.
    fn converge<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.v.config;
        let conv = c
            .converge
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("converge: missing [converge] section"))?;
        let spec = StudySpec {
            horizon: conv.horizon,
            x_max: conv.x_max,
            alpha: c.alpha,
            levels: conv.levels().map_err(PyValueError::new_err)?,
            n_paths: c.n_paths,
            seed: c.seed,
            seed_mode: c.seed_mode.into(),
        };
        let model = &self.v.model;
        let table = py.detach(|| convergence_study(model, &spec)).map_err(to_py)?;
        let out = PyDict::new(py);
        let table_rows: Vec<(f64, f64, f64, f64, f64, f64)> = table
            .rows
            .iter()
            .map(|r| (r.dx, r.dt, r.lambda, r.mse, r.stderr, r.bound_rhs))
            .collect();
        out.set_item("rows", table_rows)?;
        for (name, p) in [("dx_minus_dt", Predictor::DxMinusDt), ("dt", Predictor::Dt)] {
            match fit_rate(&table, p) {
                Ok(f) => out.set_item(name, (f.slope, f.slope_ci.0, f.slope_ci.1, f.r_squared))?,
                Err(_) => out.set_item(name, py.None())?,
            }
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Session(hash={}, dim_h={})", &self.v.hash[..12], self.v.model.dim_h())
    }
}

/// Both sides of the binomial variance identity for `m` steps.
#[pyfunction]
fn binomial_variance_identity(m: usize, dt: f64, dx: f64) -> PyResult<(f64, f64)> {
    let b = binomial_identity(m, dt, dx).map_err(to_py)?;
    Ok((b.lhs, b.rhs))
}

#[pymodule]
fn pyhambit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Session>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(binomial_variance_identity, m)?)?;
    Ok(())
}
