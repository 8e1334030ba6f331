//! Command-line front end driven by a TOML run configuration.
//!
//! Subcommands `simulate`, `converge`, `charfn` and `project` validate the
//! whole configuration before computing anything and write CSV files whose
//! metadata carries a SHA-256 hash of the effective configuration. Exit codes:
//! 2 for invalid input, 3 for computation failures, 4 for I/O failures.

use crate::analysis::{convergence_study, dyadic_levels, fit_rate, Level, Predictor, StudySpec};
use crate::error::HambitError;
use crate::fdscheme::{run, FDConfig};
use crate::hilbert::{CovarianceOp, LinearMap};
use crate::kernels::{sample_volatility, KernelComponent, KernelSpec, OperatorOu, ScalarKernel, VolatilityModel};
use crate::noise::LevySpec;
use crate::report::{self, fmt_f64, CsvDoc};
use crate::rng::SeedMode;
use crate::simulate::{
    char_functional_analytic, char_functional_mc, checked_gram, hambit_direct, project, vmv_series, Drivers,
    HambitModel, TimeGrid, TruncationLevels,
};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const OUT_ENV: &str = "HAMBIT_OUT";
const DEFAULT_OUT: &str = "hambit_out";

#[derive(Debug, Parser)]
#[command(name = "hambit", version, about = "Simulate and verify Hilbert-space-valued ambit fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Direct quadrature, truncated series and finite-difference boundary paths.
    Simulate(CommonArgs),
    /// Scheme error against the discretized mild solution over refinements.
    Converge(CommonArgs),
    /// Monte Carlo versus analytic characteristic functional.
    Charfn(CommonArgs),
    /// Gram, covariance and root matrices of a finite-dimensional projection.
    Project(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a) | Command::Converge(a) | Command::Charfn(a) | Command::Project(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Converge(_) => "converge",
            Command::Charfn(_) => "charfn",
            Command::Project(_) => "project",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SpacesConfig {
    pub dim_u: usize,
    pub dim_v: usize,
    pub dim_h: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    pub dx: f64,
    pub n_steps: usize,
    /// Index `J` of the last output node of the scheme.
    pub n_out: usize,
    /// Time indices at which full scheme fields are written.
    #[serde(default)]
    pub snapshots: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    /// `q` lists the eigenvalues of the covariance operator.
    Wiener { q: Vec<f64> },
    CompoundPoisson { intensity: f64, jump_cov: Vec<f64> },
}

impl NoiseConfig {
    fn build(&self, field: &str) -> Result<LevySpec, String> {
        match self {
            NoiseConfig::Wiener { q } => Ok(LevySpec::wiener(
                CovarianceOp::new(q.clone()).map_err(|e| format!("{field}.q: {e}"))?,
            )),
            NoiseConfig::CompoundPoisson { intensity, jump_cov } => {
                let cov = CovarianceOp::new(jump_cov.clone()).map_err(|e| format!("{field}.jump_cov: {e}"))?;
                LevySpec::compound_poisson(*intensity, cov).map_err(|e| format!("{field}.intensity: {e}"))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolatilityConfig {
    Constant {
        sigma0: Vec<f64>,
    },
    ScalarLss {
        rho: f64,
        driver: NoiseConfig,
    },
    OperatorOu {
        c: Vec<Vec<f64>>,
        jump_intensity: f64,
        jump_scale: f64,
        y0: Vec<Vec<f64>>,
    },
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("{field}: must be a nonempty rectangular array of rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl VolatilityConfig {
    fn build(&self) -> Result<VolatilityModel, String> {
        let tag = |e: HambitError| format!("volatility: {e}");
        match self {
            VolatilityConfig::Constant { sigma0 } => VolatilityModel::constant(sigma0.clone()).map_err(tag),
            VolatilityConfig::ScalarLss { rho, driver } => {
                VolatilityModel::scalar_lss(*rho, driver.build("volatility.driver")?).map_err(tag)
            }
            VolatilityConfig::OperatorOu {
                c,
                jump_intensity,
                jump_scale,
                y0,
            } => {
                let c = matrix_from_rows(c, "volatility.c")?;
                let y0 = matrix_from_rows(y0, "volatility.y0")?;
                Ok(VolatilityModel::OperatorOu(
                    OperatorOu::new(c, *jump_intensity, *jump_scale, y0).map_err(tag)?,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarKernelConfig {
    Exponential { kappa: f64 },
    Constant { value: f64 },
    ShiftedExponential { kappa: f64, offset: f64 },
}

impl ScalarKernelConfig {
    fn build(&self) -> ScalarKernel {
        match *self {
            ScalarKernelConfig::Exponential { kappa } => ScalarKernel::Exponential { kappa },
            ScalarKernelConfig::Constant { value } => ScalarKernel::Constant { value },
            ScalarKernelConfig::ShiftedExponential { kappa, offset } => {
                ScalarKernel::ShiftedExponential { kappa, offset }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelComponentConfig {
    pub phi: usize,
    pub g: ScalarKernelConfig,
    /// `dim_h` rows of `dim_v` entries.
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SeriesConfig {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    pub horizon: f64,
    pub x_max: f64,
    /// Coarsest `(dx, dt)`, halved `levels − 1` times.
    pub dx: Option<f64>,
    pub dt: Option<f64>,
    pub levels: Option<usize>,
    /// Explicit `[dx, dt]` pairs, coarsest first; overrides the dyadic ladder.
    #[serde(default)]
    pub explicit: Vec<[f64; 2]>,
}

impl ConvergeConfig {
    /// Explicit levels if given, otherwise a dyadic ladder from `dx` and `dt`.
    pub fn levels(&self) -> Result<Vec<Level>, String> {
        if !self.explicit.is_empty() {
            return Ok(self.explicit.iter().map(|p| Level::new(p[0], p[1])).collect());
        }
        match (self.dx, self.dt, self.levels) {
            (Some(dx), Some(dt), Some(n)) if n > 0 => Ok(dyadic_levels(dx, dt, n)),
            _ => Err("converge: give either `explicit` or all of `dx`, `dt`, `levels`".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CharfnConfig {
    pub t: f64,
    /// Directions in ℋ.
    pub h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub t: f64,
    pub s: f64,
    pub xi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeedModeConfig {
    #[default]
    Independent,
    Shared,
}

impl From<SeedModeConfig> for SeedMode {
    fn from(m: SeedModeConfig) -> Self {
        match m {
            SeedModeConfig::Independent => SeedMode::Independent,
            SeedModeConfig::Shared => SeedMode::Shared,
        }
    }
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub n_paths: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed_mode: SeedModeConfig,
    pub output_dir: Option<PathBuf>,
    pub spaces: SpacesConfig,
    pub grid: GridConfig,
    pub noise: NoiseConfig,
    pub volatility: VolatilityConfig,
    pub kernel: Vec<KernelComponentConfig>,
    pub series: Option<SeriesConfig>,
    pub converge: Option<ConvergeConfig>,
    pub charfn: Option<CharfnConfig>,
    pub project: Option<ProjectConfig>,
}

/// A configuration with every model object constructed and checked.
#[derive(Debug, Clone)]
pub struct Validated {
    pub config: RunConfig,
    pub model: HambitModel,
    pub grid: TimeGrid,
    pub fd: FDConfig,
    pub hash: String,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| format!("config: {e}"))
    }

    /// SHA-256 of the configuration re-serialized without the output
    /// directory, which does not affect results.
    pub fn hash(&self) -> Result<String, String> {
        let mut c = self.clone();
        c.output_dir = None;
        let text = toml::to_string(&c).map_err(|e| format!("config: {e}"))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    fn build_kernel(&self) -> Result<KernelSpec, String> {
        let s = &self.spaces;
        check(!self.kernel.is_empty(), || "kernel: need at least one [[kernel]] component".into())?;
        let comps = self
            .kernel
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let b = matrix_from_rows(&c.b, &format!("kernel[{i}].b"))?;
                check(b.nrows() == s.dim_h && b.ncols() == s.dim_v, || {
                    format!(
                        "kernel[{i}].b: expected {}×{} (dim_h × dim_v), found {}×{}",
                        s.dim_h,
                        s.dim_v,
                        b.nrows(),
                        b.ncols()
                    )
                })?;
                Ok(KernelComponent {
                    phi: c.phi,
                    g: c.g.build(),
                    b: LinearMap::from_matrix(b).map_err(|e| format!("kernel[{i}].b: {e}"))?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        KernelSpec::new(s.dim_u, comps).map_err(|e| format!("kernel: {e}"))
    }

    /// Checks every precondition used by any subcommand.
    pub fn validate(self) -> Result<Validated, String> {
        check(self.n_paths >= 2, || "n_paths: need at least two paths".into())?;
        check(self.alpha.is_finite() && self.alpha > 0.0, || "alpha: must be positive".into())?;
        let kernel = self.build_kernel()?;
        let noise = self.noise.build("noise")?;
        check(noise.dim() == self.spaces.dim_v, || {
            format!("noise: dimension {} does not match spaces.dim_v = {}", noise.dim(), self.spaces.dim_v)
        })?;
        let vol = self.volatility.build()?;
        check(vol.dim_u() == self.spaces.dim_u, || {
            format!("volatility: dimension {} does not match spaces.dim_u = {}", vol.dim_u(), self.spaces.dim_u)
        })?;
        let model = HambitModel::new(kernel, vol, noise).map_err(|e| format!("model: {e}"))?;
        let g = &self.grid;
        let grid = TimeGrid::new(g.dt, g.n_steps).map_err(|e| format!("grid: {e}"))?;
        let fd = FDConfig::new(g.dt, g.dx, g.n_steps, g.n_out).map_err(|e| format!("grid: {e}"))?;
        check(
            g.snapshots.windows(2).all(|w| w[0] < w[1]) && g.snapshots.iter().all(|&n| n <= g.n_steps),
            || format!("grid.snapshots: must be increasing and at most n_steps = {}", g.n_steps),
        )?;
        if let Some(s) = &self.series {
            TruncationLevels::new(s.n, s.m, s.k)
                .validate(&model.kernel)
                .map_err(|e| format!("series: {e}"))?;
        }
        if let Some(c) = &self.converge {
            let levels = c.levels()?;
            for (i, l) in levels.iter().enumerate() {
                FDConfig::new(l.dt, l.dx, 1, 1).map_err(|e| format!("converge level {i}: {e}"))?;
            }
            crate::kernels::kernel_lipschitz_bound(&model.kernel, c.horizon).map_err(|e| format!("converge: {e}"))?;
        }
        let seed_mode: SeedMode = self.seed_mode.into();
        if let Some(c) = &self.charfn {
            grid.index_of(c.t).map_err(|e| format!("charfn.t: {e}"))?;
            check(!c.h.is_empty(), || "charfn.h: need at least one direction".into())?;
            for (i, h) in c.h.iter().enumerate() {
                check(h.len() == self.spaces.dim_h, || {
                    format!("charfn.h[{i}]: expected {} entries (dim_h), found {}", self.spaces.dim_h, h.len())
                })?;
            }
            check(seed_mode == SeedMode::Independent || model.vol.is_deterministic(), || {
                format!("seed_mode: {}", HambitError::SharedSeed)
            })?;
        }
        if let Some(p) = &self.project {
            grid.index_of(p.s).map_err(|e| format!("project.s: {e}"))?;
            check(p.s <= p.t, || format!("project: s = {} exceeds t = {}", p.s, p.t))?;
            checked_gram(&p.xi, self.spaces.dim_h).map_err(|e| format!("project.xi: {e}"))?;
        }
        let hash = self.hash()?;
        Ok(Validated {
            config: self,
            model,
            grid,
            fd,
            hash,
        })
    }
}

/// A failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Computation(HambitError),
    Io(HambitError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Computation(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid configuration: {m}"),
            CliError::Computation(e) => write!(f, "computation failed: {e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<HambitError> for CliError {
    fn from(e: HambitError) -> Self {
        match e {
            HambitError::Io { .. } | HambitError::Csv { .. } => CliError::Io(e),
            other => CliError::Computation(other),
        }
    }
}

/// `--out`, then the environment override, then the config, then a default.
pub fn resolve_output_dir(flag: Option<&Path>, env: Option<&str>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(&args.config).map_err(|source| {
        CliError::Io(HambitError::Io {
            path: args.config.clone(),
            source,
        })
    })?;
    let mut config = RunConfig::from_toml(&text).map_err(CliError::Validation)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(paths) = args.paths {
        config.n_paths = paths;
    }
    Ok(config)
}

struct Emitter {
    dir: PathBuf,
    meta: Vec<(String, String)>,
    written: Vec<PathBuf>,
}

impl Emitter {
    fn new(dir: PathBuf, command: &str, v: &Validated) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|source| {
            CliError::Io(HambitError::Io {
                path: dir.clone(),
                source,
            })
        })?;
        let meta = vec![
            ("command".to_string(), command.to_string()),
            ("config_sha256".to_string(), v.hash.clone()),
            ("seed".to_string(), v.config.seed.to_string()),
            ("n_paths".to_string(), v.config.n_paths.to_string()),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ];
        Ok(Self {
            dir,
            meta,
            written: Vec::new(),
        })
    }

    fn emit(&mut self, name: &str, mut doc: CsvDoc) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut meta = self.meta.clone();
        for (k, v) in doc.meta.drain(..) {
            if let Some(slot) = meta.iter_mut().find(|(mk, _)| *mk == k) {
                slot.1 = v;
            } else {
                meta.push((k, v));
            }
        }
        doc.meta = meta;
        doc.write(&path)?;
        self.written.push(path);
        Ok(())
    }
}

fn cmd_simulate(v: &Validated, out: &mut Emitter) -> Result<(), CliError> {
    let c = &v.config;
    let drivers = Drivers::sample(&v.model, v.grid, c.n_paths, c.seed, c.seed_mode.into())?;
    let outputs = v.grid.all_indices();
    let direct = hambit_direct(&v.model.kernel, &drivers, &outputs)?;
    let levels = match &c.series {
        Some(s) => TruncationLevels::new(s.n, s.m, s.k),
        None => TruncationLevels::full(&v.model.kernel),
    };
    let series = vmv_series(&v.model.kernel, &drivers, levels, &outputs)?;
    let fd = run(&v.fd, &v.model.kernel, &drivers, None, &c.grid.snapshots)?;
    out.emit("direct.csv", report::ensemble_doc(&direct, &[]))?;
    let series_meta = [(
        "truncation".to_string(),
        format!("{} {} {}", levels.n, levels.m, levels.k),
    )];
    out.emit("series.csv", report::ensemble_doc(&series.ensemble, &series_meta))?;
    let fd_meta = [
        ("dx".to_string(), fmt_f64(v.fd.dx())),
        ("lambda".to_string(), fmt_f64(v.fd.lambda())),
    ];
    out.emit("fd.csv", report::ensemble_doc(&fd.boundary, &fd_meta))?;
    for snap in &fd.snapshots {
        let meta = [("step".to_string(), snap.step.to_string())];
        out.emit(&format!("fd_field_{}.csv", snap.step), report::fields_doc(&snap.fields, &meta))?;
    }
    Ok(())
}

fn cmd_converge(v: &Validated, out: &mut Emitter) -> Result<(), CliError> {
    let c = &v.config;
    let conv = c
        .converge
        .as_ref()
        .ok_or_else(|| CliError::Validation("converge: missing [converge] section".into()))?;
    let spec = StudySpec {
        horizon: conv.horizon,
        x_max: conv.x_max,
        alpha: c.alpha,
        levels: conv.levels().map_err(CliError::Validation)?,
        n_paths: c.n_paths,
        seed: c.seed,
        seed_mode: c.seed_mode.into(),
    };
    let table = convergence_study(&v.model, &spec)?;
    out.emit("convergence.csv", report::convergence_doc(&table, &[]))?;
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    for (name, p) in [("dx_minus_dt", Predictor::DxMinusDt), ("dt", Predictor::Dt)] {
        match fit_rate(&table, p) {
            Ok(fit) => fits.push((name, fit)),
            Err(e) => skipped.push((format!("skipped_{name}"), e.to_string())),
        }
    }
    let refs: Vec<(&str, &crate::analysis::RateFit)> = fits.iter().map(|(n, f)| (*n, f)).collect();
    out.emit("fit.csv", report::fit_doc(&refs, &skipped))?;
    Ok(())
}

fn cmd_charfn(v: &Validated, out: &mut Emitter) -> Result<(), CliError> {
    let c = &v.config;
    let cf = c
        .charfn
        .as_ref()
        .ok_or_else(|| CliError::Validation("charfn: missing [charfn] section".into()))?;
    let drivers = Drivers::sample(&v.model, v.grid, c.n_paths, c.seed, c.seed_mode.into())?;
    let k = v.grid.index_of(cf.t)?;
    let ensemble = hambit_direct(&v.model.kernel, &drivers, &[k])?;
    let dim = v.model.dim_h();
    let mut header = vec!["index".to_string()];
    header.extend((0..dim).map(|i| format!("h{i}")));
    header.extend(
        ["mc_re", "mc_im", "mc_stderr", "analytic_re", "analytic_im", "abs_diff"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut doc = CsvDoc {
        header,
        ..Default::default()
    };
    doc.push_meta("t", fmt_f64(cf.t));
    for (i, h) in cf.h.iter().enumerate() {
        let mc = char_functional_mc(&ensemble, cf.t, h)?;
        let exact = char_functional_analytic(&v.model, drivers.sigma(), cf.t, h)?;
        let mut row = vec![i.to_string()];
        row.extend(h.iter().map(|&x| fmt_f64(x)));
        row.extend([
            fmt_f64(mc.value.re),
            fmt_f64(mc.value.im),
            fmt_f64(mc.stderr),
            fmt_f64(exact.re),
            fmt_f64(exact.im),
            fmt_f64((mc.value - exact).norm()),
        ]);
        doc.rows.push(row);
    }
    out.emit("charfn.csv", doc)
}

fn cmd_project(v: &Validated, out: &mut Emitter) -> Result<(), CliError> {
    let c = &v.config;
    let pc = c
        .project
        .as_ref()
        .ok_or_else(|| CliError::Validation("project: missing [project] section".into()))?;
    let sigma = sample_volatility(&v.model.vol, v.grid.dt(), v.grid.n_steps(), 1, c.seed, c.seed_mode.into())?;
    let q = v.model.noise.covariance_of();
    let p = project(&v.model.kernel, sigma.path(0), &q, pc.t, pc.s, &pc.xi)?;
    let meta = [
        ("t".to_string(), fmt_f64(pc.t)),
        ("s".to_string(), fmt_f64(pc.s)),
        ("c_min_eigenvalue".to_string(), fmt_f64(p.c_min_eigenvalue)),
    ];
    out.emit("gram.csv", report::matrix_doc(&p.gram, &meta))?;
    out.emit("c.csv", report::matrix_doc(&p.c, &meta))?;
    out.emit("gamma.csv", report::matrix_doc(&p.gamma, &meta))?;
    Ok(())
}

/// Runs one parsed invocation; `env_out` is the value of [`OUT_ENV`].
/// Returns the files written.
pub fn execute(cli: &Cli, env_out: Option<&str>) -> Result<Vec<PathBuf>, CliError> {
    let args = cli.command.args();
    let config = load(args)?;
    let validated = config.validate().map_err(CliError::Validation)?;
    let dir = resolve_output_dir(args.out.as_deref(), env_out, validated.config.output_dir.as_deref());
    let mut out = Emitter::new(dir, cli.command.name(), &validated)?;
    let work = |out: &mut Emitter| match &cli.command {
        Command::Simulate(_) => cmd_simulate(&validated, out),
        Command::Converge(_) => cmd_converge(&validated, out),
        Command::Charfn(_) => cmd_charfn(&validated, out),
        Command::Project(_) => cmd_project(&validated, out),
    };
    match args.threads {
        Some(0) => return Err(CliError::Validation("--threads: must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Validation(format!("--threads: {e}")))?;
            pool.install(|| work(&mut out))?
        }
        None => work(&mut out)?,
    }
    Ok(out.written)
}

/// Parses `args`, runs, prints outcome and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let env_out = std::env::var(OUT_ENV).ok();
    match execute(&cli, env_out.as_deref()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
