use hambit::analysis::{convergence_study, dyadic_levels, fit_rate, Level, Predictor, StudySpec};
use hambit::error::HambitError;
use hambit::hilbert::{CovarianceOp, LinearMap};
use hambit::kernels::{KernelSpec, ScalarKernel, VolatilityModel};
use hambit::noise::LevySpec;
use hambit::report::{read_convergence, read_ensemble, write_convergence};
use hambit::rng::SeedMode;
use hambit::simulate::HambitModel;
use std::path::Path;
use std::process::Command;

fn scalar(g: ScalarKernel) -> HambitModel {
    HambitModel::new(
        KernelSpec::single(g, LinearMap::identity(1)).unwrap(),
        VolatilityModel::constant(vec![1.0]).unwrap(),
        LevySpec::wiener(CovarianceOp::identity(1)),
    )
    .unwrap()
}

fn spec(levels: Vec<Level>) -> StudySpec {
    StudySpec {
        horizon: 1.0,
        x_max: 1.0,
        alpha: 1.0,
        levels,
        n_paths: 200,
        seed: 11,
        seed_mode: SeedMode::Independent,
    }
}

#[test]
fn courant_one_study_is_exact() {
    let levels = (0..4).map(|l| Level::new(0.1 / 2f64.powi(l), 0.1 / 2f64.powi(l))).collect();
    let table = convergence_study(&scalar(ScalarKernel::Exponential { kappa: 1.0 }), &spec(levels)).unwrap();
    assert!(table.rows.iter().all(|r| r.mse <= 1e-20 && r.lambda == 1.0));
}

#[test]
fn constant_kernel_has_no_transport_error() {
    let table = convergence_study(&scalar(ScalarKernel::Constant { value: 1.0 }), &spec(dyadic_levels(0.1, 0.05, 3))).unwrap();
    for r in &table.rows {
        assert!(r.mse.abs() <= 4.0 * r.stderr + 1e-24, "{r:?}");
        assert_eq!(r.bound_rhs, 0.0);
    }
}

#[test]
fn study_rejects_uncoupled_levels_and_unsupported_kernels() {
    let m = scalar(ScalarKernel::Exponential { kappa: 1.0 });
    let bad = spec(vec![Level::new(0.1, 0.05), Level::new(0.07, 0.03)]);
    assert!(matches!(convergence_study(&m, &bad), Err(HambitError::InvalidParameter { .. })));
    let shifted = scalar(ScalarKernel::ShiftedExponential { kappa: 1.0, offset: 0.5 });
    assert!(matches!(
        convergence_study(&shifted, &spec(dyadic_levels(0.1, 0.05, 2))),
        Err(HambitError::UnsupportedKernel { .. })
    ));
}

#[test]
fn two_levels_are_not_enough_to_fit() {
    let table = convergence_study(&scalar(ScalarKernel::Exponential { kappa: 1.0 }), &spec(dyadic_levels(0.1, 0.05, 2))).unwrap();
    assert!(matches!(
        fit_rate(&table, Predictor::DxMinusDt),
        Err(HambitError::InsufficientLevels { needed: 3, found: 2 })
    ));
}

#[test]
fn table_round_trips_through_csv() {
    let table = convergence_study(&scalar(ScalarKernel::Exponential { kappa: 2.0 }), &spec(dyadic_levels(0.2, 0.1, 3))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    write_convergence(&path, &table, &[]).unwrap();
    assert_eq!(read_convergence(&path).unwrap(), table);
}

const CONFIG: &str = r#"
seed = 5
n_paths = 16
[spaces]
dim_u = 1
dim_v = 1
dim_h = 1
[grid]
dt = 0.1
dx = 0.1
n_steps = 10
n_out = 3
[noise]
kind = "wiener"
q = [1.0]
[volatility]
kind = "constant"
sigma0 = [SIGMA]
[[kernel]]
phi = 0
b = [[1.0]]
g = { kind = "constant", value = 1.0 }
[charfn]
t = 1.0
h = [[0.0], [1.0]]
[project]
t = 1.0
s = 0.5
xi = [XI]
"#;

fn config(dir: &Path, sigma: &str, xi: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join("c.toml");
    let text = CONFIG.replace("SIGMA", sigma).replace("XI", xi);
    std::fs::write(&path, format!("{extra}{text}")).unwrap();
    path
}

fn hambit(args: &[&str], cfg: &Path, env_out: Option<&Path>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hambit"));
    cmd.args(args).arg("--config").arg(cfg).env_remove("HAMBIT_OUT");
    if let Some(dir) = env_out {
        cmd.env("HAMBIT_OUT", dir);
    }
    cmd.output().unwrap()
}

#[test]
fn cli_simulate_outputs_agree_and_zero_sigma_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "1.0", "[1.0]", "");
    let out = dir.path().join("run");
    let o = hambit(&["simulate", "--out", out.to_str().unwrap()], &cfg, None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let direct = read_ensemble(&out.join("direct.csv")).unwrap();
    let fd = read_ensemble(&out.join("fd.csv")).unwrap();
    let series = read_ensemble(&out.join("series.csv")).unwrap();
    assert!(fd.max_abs_diff(&direct).unwrap() <= 1e-12);
    assert!(series.max_abs_diff(&direct).unwrap() <= 1e-12);

    let cfg = config(dir.path(), "0.0", "[1.0]", "");
    let zero = dir.path().join("zero");
    assert!(hambit(&["simulate", "--out", zero.to_str().unwrap()], &cfg, None).status.success());
    for f in ["direct.csv", "series.csv", "fd.csv"] {
        assert!(read_ensemble(&zero.join(f)).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cli_output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "1.0", "[1.0]", "");
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");
    assert!(hambit(&["project"], &cfg, Some(&env_dir)).status.success());
    assert!(env_dir.join("gram.csv").exists());
    assert!(hambit(&["project", "--out", flag_dir.to_str().unwrap()], &cfg, Some(&env_dir)).status.success());
    assert!(flag_dir.join("c.csv").exists());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let cfg = config(dir.path(), "1.0", "[1.0], [2.0]", "");
    let o = hambit(&["project", "--out", out], &cfg, None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("condition number"));

    let cfg = config(dir.path(), "1.0", "[1.0]", "bogus = 3\n");
    assert_eq!(hambit(&["simulate", "--out", out], &cfg, None).status.code(), Some(2));

    let cfg = config(dir.path(), "1.0", "[1.0]", "seed_mode = \"shared\"\n");
    assert_eq!(hambit(&["charfn", "--out", out], &cfg, None).status.code(), Some(0));

    let missing = dir.path().join("missing.toml");
    assert_eq!(hambit(&["simulate", "--out", out], &missing, None).status.code(), Some(4));

    let cfg = config(dir.path(), "1.0", "[1.0]", "");
    assert_eq!(hambit(&["converge", "--out", out], &cfg, None).status.code(), Some(2));

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = hambit(&["project", "--out", blocker.join("sub").to_str().unwrap()], &cfg, None);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn cli_rejects_shared_seed_with_random_volatility() {
    let dir = tempfile::tempdir().unwrap();
    let text = CONFIG
        .replace("kind = \"constant\"\nsigma0 = [SIGMA]", "kind = \"scalar_lss\"\nrho = 1.0\ndriver = { kind = \"wiener\", q = [1.0] }")
        .replace("XI", "[1.0]");
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, format!("seed_mode = \"shared\"\n{text}")).unwrap();
    let o = hambit(&["charfn", "--out", dir.path().join("o").to_str().unwrap()], &cfg, None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed_mode"));
}

#[test]
fn cli_charfn_trivial_direction_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "1.0", "[1.0]", "");
    let out = dir.path().join("cf");
    assert!(hambit(&["charfn", "--out", out.to_str().unwrap()], &cfg, None).status.success());
    let doc = hambit::report::CsvDoc::read(&out.join("charfn.csv")).unwrap();
    let row = &doc.rows[0];
    let col = |n: &str| row[doc.column(n).unwrap()].parse::<f64>().unwrap();
    assert_eq!((col("mc_re"), col("analytic_re"), col("mc_stderr")), (1.0, 1.0, 0.0));
}
