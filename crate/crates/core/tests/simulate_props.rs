use hambit::analysis::{empirical_moments, jackknife_mean};
use hambit::error::HambitError;
use hambit::hilbert::{CovarianceOp, LinearMap};
use hambit::kernels::{sample_volatility, KernelComponent, KernelSpec, OperatorOu, ScalarKernel, VolatilityModel};
use hambit::noise::{sample_increments, LevySpec};
use hambit::rng::SeedMode;
use hambit::simulate::{
    char_functional_analytic, char_functional_mc, checked_gram, hambit_direct, projection_coefficients, reconstruct,
    vmv_series, Drivers, HambitModel, TimeGrid, TruncationLevels,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
    (1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(du, dv, dh)| {
        let comp = (
            0..du,
            prop_oneof![
                (0.1f64..3.0).prop_map(|kappa| ScalarKernel::Exponential { kappa }),
                (-1.0f64..1.0).prop_map(|value| ScalarKernel::Constant { value }),
                (0.1f64..3.0, 0.0f64..1.0).prop_map(|(kappa, offset)| ScalarKernel::ShiftedExponential { kappa, offset }),
            ],
            proptest::collection::vec(-2.0f64..2.0, dh * dv),
        )
            .prop_map(move |(phi, g, entries)| KernelComponent {
                phi,
                g,
                b: LinearMap::new(dh, dv, &entries).unwrap(),
            });
        proptest::collection::vec(comp, 1..=3).prop_map(move |comps| KernelSpec::new(du, comps).unwrap())
    })
}

fn model_for(kernel: KernelSpec, lss: bool, poisson: bool) -> HambitModel {
    let du = kernel.dim_u();
    let dv = kernel.dim_v();
    let vol = if lss {
        VolatilityModel::scalar_lss(0.8, LevySpec::wiener(CovarianceOp::identity(du))).unwrap()
    } else {
        VolatilityModel::constant((0..du).map(|i| 1.0 - 0.3 * i as f64).collect()).unwrap()
    };
    let noise = if poisson {
        LevySpec::compound_poisson(2.0, CovarianceOp::identity(dv)).unwrap()
    } else {
        LevySpec::wiener(CovarianceOp::identity(dv))
    };
    HambitModel::new(kernel, vol, noise).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn full_series_equals_direct(kernel in kernel_strategy(), lss: bool, poisson: bool, seed in 0u64..10_000) {
        let model = model_for(kernel, lss, poisson);
        let grid = TimeGrid::new(0.1, 12).unwrap();
        let d = Drivers::sample(&model, grid, 4, seed, SeedMode::Independent).unwrap();
        let outs = grid.all_indices();
        let direct = hambit_direct(&model.kernel, &d, &outs).unwrap();
        let series = vmv_series(&model.kernel, &d, TruncationLevels::full(&model.kernel), &outs).unwrap();
        prop_assert!(direct.max_abs_diff(&series.ensemble).unwrap() <= 1e-10);
    }

    #[test]
    fn sampling_is_reproducible(kernel in kernel_strategy(), seed in 0u64..10_000) {
        let model = model_for(kernel, true, true);
        let grid = TimeGrid::new(0.05, 10).unwrap();
        let a = Drivers::sample(&model, grid, 3, seed, SeedMode::Independent).unwrap();
        let b = Drivers::sample(&model, grid, 3, seed, SeedMode::Independent).unwrap();
        prop_assert_eq!(a.increments(), b.increments());
        prop_assert_eq!(a.sigma(), b.sigma());
    }

    #[test]
    fn aggregation_preserves_totals(seed in 0u64..10_000, factor in prop_oneof![Just(1usize), Just(2), Just(4)]) {
        let spec = LevySpec::compound_poisson(3.0, CovarianceOp::new(vec![1.0, 0.5]).unwrap()).unwrap();
        let fine = sample_increments(&spec, 0.01, 16, 3, seed).unwrap();
        let coarse = fine.aggregate(factor).unwrap();
        for p in 0..3 {
            for c in 0..2 {
                let a: f64 = (0..16).map(|n| fine.increment(p, n)[c]).sum();
                let b: f64 = (0..16 / factor).map(|n| coarse.increment(p, n)[c]).sum();
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn projection_reproduces_span(coeffs in proptest::collection::vec(-3.0f64..3.0, 3), skew in -0.5f64..0.5) {
        let xi = vec![vec![1.0, skew, 0.0, 0.0], vec![0.0, 1.0, skew, 0.0], vec![skew, 0.0, 1.0, 1.0]];
        let f = reconstruct(&coeffs, &xi);
        let back = projection_coefficients(&f, &xi).unwrap();
        for (a, b) in back.iter().zip(&coeffs) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn increments_have_the_right_covariance() {
    let spec = LevySpec::wiener(CovarianceOp::new(vec![2.0, 0.5]).unwrap());
    let batch = sample_increments(&spec, 0.1, 1, 40_000, 9).unwrap();
    for (c, q) in [(0, 2.0), (1, 0.5)] {
        let sq: Vec<f64> = (0..40_000).map(|p| batch.increment(p, 0)[c].powi(2)).collect();
        let est = jackknife_mean(&sq);
        assert!(est.within(q * 0.1, 4.0), "{est:?}");
    }
    let cp = LevySpec::compound_poisson(5.0, CovarianceOp::new(vec![0.4]).unwrap()).unwrap();
    let batch = sample_increments(&cp, 0.2, 1, 40_000, 10).unwrap();
    let sq: Vec<f64> = (0..40_000).map(|p| batch.increment(p, 0)[0].powi(2)).collect();
    assert!(jackknife_mean(&sq).within(5.0 * 0.4 * 0.2, 4.0));
    let mean: Vec<f64> = (0..40_000).map(|p| batch.increment(p, 0)[0]).collect();
    assert!(jackknife_mean(&mean).within(0.0, 4.0));
}

#[test]
fn hambit_mean_is_zero_and_zero_sigma_is_degenerate() {
    let kernel = KernelSpec::single(ScalarKernel::Exponential { kappa: 1.0 }, LinearMap::identity(1)).unwrap();
    let model = HambitModel::new(
        kernel.clone(),
        VolatilityModel::scalar_lss(1.0, LevySpec::wiener(CovarianceOp::identity(1))).unwrap(),
        LevySpec::wiener(CovarianceOp::identity(1)),
    )
    .unwrap();
    let grid = TimeGrid::new(0.05, 20).unwrap();
    let d = Drivers::sample(&model, grid, 20_000, 5, SeedMode::Independent).unwrap();
    let e = hambit_direct(&model.kernel, &d, &[20]).unwrap();
    let m = empirical_moments(&e, 1.0).unwrap();
    assert!(m.mean[0].within(0.0, 4.0), "{:?}", m.mean[0]);

    let zero = HambitModel::new(
        kernel,
        VolatilityModel::constant(vec![0.0]).unwrap(),
        LevySpec::wiener(CovarianceOp::identity(1)),
    )
    .unwrap();
    let d = Drivers::sample(&zero, grid, 50, 5, SeedMode::Independent).unwrap();
    let e = hambit_direct(&zero.kernel, &d, &[20]).unwrap();
    let m = empirical_moments(&e, 1.0).unwrap();
    assert_eq!((m.mean[0].mean, m.cov(0, 0).mean), (0.0, 0.0));
    assert!(matches!(empirical_moments(&e, 0.5), Err(HambitError::NotOnGrid { .. })));
}

#[test]
fn characteristic_functional_edge_cases() {
    let kernel = KernelSpec::single(ScalarKernel::Exponential { kappa: 1.0 }, LinearMap::identity(1)).unwrap();
    let model = HambitModel::new(
        kernel,
        VolatilityModel::scalar_lss(1.0, LevySpec::wiener(CovarianceOp::identity(1))).unwrap(),
        LevySpec::wiener(CovarianceOp::identity(1)),
    )
    .unwrap();
    let grid = TimeGrid::new(0.1, 10).unwrap();
    let d = Drivers::sample(&model, grid, 100, 1, SeedMode::Independent).unwrap();
    let e = hambit_direct(&model.kernel, &d, &[10]).unwrap();
    let mc = char_functional_mc(&e, 1.0, &[0.0]).unwrap();
    assert_eq!((mc.value.re, mc.value.im, mc.stderr), (1.0, 0.0, 0.0));
    let shared = Drivers::sample(&model, grid, 10, 1, SeedMode::Shared).unwrap();
    assert!(matches!(
        char_functional_analytic(&model, shared.sigma(), 1.0, &[1.0]),
        Err(HambitError::SharedSeed)
    ));
}

#[test]
fn dependent_projection_family_is_rejected() {
    let xi = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
    match checked_gram(&xi, 2) {
        Err(HambitError::SingularGram { condition }) => assert!(condition > 1e12),
        other => panic!("expected singular Gram, got {other:?}"),
    }
}

#[test]
fn operator_ou_paths_stay_symmetric_roots() {
    let ou = OperatorOu::new(
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, -0.3, -2.0]),
        4.0,
        0.5,
        DMatrix::identity(2, 2),
    )
    .unwrap();
    let vol = VolatilityModel::OperatorOu(ou);
    let paths = sample_volatility(&vol, 0.01, 50, 20, 3, SeedMode::Independent).unwrap();
    for p in 0..20 {
        for n in [0, 25, 50] {
            let s = paths.at(p, n);
            assert!((s[1] - s[2]).abs() <= 1e-12);
        }
    }
    assert!(OperatorOu::new(DMatrix::identity(2, 2), 0.0, 0.0, DMatrix::identity(2, 2)).is_err());
}
