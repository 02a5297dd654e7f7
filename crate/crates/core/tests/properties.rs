//! Property tests over randomly drawn valid models.

use num_complex::Complex64;
use ouruin::eigensystem::SolverOptions;
use ouruin::model::{validate_model, ModelParams, OuModel};
use ouruin::quadrature::{integrate_interval, UnitRule};
use ouruin::ruin::{ruin_probability, FirstPassage};
use ouruin::simulate::{estimate_ruin, PathConfig};
use proptest::prelude::*;

fn increasing_rates(first: f64, gaps: Vec<f64>) -> Vec<f64> {
    let mut out = vec![first];
    for g in gaps {
        out.push(out.last().unwrap() + g);
    }
    out
}

fn normalized(w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Valid models with positive weights, up to three rates per side.
fn models(kappa_sign: f64) -> impl Strategy<Value = OuModel> {
    (1usize..=3, 1usize..=3)
        .prop_flat_map(move |(r, s)| {
            (
                0.7..2.0f64,
                0.5..2.0f64,
                0.3..0.85f64,
                proptest::collection::vec(0.2..1.0f64, r),
                0.5..1.5f64,
                proptest::collection::vec(0.4..1.5f64, r - 1),
                proptest::collection::vec(0.2..1.0f64, s),
                0.5..1.5f64,
                proptest::collection::vec(0.4..1.5f64, s - 1),
            )
        })
        .prop_filter_map("invalid model", move |(k, l, p, a, m0, mg, b, n0, ng)| {
            validate_model(&ModelParams {
                kappa: kappa_sign * k,
                lambda: l,
                p,
                alphas: normalized(a),
                mus: increasing_rates(m0, mg),
                betas: normalized(b),
                nus: increasing_rates(n0, ng),
            })
            .ok()
        })
}

fn re(v: f64) -> Complex64 {
    Complex64::new(v, 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jump_law_has_unit_mass(m in models(1.0)) {
        let rule = UnitRule::default();
        for side in [&m.down, &m.up] {
            let mass = integrate_interval(|u| re(side.density(u)), 0.0, f64::INFINITY, 1.0, &rule);
            prop_assert!((mass.value.re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cdf_is_monotone_with_density_as_derivative(m in models(1.0)) {
        let n = 10_000;
        let grid: Vec<f64> = (0..n).map(|i| -8.0 + 16.0 * i as f64 / (n - 1) as f64).collect();
        prop_assert!(grid.windows(2).all(|w| m.jump_cdf(w[1]) >= m.jump_cdf(w[0])));
        let h = 1e-5;
        for &u in grid.iter().step_by(97).filter(|u| u.abs() > 1e-3) {
            let fd = (m.jump_cdf(u + h) - m.jump_cdf(u - h)) / (2.0 * h);
            let d = m.jump_density(u);
            prop_assert!((fd - d).abs() <= 1e-6 * d.max(1e-3), "u = {u}: {fd} vs {d}");
        }
    }

    #[test]
    fn point_classes_ignore_time_scale(m in models(1.0), c in 0.1..10.0f64, k in -8i32..8) {
        let scaled = |c: f64| {
            let mut p = m.params();
            p.kappa *= c;
            p.lambda *= c;
            validate_model(&p).unwrap().classify_points()
        };
        // Exact for powers of two; otherwise the rescaled ratio may round differently.
        prop_assert_eq!(m.classify_points(), scaled(2f64.powi(k)));
        for (a, b) in m.classify_points().iter().zip(scaled(c)) {
            prop_assert_eq!(a.location, b.location);
            prop_assert_eq!(a.kind, b.kind);
            prop_assert!((a.exponent - b.exponent).abs() <= 4.0 * f64::EPSILON * a.exponent.abs());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ruin_is_a_decreasing_probability(m in models(1.0), level in prop_oneof![-2.0..-0.2f64, 0.2..1.0f64]) {
        let opts = SolverOptions::default();
        let fp = FirstPassage::new(&m, level, 0.0, &opts).unwrap();
        let start = level.max(0.0);
        let mut prev = f64::INFINITY;
        for i in 1..=6 {
            let x = start + 0.5 * i as f64;
            let r = fp.ruin(x).unwrap();
            prop_assert!(r.within_invariants(1e-8), "x = {x}: {r:?}");
            prop_assert!(r.value <= prev + 1e-10, "not decreasing at x = {x}");
            prev = r.value;
        }
    }

    #[test]
    fn undershoot_transform_decreases_in_zeta(m in models(1.0), level in -2.0..-0.2f64, x in 0.1..2.0f64) {
        let opts = SolverOptions::default();
        let mut prev = f64::INFINITY;
        for zeta in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let out = FirstPassage::new(&m, level, zeta, &opts).unwrap().laplace(x).unwrap();
            prop_assert!(out.jump.within_invariants(1e-8));
            prop_assert!(out.jump.value <= prev + 1e-10, "zeta = {zeta}");
            prev = out.jump.value;
        }
    }

    #[test]
    fn negative_drift_transform_is_a_decreasing_probability(m in models(-1.0), level in -2.0..-0.2f64) {
        let opts = SolverOptions::default();
        let x = level + 1.0;
        let mut prev = f64::INFINITY;
        for zeta in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let out = FirstPassage::new(&m, level, zeta, &opts).unwrap().laplace(x).unwrap();
            prop_assert!(out.jump.within_invariants(1e-8));
            prop_assert!(out.jump.value <= prev + 1e-10);
            prev = out.jump.value;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn estimates_depend_only_on_the_seed(m in models(1.0), seed in any::<u64>()) {
        let cfg = PathConfig::for_model(&m, 1.0, seed, 5000);
        let a = estimate_ruin(&m, 1.0, -0.5, &cfg);
        let b = estimate_ruin(&m, 1.0, -0.5, &cfg);
        prop_assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        prop_assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn simulation_agrees_with_the_solver(m in models(1.0), seed in any::<u64>()) {
        let mut cfg = PathConfig::for_model(&m, 1.0, seed, 40_000);
        cfg.horizon = 1e4;
        let est = estimate_ruin(&m, 1.0, -0.5, &cfg);
        let exact = ruin_probability(&m, 1.0, -0.5, &SolverOptions::default()).unwrap().value;
        // Five standard errors: eight cases must all pass.
        prop_assert!((est.mean - exact).abs() <= 5.0 * est.stderr.max(1e-3), "{} vs {exact}", est.mean);
    }
}
