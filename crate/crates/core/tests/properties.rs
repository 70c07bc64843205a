//! Property tests for the geometry, measure, solver and limit-process invariants.

mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use common::{Setup, ASYMMETRIC};
use pmean::derive_stream;
use pmean::fluctuation::{hessian_h, limit_covariance, limit_spec_for, sorted_eigen};
use pmean::geometry::{ModelSpace, Point, SpaceKind};
use pmean::measure::{GrowthSource, MeasureFile};
use pmean::solver::{default_start, grad_f, grad_objective, objective, run_chain, sgd_step, StepSchedule};

fn space_strategy() -> impl Strategy<Value = ModelSpace> {
    (
        prop_oneof![
            Just(SpaceKind::Euclidean),
            Just(SpaceKind::Sphere),
            Just(SpaceKind::Hyperbolic)
        ],
        1usize..5,
    )
        .prop_map(|(k, d)| ModelSpace::new(k, d).unwrap())
}

fn coords(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

/// A point reached from the origin by a tangent vector with coordinates in `[-1, 1]`.
fn point_from(space: &ModelSpace, c: &[f64]) -> Point {
    let o = space.origin();
    let basis = space.orthonormal_basis(&o);
    space
        .exp_map(&space.from_coordinates(&o, &c[..space.dim()], &basis))
        .unwrap()
}

fn embedding_defect(space: &ModelSpace, x: &Point) -> f64 {
    let c = x.coords();
    match space.kind() {
        SpaceKind::Euclidean => 0.0,
        SpaceKind::Sphere => (c.norm_squared() - 1.0).abs(),
        SpaceKind::Hyperbolic => (c.rows(1, c.len() - 1).norm_squared() - c[0] * c[0] + 1.0).abs(),
    }
}

fn all_setups() -> Vec<Setup> {
    let mut v = common::convergence_setups();
    v.extend(common::growth_setups());
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exp_log_round_trip(space in space_strategy(), a in coords(4), v in coords(5), scale in 0.0f64..1.0) {
        let x = point_from(&space, &a);
        let raw = DVector::from_row_slice(&v[..space.ambient_dim()]);
        let mut t = space.project_tangent(&x, raw);
        let norm = space.norm(&t);
        prop_assume!(norm > 1e-8);
        t.scale_mut(0.9 * space.injectivity_radius().min(3.0) * scale / norm);
        let y = space.exp_map(&t).unwrap();
        prop_assert!(embedding_defect(&space, &y) < 1e-12 * (1.0 + y.coords().norm_squared()));
        let back = space.log_map(&x, &y).unwrap();
        prop_assert!((back.vec() - t.vec()).abs().max() < 1e-9);
        prop_assert!((space.distance(&x, &y).unwrap() - space.norm(&t)).abs() < 1e-10);
    }

    #[test]
    fn distance_is_a_metric(space in space_strategy(), a in coords(4), b in coords(4), c in coords(4)) {
        let (x, y, z) = (point_from(&space, &a), point_from(&space, &b), point_from(&space, &c));
        let dxy = space.distance(&x, &y).unwrap();
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - space.distance(&y, &x).unwrap()).abs() < 1e-10);
        prop_assert!(dxy <= space.distance(&x, &z).unwrap() + space.distance(&z, &y).unwrap() + 1e-10);
        prop_assert!(space.distance(&x, &x).unwrap() < 1e-12);
    }

    #[test]
    fn log_is_tangent(space in space_strategy(), a in coords(4), b in coords(4)) {
        let (x, y) = (point_from(&space, &a), point_from(&space, &b));
        let v = space.log_map(&x, &y).unwrap();
        prop_assert!(space.tangent(&x, v.vec().as_slice().to_vec()).is_ok());
    }

    #[test]
    fn sampling_is_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let setup_measure = common::sphere_three(1.5, Some(ASYMMETRIC.to_vec())).build().unwrap().measure;
        let draw = || {
            let mut rng = derive_stream(seed, stream);
            (0..64).map(|_| setup_measure.sample_index(&mut rng)).collect::<Vec<_>>()
        };
        prop_assert_eq!(draw(), draw());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Chains started anywhere in `K` never leave it, and the pathwise descent
    /// inequality holds at every step when `p < 2`.
    #[test]
    fn chains_stay_in_k(which in 0usize..14, seed in any::<u64>(), delta_scale in 0.5f64..4.0) {
        let setups = all_setups();
        let setup = &setups[which % setups.len()];
        let mut rng = derive_stream(seed, 7);
        let x0 = common::random_point_in_k(setup, &mut rng);
        let schedule = StepSchedule::harmonic(delta_scale / setup.constants.c_growth, setup.constants.delta1).unwrap();
        let mut trace = run_chain(&setup.measure, &setup.ctx, &schedule, x0, 500, derive_stream(seed, 0)).unwrap();
        for x in &trace.states {
            let d = setup.space.distance(&setup.ctx.center, x).unwrap();
            prop_assert!(d <= setup.ctx.inner_radius + 1e-9);
        }
        trace
            .attach_diagnostics(&setup.measure, &setup.oracle.e_p, setup.ctx.p, setup.constants.c_second)
            .unwrap();
        for diag in trace.diagnostics.as_ref().unwrap() {
            if let Some(slack) = diag.descent_slack {
                prop_assert!(slack >= -1e-9, "slack {slack} on {}", setup.name);
            }
        }
    }

    #[test]
    fn quadratic_growth_holds(which in 0usize..7, seed in any::<u64>()) {
        let setups = common::growth_setups();
        let setup = &setups[which];
        let mut rng = derive_stream(seed, 3);
        let x = common::random_point_in_k(setup, &mut rng);
        let rho2 = setup.space.distance(&x, &setup.oracle.e_p).unwrap().powi(2);
        let gap = objective(&setup.space, &setup.measure, &x, setup.ctx.p).unwrap() - setup.oracle.objective;
        prop_assert!(gap >= 0.5 * setup.constants.c_growth * rho2 - 1e-9);
    }

    #[test]
    fn limit_covariance_diagonal_is_psd(which in 0usize..7, t in 0.01f64..5.0, ds in 1.05f64..3.0) {
        let setups = common::growth_setups();
        let setup = &setups[which];
        let basis = setup.space.orthonormal_basis(&setup.oracle.e_p);
        let h = hessian_h(&setup.measure, &setup.oracle.e_p, setup.ctx.p, &basis).unwrap();
        let lambda_min = sorted_eigen(&h).0[0];
        let (spec, _, _) = limit_spec_for(&setup.measure, &setup.ctx, &setup.oracle.e_p, ds / lambda_min).unwrap();
        let c = limit_covariance(&spec, t, t).unwrap();
        prop_assert!((&c - c.transpose()).abs().max() <= 1e-12 * c.abs().max());
        let (ev, _) = sorted_eigen(&c);
        prop_assert!(ev[0] >= -1e-12 * c.abs().max());
    }
}

#[test]
fn hessian_is_symmetric_and_bounded_below_by_growth_constant() {
    for setup in all_setups() {
        let basis = setup.space.orthonormal_basis(&setup.oracle.e_p);
        let Ok(h) = hessian_h(&setup.measure, &setup.oracle.e_p, setup.ctx.p, &basis) else {
            assert_eq!(setup.ctx.p, 1.0, "{}: Hessian undefined", setup.name);
            continue;
        };
        assert!(
            (&h - h.transpose()).abs().max() <= 1e-12 * h.abs().max(),
            "{}",
            setup.name
        );
        let lambda_min = sorted_eigen(&h).0[0];
        if setup.ctx.p > 1.0 && setup.ctx.p <= 2.0 {
            assert!(lambda_min >= 0.0, "{}: not PSD", setup.name);
            if setup.constants.growth_source == GrowthSource::Explicit {
                assert!(
                    lambda_min >= setup.constants.c_growth - 1e-6,
                    "{}: {lambda_min} < C",
                    setup.name
                );
            }
        }
    }
}

#[test]
fn gradient_matches_finite_differences_of_objective() {
    for setup in all_setups() {
        let mut rng = derive_stream(11, 0);
        for _ in 0..20 {
            let x = common::random_point_in_k(&setup, &mut rng);
            let p = setup.ctx.p;
            // Stay off the support, where F is not differentiable for p = 1.
            let near = setup
                .measure
                .points()
                .iter()
                .any(|y| setup.space.distance(&x, y).unwrap() < 1e-3);
            if near {
                continue;
            }
            let g = grad_objective(&setup.space, &setup.measure, &x, p).unwrap();
            let scale = setup.space.norm(&g).max(1.0);
            for b in setup.space.orthonormal_basis(&x) {
                let h = 1e-5;
                let f = |s: f64| {
                    objective(
                        &setup.space,
                        &setup.measure,
                        &setup.space.exp_map(&b.scaled(s)).unwrap(),
                        p,
                    )
                    .unwrap()
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let an = setup.space.inner(&g, &b);
                assert!((fd - an).abs() <= 1e-6 * scale, "{}: {fd} vs {an}", setup.name);
            }
        }
    }
}

/// The chain's variance recursion in Euclidean `p = 2`, evaluated exactly:
/// with `t_k = δ/k` and `X_k − e` a weighted running average of centred
/// samples, `n·E|X_n − e|²` tends to `4δ²σ²/(4δ − 1)`.
#[test]
fn euclidean_variance_recursion_oracle() {
    let setup = Setup::new("euclidean p=2", common::euclidean_four(2.0));
    let e = setup.oracle.e_p.coords().clone();
    let w = setup.measure.weights();
    let sigma2: f64 = setup
        .measure
        .points()
        .iter()
        .zip(w)
        .map(|(y, w)| w * (y.coords() - &e).norm_squared())
        .sum();
    let delta = 1.0;
    let n = 100_000u64;
    // E|X_k − e|² evolves as (1 − 2t)² v + 4t² σ² once the start is at e.
    let mut v = 0.0;
    for k in 1..=n {
        let t = delta / k as f64;
        if 2.0 * t > 1.0 {
            continue;
        }
        v = (1.0 - 2.0 * t).powi(2) * v + 4.0 * t * t * sigma2;
    }
    let limit = 4.0 * delta * delta * sigma2 / (4.0 * delta - 1.0);
    assert!(
        ((n as f64 * v) / limit - 1.0).abs() < 0.01,
        "{} vs {limit}",
        n as f64 * v
    );
}

/// For `p = 2` the second-order correction `C·t²` does not bound the Taylor
/// remainder of `H` along a single step once the support reaches the edge of
/// the ball; it still bounds it in conditional mean over the discrete measure.
#[test]
fn quadratic_correction_pathwise_and_in_mean() {
    let file = MeasureFile::from_json(
        &serde_json::json!({
            "manifold": {"kind": "euclidean", "dim": 1},
            "center": [0.0],
            "radius": 1.0,
            "p": 2.0,
            "points": [[-0.98], [0.98]],
        })
        .to_string(),
    )
    .unwrap();
    let setup = Setup::new("euclidean p=2 wide", file);
    let (space, m) = (setup.space, &setup.measure);
    let c = setup.constants.c_second;
    let t = setup.constants.delta1;
    let mut pathwise_worst = f64::INFINITY;
    let mut mean_worst = f64::INFINITY;
    let limit = setup.ctx.inner_radius;
    for k in 0..=40 {
        let x = space.point(vec![-limit + 2.0 * limit * k as f64 / 40.0]).unwrap();
        let h_x = objective(&space, m, &x, 2.0).unwrap();
        let g_h = grad_objective(&space, m, &x, 2.0).unwrap();
        let mut expected = 0.0;
        for (y, w) in m.points().iter().zip(m.weights()) {
            let g_f = grad_f(&space, &x, y, 2.0).unwrap();
            let h_next = objective(&space, m, &sgd_step(&space, &x, y, t, 2.0).unwrap(), 2.0).unwrap();
            pathwise_worst = pathwise_worst.min(h_x - t * space.inner(&g_h, &g_f) + c * t * t - h_next);
            expected += w * h_next;
        }
        let g2 = space.inner(&g_h, &g_h);
        mean_worst = mean_worst.min(h_x - t * g2 + c * t * t - expected);
    }
    assert!(pathwise_worst < -1e-9, "pathwise slack {pathwise_worst}");
    assert!(mean_worst >= -1e-12, "mean slack {mean_worst}");
}

#[test]
fn default_start_lies_in_k() {
    for setup in all_setups() {
        let x0 = default_start(&setup.space, &setup.measure, setup.ctx.p).unwrap();
        assert!(setup.space.distance(&setup.ctx.center, &x0).unwrap() <= setup.ctx.inner_radius);
    }
}

#[test]
fn measure_file_rejects_unknown_keys() {
    let text = r#"{"manifold":{"kind":"euclidean","dim":1},"center":[0],"radius":1,"p":2,"points":[[0.1]],"extra":1}"#;
    assert!(MeasureFile::from_json(text).is_err());
}
