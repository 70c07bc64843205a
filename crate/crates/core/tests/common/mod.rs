#![allow(dead_code)]

use std::f64::consts::PI;

use pmean::measure::{AlgoConstants, BallContext, DiscreteMeasure, MeasureFile};
use pmean::solver::{oracle_mean, OracleOptions, OracleResult};
use pmean::ModelSpace;

/// A validated problem with its oracle p-mean and constants.
pub struct Setup {
    pub name: String,
    pub space: ModelSpace,
    pub measure: DiscreteMeasure,
    pub ctx: BallContext,
    pub oracle: OracleResult,
    pub constants: AlgoConstants,
}

impl Setup {
    pub fn new(name: &str, file: MeasureFile) -> Setup {
        let problem = file.build().expect("measure builds");
        let ctx = problem.validate().expect("admissible");
        let oracle = oracle_mean(&problem.measure, &ctx, OracleOptions::default()).expect("oracle converges");
        let constants = pmean::harness::constants_at(&problem.measure, &ctx, &oracle.e_p).expect("constants");
        Setup {
            name: name.to_string(),
            space: problem.space,
            measure: problem.measure,
            ctx,
            oracle,
            constants,
        }
    }

    /// `δ = 2 / C_{p,μ,K}`.
    pub fn delta(&self) -> f64 {
        2.0 / self.constants.c_growth
    }

    pub fn k_diameter(&self) -> f64 {
        2.0 * self.ctx.inner_radius
    }
}

fn spherical(theta: f64, phi: f64) -> Vec<f64> {
    vec![theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

fn hyperboloid(rho: f64, phi: f64) -> Vec<f64> {
    vec![rho.cosh(), rho.sinh() * phi.cos(), rho.sinh() * phi.sin()]
}

/// Three points at polar angle 0.3 around the north pole, ball of radius 0.6.
pub fn sphere_three(p: f64, weights: Option<Vec<f64>>) -> MeasureFile {
    MeasureFile::from_json(
        &serde_json::json!({
            "manifold": {"kind": "sphere", "dim": 2},
            "center": [0.0, 0.0, 1.0],
            "radius": 0.6,
            "p": p,
            "points": (0..3).map(|k| spherical(0.3, 2.0 * PI * k as f64 / 3.0)).collect::<Vec<_>>(),
            "weights": weights,
        })
        .to_string(),
    )
    .unwrap()
}

pub fn hyperbolic_three(p: f64) -> MeasureFile {
    MeasureFile::from_json(
        &serde_json::json!({
            "manifold": {"kind": "hyperbolic", "dim": 2},
            "center": [1.0, 0.0, 0.0],
            "radius": 1.0,
            "p": p,
            "points": [hyperboloid(0.4, 0.0), hyperboloid(0.3, 2.0), hyperboloid(0.5, 4.2)],
            "weights": [0.5, 0.3, 0.2],
        })
        .to_string(),
    )
    .unwrap()
}

pub fn euclidean_four(p: f64) -> MeasureFile {
    MeasureFile::from_json(
        &serde_json::json!({
            "manifold": {"kind": "euclidean", "dim": 2},
            "center": [0.0, 0.0],
            "radius": 1.0,
            "p": p,
            "points": [[0.4, 0.0], [-0.2, 0.3], [-0.1, -0.35], [0.1, 0.2]],
            "weights": [0.3, 0.2, 0.25, 0.25],
        })
        .to_string(),
    )
    .unwrap()
}

pub const ASYMMETRIC: [f64; 3] = [0.4, 0.35, 0.25];

/// The configurations of the convergence study.
pub fn convergence_setups() -> Vec<Setup> {
    let mut v = Vec::new();
    for p in [1.0, 1.5, 2.0] {
        v.push(Setup::new(&format!("sphere p={p}"), sphere_three(p, None)));
    }
    v.push(Setup::new("hyperbolic p=1.5", hyperbolic_three(1.5)));
    for p in [1.0, 2.0, 3.0] {
        v.push(Setup::new(&format!("euclidean p={p}"), euclidean_four(p)));
    }
    v
}

/// Every configuration where the explicit growth constant applies.
pub fn growth_setups() -> Vec<Setup> {
    vec![
        Setup::new("sphere p=1.5", sphere_three(1.5, Some(ASYMMETRIC.to_vec()))),
        Setup::new("sphere p=2", sphere_three(2.0, Some(ASYMMETRIC.to_vec()))),
        Setup::new("sphere p=1.2", sphere_three(1.2, None)),
        Setup::new("hyperbolic p=1.5", hyperbolic_three(1.5)),
        Setup::new("hyperbolic p=2", hyperbolic_three(2.0)),
        Setup::new("euclidean p=1.5", euclidean_four(1.5)),
        Setup::new("euclidean p=2", euclidean_four(2.0)),
    ]
}

/// A point of `K` at a random direction and radius (biased towards the boundary).
pub fn random_point_in_k(setup: &Setup, rng: &mut pmean::RngStream) -> pmean::Point {
    let space = setup.space;
    let a = &setup.ctx.center;
    let basis = space.orthonormal_basis(a);
    let mut dir: Vec<f64> = (0..space.dim()).map(|_| rng.next_normal()).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let radius = setup.ctx.inner_radius * rng.next_uniform().sqrt();
    for c in dir.iter_mut() {
        *c *= radius / norm;
    }
    space.exp_map(&space.from_coordinates(a, &dir, &basis)).unwrap()
}
