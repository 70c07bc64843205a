//! Discrete probability measures on a geodesic ball, admissibility checks and
//! the constants that drive the step sizes.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, ModelSpace, Point, SpaceKind};
use crate::rng::RngStream;

/// Weights below this are rejected: they break strict monotonicity of the CDF.
pub const MIN_WEIGHT: f64 = 1e-15;
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;
/// Support points closer than this count as duplicates.
pub const DISTINCT_TOLERANCE: f64 = 1e-10;
/// Threshold on the second singular value of the stacked log vectors (p = 1).
pub const COLLINEARITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("support must contain at least two points, got {count}")]
    TooFewPoints { count: usize },
    #[error("support points {first} and {second} coincide (distance {distance:e})")]
    DuplicatePoints { first: usize, second: usize, distance: f64 },
    #[error("{weights} weights given for {points} points")]
    WeightCount { points: usize, weights: usize },
    #[error("weight {index} = {weight:e} is below the minimum {MIN_WEIGHT:e}")]
    NonPositiveWeight { index: usize, weight: f64 },
    #[error("weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOLERANCE:e}")]
    WeightSum { sum: f64 },
    #[error("exponent p = {p} must be a finite real >= 1")]
    InvalidExponent { p: f64 },
    #[error("radius {radius} must be a positive finite real")]
    InvalidRadius { radius: f64 },
    #[error(
        "radius bound violated: r = {radius} must be strictly below r_alpha_p = {bound} \
         (half of min(injectivity radius, {which})) for p = {p}"
    )]
    RadiusBound {
        radius: f64,
        bound: f64,
        p: f64,
        which: &'static str,
    },
    #[error(
        "support containment violated: point {index} lies at distance {distance} \
         from the center, not strictly inside the ball of radius {radius}"
    )]
    SupportOutsideBall { index: usize, distance: f64, radius: f64 },
    #[error(
        "support degeneracy: for p = 1 the support must not lie on a single geodesic \
         (second singular value {singular_value:e} <= {COLLINEARITY_TOLERANCE:e})"
    )]
    CollinearSupport { singular_value: f64 },
    #[error(
        "growth constant for p = {p} has no closed form; run the oracle first and \
         supply the Hessian's smallest eigenvalue"
    )]
    DeferredConstant { p: f64 },
    #[error("invalid measure file: {0}")]
    Parse(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, MeasureError>;

/// Weighted support points with cumulative sums for inverse-CDF sampling.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    space: ModelSpace,
    points: Vec<Point>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DiscreteMeasure {
    /// Uniform weights are used when `weights` is `None`.
    pub fn new(space: ModelSpace, points: Vec<Point>, weights: Option<Vec<f64>>) -> Result<Self> {
        let m = points.len();
        if m < 2 {
            return Err(MeasureError::TooFewPoints { count: m });
        }
        for p in &points {
            // Length check against the space.
            space.distance(p, p)?;
        }
        for i in 0..m {
            for j in i + 1..m {
                let distance = space.distance(&points[i], &points[j])?;
                if distance <= DISTINCT_TOLERANCE {
                    return Err(MeasureError::DuplicatePoints {
                        first: i,
                        second: j,
                        distance,
                    });
                }
            }
        }
        let weights = weights.unwrap_or_else(|| vec![1.0 / m as f64; m]);
        if weights.len() != m {
            return Err(MeasureError::WeightCount {
                points: m,
                weights: weights.len(),
            });
        }
        for (index, &weight) in weights.iter().enumerate() {
            if !(weight >= MIN_WEIGHT) || !weight.is_finite() {
                return Err(MeasureError::NonPositiveWeight { index, weight });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(MeasureError::WeightSum { sum });
        }
        let mut cumulative = Vec::with_capacity(m);
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        cumulative[m - 1] = 1.0;
        Ok(DiscreteMeasure {
            space,
            points,
            weights,
            cumulative,
        })
    }

    pub fn space(&self) -> ModelSpace {
        self.space
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Inverse CDF: the first index whose cumulative weight exceeds `u`.
    pub fn index_for_uniform(&self, u: f64) -> usize {
        self.cumulative.partition_point(|&c| c <= u).min(self.points.len() - 1)
    }

    pub fn sample_index(&self, rng: &mut RngStream) -> usize {
        self.index_for_uniform(rng.next_uniform())
    }

    pub fn sample(&self, rng: &mut RngStream) -> &Point {
        &self.points[self.sample_index(rng)]
    }
}

/// The ball `B(a, r)`, the exponent, and the derived set
/// `K = B̄(a, r − ε)` with `ε = (r − max_i ρ(a, x_i)) / 2`.
#[derive(Debug, Clone, Serialize)]
pub struct BallContext {
    #[serde(serialize_with = "serialize_point")]
    pub center: Point,
    pub radius: f64,
    pub p: f64,
    pub eps: f64,
    pub inner_radius: f64,
    pub max_support_dist: f64,
}

fn serialize_point<S: serde::Serializer>(p: &Point, s: S) -> std::result::Result<S::Ok, S::Error> {
    p.as_slice().serialize(s)
}

impl BallContext {
    /// Distance from the support to the complement of the ball.
    pub fn support_gap(&self) -> f64 {
        self.radius - self.max_support_dist
    }
}

/// Largest admissible radius for exponent `p` on `space`.
pub fn radius_bound(space: &ModelSpace, p: f64) -> (f64, &'static str) {
    let alpha = space.alpha();
    let (curvature_limit, which) = if p < 2.0 {
        (
            if alpha > 0.0 { PI / (2.0 * alpha) } else { f64::INFINITY },
            "pi/(2 alpha)",
        )
    } else {
        (if alpha > 0.0 { PI / alpha } else { f64::INFINITY }, "pi/alpha")
    };
    (0.5 * space.injectivity_radius().min(curvature_limit), which)
}

/// Checks the standing assumptions on `(r, p, μ)` and builds the ball context.
pub fn validate_assumption1(measure: &DiscreteMeasure, center: &Point, radius: f64, p: f64) -> Result<BallContext> {
    let space = measure.space();
    if !(p >= 1.0) || !p.is_finite() {
        return Err(MeasureError::InvalidExponent { p });
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(MeasureError::InvalidRadius { radius });
    }
    let (bound, which) = radius_bound(&space, p);
    if radius >= bound {
        return Err(MeasureError::RadiusBound {
            radius,
            bound,
            p,
            which,
        });
    }
    let mut max_support_dist = 0.0f64;
    for (index, x) in measure.points().iter().enumerate() {
        let distance = space.distance(center, x)?;
        if distance >= radius {
            return Err(MeasureError::SupportOutsideBall {
                index,
                distance,
                radius,
            });
        }
        max_support_dist = max_support_dist.max(distance);
    }
    if p == 1.0 {
        let singular_value = second_singular_value(measure)?;
        if singular_value <= COLLINEARITY_TOLERANCE {
            return Err(MeasureError::CollinearSupport { singular_value });
        }
    }
    let eps = (radius - max_support_dist) / 2.0;
    Ok(BallContext {
        center: center.clone(),
        radius,
        p,
        eps,
        inner_radius: radius - eps,
        max_support_dist,
    })
}

/// Second largest singular value of the log vectors of the support seen
/// from the first support point (zero when only one direction exists).
fn second_singular_value(measure: &DiscreteMeasure) -> Result<f64> {
    let space = measure.space();
    let base = &measure.points()[0];
    let basis = space.orthonormal_basis(base);
    let rows = measure.len() - 1;
    let mut stacked = DMatrix::zeros(rows, space.dim());
    for (r, y) in measure.points()[1..].iter().enumerate() {
        let v = space.log_map(base, y)?;
        let c = space.coordinates(&v, &basis);
        for (k, value) in c.iter().enumerate() {
            stacked[(r, k)] = *value;
        }
    }
    let mut sv: Vec<f64> = stacked.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv.get(1).copied().unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthSource {
    /// Closed form valid for `p ∈ (1, 2]`.
    Explicit,
    /// Smallest Hessian eigenvalue at the computed p-mean (an upper bound on
    /// the true constant, used as a proxy).
    HessianProxy,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlgoConstants {
    pub c_growth: f64,
    pub growth_source: GrowthSource,
    pub c_second: f64,
    pub delta1: f64,
    pub lambda_min_estimate: Option<f64>,
}

impl AlgoConstants {
    pub fn new(ctx: &BallContext, space: &ModelSpace, lambda_min: Option<f64>) -> Result<Self> {
        let (c_growth, growth_source) = growth_constant(ctx, space, lambda_min)?;
        Ok(AlgoConstants {
            c_growth,
            growth_source,
            c_second: second_derivative_constant(ctx, space),
            delta1: delta1(ctx, c_growth),
            lambda_min_estimate: lambda_min,
        })
    }
}

fn explicit_growth(ctx: &BallContext, space: &ModelSpace) -> Option<f64> {
    let (p, r) = (ctx.p, ctx.radius);
    if !(p > 1.0 && p <= 2.0) {
        return None;
    }
    let coeffs = space.comparison_coefficients(r).ok()?;
    let c = p * (2.0 * r).powf(p - 2.0) * (p - 1.0).min(coeffs.cot_term);
    (c > 0.0).then_some(c)
}

/// Quadratic-growth constant `C_{p,μ,K}`.
///
/// For `p ∈ (1, 2]` this is `p(2r)^{p−2}·min(p−1, 2αr·cot(2αr))`. Outside
/// that range (or when the closed form is not positive, which happens on the
/// sphere for `p = 2` once `2r ≥ π/2`) the smallest Hessian eigenvalue at the
/// p-mean must be supplied and is returned as a proxy.
pub fn growth_constant(ctx: &BallContext, space: &ModelSpace, lambda_min: Option<f64>) -> Result<(f64, GrowthSource)> {
    if let Some(c) = explicit_growth(ctx, space) {
        return Ok((c, GrowthSource::Explicit));
    }
    match lambda_min {
        Some(l) if l > 0.0 => Ok((l, GrowthSource::HessianProxy)),
        _ => Err(MeasureError::DeferredConstant { p: ctx.p }),
    }
}

/// Whether [`growth_constant`] can be evaluated without the oracle.
pub fn has_explicit_growth(ctx: &BallContext, space: &ModelSpace) -> bool {
    explicit_growth(ctx, space).is_some()
}

/// Bound `C(β, r, p)` on the second derivatives along algorithm geodesics.
pub fn second_derivative_constant(ctx: &BallContext, space: &ModelSpace) -> f64 {
    let (p, r) = (ctx.p, ctx.radius);
    // β·coth(2βr), equal to 1/(2r) in the flat limit.
    let coth_term = match space.comparison_coefficients(r) {
        Ok(c) => c.coth_term,
        Err(_) => {
            debug_assert!(space.kind() == SpaceKind::Sphere);
            1.0 / (2.0 * r)
        }
    };
    if p < 2.0 {
        p * p * (2.0 * r).powf(2.0 * p - 1.0) * coth_term
    } else {
        p.powi(3) / 4.0 * (2.0 * r).powf(3.0 * p - 4.0) * (2.0 * r * coth_term + 2.0 * p - 4.0)
    }
}

/// Step cap that keeps every iterate inside `K`, ignoring the growth term.
pub fn containment_step_cap(ctx: &BallContext) -> f64 {
    ctx.support_gap() / (2.0 * ctx.p * (2.0 * ctx.radius).powf(ctx.p - 1.0))
}

/// `δ₁ = min(1/C_{p,μ,K}, ρ_gap / (2p(2r)^{p−1}))`.
pub fn delta1(ctx: &BallContext, c_growth: f64) -> f64 {
    (1.0 / c_growth).min(containment_step_cap(ctx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSpec {
    pub kind: SpaceKind,
    pub dim: usize,
}

/// On-disk measure description (JSON, unknown keys rejected).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureFile {
    pub manifold: ManifoldSpec,
    pub center: Vec<f64>,
    pub radius: f64,
    pub p: f64,
    pub points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

/// A parsed measure file: everything needed to validate and run.
#[derive(Debug, Clone)]
pub struct MeasureProblem {
    pub space: ModelSpace,
    pub measure: DiscreteMeasure,
    pub center: Point,
    pub radius: f64,
    pub p: f64,
}

impl MeasureProblem {
    pub fn validate(&self) -> Result<BallContext> {
        validate_assumption1(&self.measure, &self.center, self.radius, self.p)
    }
}

impl MeasureFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| MeasureError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| MeasureError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("measure file serialises")
    }

    pub fn build(&self) -> Result<MeasureProblem> {
        let space = ModelSpace::new(self.manifold.kind, self.manifold.dim)?;
        let center = space.point(self.center.clone())?;
        let points = self
            .points
            .iter()
            .map(|c| space.point(c.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let measure = DiscreteMeasure::new(space, points, self.weights.clone())?;
        Ok(MeasureProblem {
            space,
            measure,
            center,
            radius: self.radius,
            p: self.p,
        })
    }
}
