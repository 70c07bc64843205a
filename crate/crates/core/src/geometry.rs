//! Constant-curvature model spaces: Euclidean space, the unit sphere and the
//! unit hyperboloid.
//!
//! Sphere and hyperbolic points are stored in ambient coordinates of length
//! `dim + 1`. The hyperboloid uses the Minkowski form with signature
//! `(-, +, ..., +)` and lives on the sheet `x0 > 0`. Every `exp_map` output is
//! re-projected onto its constraint set.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the embedding constraint for user-supplied points.
pub const POINT_TOLERANCE: f64 = 1e-12;
/// Tolerance on tangency for user-supplied tangent vectors.
pub const TANGENT_TOLERANCE: f64 = 1e-10;
/// Sphere points closer than this to antipodal have no unique logarithm.
pub const ANTIPODAL_TOLERANCE: f64 = 1e-9;
/// Distances at or below this are treated as coincident points.
pub const COINCIDENCE_TOLERANCE: f64 = 1e-12;

const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("point is off the manifold (constraint residual {residual:e})")]
    NotOnManifold { residual: f64 },
    #[error("vector is not tangent at its base point (residual {residual:e})")]
    NotTangent { residual: f64 },
    #[error("tangent vector norm {norm} reaches the injectivity radius {limit}")]
    BeyondInjectivity { norm: f64, limit: f64 },
    #[error("antipodal sphere points have no unique logarithm (distance {distance})")]
    Antipodal { distance: f64 },
    #[error("points coincide, direction undefined")]
    CoincidentPoints,
    #[error("comparison argument 2*alpha*r = {argument} must stay below pi")]
    ComparisonDomain { argument: f64 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Euclidean,
    Sphere,
    Hyperbolic,
}

impl SpaceKind {
    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::Euclidean => "euclidean",
            SpaceKind::Sphere => "sphere",
            SpaceKind::Hyperbolic => "hyperbolic",
        }
    }
}

/// One of the three unit-curvature model geometries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpace {
    kind: SpaceKind,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point(DVector<f64>);

impl Point {
    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: Point,
    vec: DVector<f64>,
}

impl TangentVector {
    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn vec(&self) -> &DVector<f64> {
        &self.vec
    }

    pub fn scaled(&self, factor: f64) -> TangentVector {
        TangentVector {
            base: self.base.clone(),
            vec: &self.vec * factor,
        }
    }

    pub fn scale_mut(&mut self, factor: f64) {
        self.vec *= factor;
    }

    pub fn into_parts(self) -> (Point, DVector<f64>) {
        (self.base, self.vec)
    }
}

/// The factors `2αr·cot(2αr)` and `β·coth(2βr)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComparisonCoefficients {
    pub cot_term: f64,
    pub coth_term: f64,
}

/// `x·cot(x)` with a series near zero.
pub fn x_cot_x(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        1.0 - x * x / 3.0
    } else {
        x / x.tan()
    }
}

/// `x·coth(x)` with a series near zero.
pub fn x_coth_x(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        1.0 + x * x / 3.0
    } else {
        x / x.tanh()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn minkowski(a: &[f64], b: &[f64]) -> f64 {
    -a[0] * b[0] + dot(&a[1..], &b[1..])
}

impl ModelSpace {
    pub fn new(kind: SpaceKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(GeometryError::ZeroDimension);
        }
        Ok(ModelSpace { kind, dim })
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::new(SpaceKind::Euclidean, dim).expect("positive dimension")
    }

    pub fn sphere(dim: usize) -> Self {
        Self::new(SpaceKind::Sphere, dim).expect("positive dimension")
    }

    pub fn hyperbolic(dim: usize) -> Self {
        Self::new(SpaceKind::Hyperbolic, dim).expect("positive dimension")
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ambient_dim(&self) -> usize {
        match self.kind {
            SpaceKind::Euclidean => self.dim,
            SpaceKind::Sphere | SpaceKind::Hyperbolic => self.dim + 1,
        }
    }

    /// Square root of the sectional curvature upper bound.
    pub fn alpha(&self) -> f64 {
        match self.kind {
            SpaceKind::Sphere => 1.0,
            _ => 0.0,
        }
    }

    /// Square root of minus the sectional curvature lower bound.
    pub fn beta(&self) -> f64 {
        match self.kind {
            SpaceKind::Hyperbolic => 1.0,
            _ => 0.0,
        }
    }

    pub fn injectivity_radius(&self) -> f64 {
        match self.kind {
            SpaceKind::Sphere => PI,
            _ => f64::INFINITY,
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let expected = self.ambient_dim();
        if len != expected {
            return Err(GeometryError::DimensionMismatch { expected, got: len });
        }
        Ok(())
    }

    /// Metric inner product of two ambient vectors (Minkowski on the hyperboloid).
    fn ambient_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.kind {
            SpaceKind::Hyperbolic => minkowski(a, b),
            _ => dot(a, b),
        }
    }

    fn constraint_residual(&self, x: &[f64]) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => 0.0,
            SpaceKind::Sphere => (dot(x, x) - 1.0).abs(),
            SpaceKind::Hyperbolic => {
                if x[0] <= 0.0 {
                    f64::INFINITY
                } else {
                    // Relative to the coordinate scale: rounding grows with x0².
                    (minkowski(x, x) + 1.0).abs() / dot(x, x).max(1.0)
                }
            }
        }
    }

    fn project_in_place(&self, x: &mut DVector<f64>) {
        match self.kind {
            SpaceKind::Euclidean => {}
            SpaceKind::Sphere => {
                let n = x.norm();
                *x /= n;
            }
            SpaceKind::Hyperbolic => {
                let spatial: f64 = x.iter().skip(1).map(|v| v * v).sum();
                x[0] = (1.0 + spatial).sqrt();
            }
        }
    }

    /// Validates coordinates against the embedding constraint and snaps them
    /// onto it exactly.
    pub fn point(&self, coords: Vec<f64>) -> Result<Point> {
        self.check_len(coords.len())?;
        let residual = self.constraint_residual(&coords);
        if !(residual <= POINT_TOLERANCE) || coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NotOnManifold { residual });
        }
        let mut v = DVector::from_vec(coords);
        self.project_in_place(&mut v);
        Ok(Point(v))
    }

    /// Builds a point by projecting arbitrary ambient coordinates onto the
    /// manifold (normalisation on the sphere, lifting on the hyperboloid).
    pub fn project_point(&self, coords: Vec<f64>) -> Result<Point> {
        self.check_len(coords.len())?;
        let mut v = DVector::from_vec(coords);
        if self.kind == SpaceKind::Sphere && v.norm() == 0.0 {
            return Err(GeometryError::NotOnManifold { residual: 1.0 });
        }
        self.project_in_place(&mut v);
        Ok(Point(v))
    }

    /// The distinguished point: origin, north pole `(0,..,0,1)`, or `(1,0,..,0)`.
    pub fn origin(&self) -> Point {
        let mut v = DVector::zeros(self.ambient_dim());
        match self.kind {
            SpaceKind::Euclidean => {}
            SpaceKind::Sphere => v[self.dim] = 1.0,
            SpaceKind::Hyperbolic => v[0] = 1.0,
        }
        Point(v)
    }

    pub fn tangent(&self, base: &Point, vec: Vec<f64>) -> Result<TangentVector> {
        self.check_len(base.len())?;
        self.check_len(vec.len())?;
        let residual = match self.kind {
            SpaceKind::Euclidean => 0.0,
            _ => self.ambient_inner(&vec, base.as_slice()).abs(),
        };
        if !(residual <= TANGENT_TOLERANCE) {
            return Err(GeometryError::NotTangent { residual });
        }
        Ok(self.project_tangent(base, DVector::from_vec(vec)))
    }

    /// Orthogonal projection of an ambient vector onto `T_base M`.
    pub fn project_tangent(&self, base: &Point, mut vec: DVector<f64>) -> TangentVector {
        let x = base.as_slice();
        match self.kind {
            SpaceKind::Euclidean => {}
            SpaceKind::Sphere => {
                let c = dot(vec.as_slice(), x);
                vec.axpy(-c, &base.0, 1.0);
            }
            SpaceKind::Hyperbolic => {
                let c = minkowski(vec.as_slice(), x);
                vec.axpy(c, &base.0, 1.0);
            }
        }
        TangentVector {
            base: base.clone(),
            vec,
        }
    }

    pub fn zero_tangent(&self, base: &Point) -> TangentVector {
        TangentVector {
            base: base.clone(),
            vec: DVector::zeros(base.len()),
        }
    }

    pub fn inner(&self, u: &TangentVector, v: &TangentVector) -> f64 {
        self.ambient_inner(u.vec.as_slice(), v.vec.as_slice())
    }

    pub fn norm(&self, v: &TangentVector) -> f64 {
        self.inner(v, v).max(0.0).sqrt()
    }

    pub fn distance(&self, x: &Point, y: &Point) -> Result<f64> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        let (a, b) = (x.as_slice(), y.as_slice());
        Ok(match self.kind {
            SpaceKind::Euclidean => (&x.0 - &y.0).norm(),
            SpaceKind::Sphere => {
                // Chord form of arccos(<x,y>), accurate at both ends of [0, π].
                let (mut diff, mut sum) = (0.0, 0.0);
                for (u, v) in a.iter().zip(b) {
                    diff += (u - v) * (u - v);
                    sum += (u + v) * (u + v);
                }
                2.0 * diff.sqrt().atan2(sum.sqrt())
            }
            SpaceKind::Hyperbolic => {
                // <x-y, x-y>_M = 2(cosh ρ - 1) = 4 sinh²(ρ/2).
                let d0 = a[0] - b[0];
                let q: f64 = -d0 * d0 + a[1..].iter().zip(&b[1..]).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
                2.0 * (q.max(0.0).sqrt() / 2.0).asinh()
            }
        })
    }

    pub fn exp_map(&self, v: &TangentVector) -> Result<Point> {
        self.check_len(v.base.len())?;
        self.check_len(v.vec.len())?;
        let norm = self.norm(v);
        let inj = self.injectivity_radius();
        if norm >= inj {
            return Err(GeometryError::BeyondInjectivity { norm, limit: inj });
        }
        if norm == 0.0 {
            return Ok(v.base.clone());
        }
        let mut out = match self.kind {
            SpaceKind::Euclidean => &v.base.0 + &v.vec,
            SpaceKind::Sphere => {
                let mut out = &v.base.0 * norm.cos();
                out.axpy(norm.sin() / norm, &v.vec, 1.0);
                out
            }
            SpaceKind::Hyperbolic => {
                let mut out = &v.base.0 * norm.cosh();
                out.axpy(norm.sinh() / norm, &v.vec, 1.0);
                out
            }
        };
        self.project_in_place(&mut out);
        Ok(Point(out))
    }

    pub fn log_map(&self, x: &Point, y: &Point) -> Result<TangentVector> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        let vec = match self.kind {
            SpaceKind::Euclidean => &y.0 - &x.0,
            SpaceKind::Sphere => {
                let c = dot(x.as_slice(), y.as_slice());
                let mut w = &y.0 - &x.0 * c;
                let s = w.norm();
                let theta = s.atan2(c);
                if theta > PI - ANTIPODAL_TOLERANCE {
                    return Err(GeometryError::Antipodal { distance: theta });
                }
                if s == 0.0 {
                    return Ok(self.zero_tangent(x));
                }
                w *= theta / s;
                w
            }
            SpaceKind::Hyperbolic => {
                let c = -minkowski(x.as_slice(), y.as_slice());
                let w = &y.0 - &x.0 * c;
                let rho = self.distance(x, y)?;
                if rho == 0.0 {
                    return Ok(self.zero_tangent(x));
                }
                w * (1.0 / x_sinh_over_x(rho))
            }
        };
        Ok(self.project_tangent(x, vec))
    }

    /// `log_map(x, y) / ρ(x, y)`.
    pub fn unit_direction(&self, x: &Point, y: &Point) -> Result<TangentVector> {
        let rho = self.distance(x, y)?;
        if rho <= COINCIDENCE_TOLERANCE {
            return Err(GeometryError::CoincidentPoints);
        }
        let v = self.log_map(x, y)?;
        let n = self.norm(&v);
        Ok(v.scaled(1.0 / n))
    }

    /// Deterministic orthonormal basis of `T_x M`: ambient axes projected onto
    /// the tangent space and Gram–Schmidt orthonormalised, skipping axes that
    /// become degenerate.
    pub fn orthonormal_basis(&self, x: &Point) -> Vec<TangentVector> {
        let n = self.ambient_dim();
        let mut basis: Vec<TangentVector> = Vec::with_capacity(self.dim);
        for axis in 0..n {
            if basis.len() == self.dim {
                break;
            }
            let mut e = DVector::zeros(n);
            e[axis] = 1.0;
            let mut v = self.project_tangent(x, e);
            let initial = self.norm(&v);
            if initial < 1e-12 {
                continue;
            }
            // Two passes of modified Gram–Schmidt.
            for _ in 0..2 {
                for b in &basis {
                    let c = self.inner(&v, b);
                    v.vec.axpy(-c, &b.vec, 1.0);
                }
            }
            let residual = self.norm(&v);
            if residual < 1e-6 * initial.max(1.0) {
                continue;
            }
            v.vec /= residual;
            basis.push(v);
        }
        debug_assert_eq!(basis.len(), self.dim);
        basis
    }

    /// Coordinates of `v` against an orthonormal basis at the same point.
    pub fn coordinates(&self, v: &TangentVector, basis: &[TangentVector]) -> DVector<f64> {
        DVector::from_iterator(basis.len(), basis.iter().map(|b| self.inner(v, b)))
    }

    /// Tangent vector with the given coordinates against `basis`.
    pub fn from_coordinates(&self, base: &Point, coords: &[f64], basis: &[TangentVector]) -> TangentVector {
        let mut vec = DVector::zeros(base.len());
        for (c, b) in coords.iter().zip(basis) {
            vec.axpy(*c, &b.vec, 1.0);
        }
        TangentVector {
            base: base.clone(),
            vec,
        }
    }

    /// `ρ·ct_κ(ρ)`: 1 in flat space, `ρ cot ρ` on the sphere, `ρ coth ρ` on
    /// the hyperboloid.
    pub fn rho_ct(&self, rho: f64) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => 1.0,
            SpaceKind::Sphere => x_cot_x(rho),
            SpaceKind::Hyperbolic => x_coth_x(rho),
        }
    }

    pub fn comparison_coefficients(&self, r: f64) -> Result<ComparisonCoefficients> {
        let (alpha, beta) = (self.alpha(), self.beta());
        let argument = 2.0 * alpha * r;
        if argument >= PI {
            return Err(GeometryError::ComparisonDomain { argument });
        }
        let cot_term = if alpha == 0.0 { 1.0 } else { x_cot_x(argument) };
        let y = 2.0 * beta * r;
        let coth_term = if beta == 0.0 {
            1.0 / (2.0 * r)
        } else {
            x_coth_x(y) / (2.0 * r)
        };
        Ok(ComparisonCoefficients { cot_term, coth_term })
    }
}

/// `sinh(x)/x` with a series near zero.
fn x_sinh_over_x(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        1.0 + x * x / 6.0
    } else {
        x.sinh() / x
    }
}
