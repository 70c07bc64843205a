//! Fluctuations of the stochastic algorithm around the p-mean: the rescaled
//! chain, the matrices `Γ` and `∇dH_p(e_p)`, the limiting Gaussian diffusion
//! (exact sampler, SDE integrator, closed-form covariance) and the Monte
//! Carlo comparison between the two.
//!
//! Limit-process quantities live in the eigenbasis of the Hessian.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{GeometryError, ModelSpace, Point, TangentVector, COINCIDENCE_TOLERANCE};
use crate::measure::{AlgoConstants, BallContext, DiscreteMeasure, GrowthSource, MeasureError};
use crate::rng::{derive_stream, RngStream, LIMIT_SAMPLER_STREAM, SDE_STREAM};
use crate::solver::{
    default_start, hessian_objective, oracle_mean, Chain, ChainTrace, OracleOptions, OracleResult, SolverError,
    StepSchedule,
};

pub const SYMMETRY_TOLERANCE: f64 = 1e-8;
pub const PSD_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_SDE_STEP: f64 = 1e-4;
/// Pass threshold on |z| for every reported statistic.
pub const Z_THRESHOLD: f64 = 4.0;

#[derive(Debug, Error)]
pub enum FluctuationError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(
        "regularity hypothesis violated: the p-mean coincides with support point {index} \
         (distance {distance:e}) and p = {p} < 2"
    )]
    MeanOnSupport { index: usize, distance: f64, p: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("gamma is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix dimensions disagree: {0}")]
    Shape(String),
    #[error(
        "limit process inadmissible: delta * lambda_min = {product} must exceed 1 \
         (delta = {delta}, lambda_min = {lambda_min})"
    )]
    Inadmissible { delta: f64, lambda_min: f64, product: f64 },
    #[error("step-size condition violated: {condition} fails with delta = {delta}, constant = {constant}")]
    DeltaCondition {
        condition: &'static str,
        delta: f64,
        constant: f64,
    },
    #[error("time grid: {0}")]
    Grid(String),
    #[error("trace holds {available} steps but time {t} needs step {needed}")]
    TraceTooShort { t: f64, needed: u64, available: usize },
}

pub type Result<T> = std::result::Result<T, FluctuationError>;

/// Values of a `d`-dimensional process on a time grid (one row per time).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPath {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(FluctuationError::Grid("empty grid".into()));
    }
    if !(grid[0] > 0.0) || !grid.iter().all(|t| t.is_finite()) {
        return Err(FluctuationError::Grid(format!(
            "times must be positive and finite, got {grid:?}"
        )));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FluctuationError::Grid(format!(
            "times must be strictly increasing, got {grid:?}"
        )));
    }
    Ok(())
}

/// Chain index `⌊n t⌋` observed at time `t`.
pub fn chain_index(n: u64, t: f64) -> u64 {
    (n as f64 * t).floor() as u64
}

/// `Y_k^n = (k/√n)·exp_{e_p}^{-1} X_k` in the coordinates of `basis`.
pub fn rescale_state(
    space: &ModelSpace,
    x: &Point,
    e_p: &Point,
    k: u64,
    n: u64,
    basis: &[TangentVector],
) -> Result<DVector<f64>> {
    let v = space.log_map(e_p, x)?;
    Ok(space.coordinates(&v, basis) * (k as f64 / (n as f64).sqrt()))
}

/// The rescaled chain `Y^n` sampled at each time of `times`.
pub fn rescale_chain(
    space: &ModelSpace,
    trace: &ChainTrace,
    e_p: &Point,
    n: u64,
    times: &[f64],
    basis: &[TangentVector],
) -> Result<GaussianPath> {
    check_grid(times)?;
    let mut values = DMatrix::zeros(times.len(), basis.len());
    for (row, &t) in times.iter().enumerate() {
        let k = chain_index(n, t);
        let x = trace.states.get(k as usize).ok_or(FluctuationError::TraceTooShort {
            t,
            needed: k,
            available: trace.len(),
        })?;
        let y = rescale_state(space, x, e_p, k, n, basis)?;
        values.row_mut(row).copy_from(&y.transpose());
    }
    Ok(GaussianPath {
        grid: times.to_vec(),
        values,
    })
}

fn check_regular(measure: &DiscreteMeasure, e_p: &Point, p: f64) -> Result<Vec<f64>> {
    let space = measure.space();
    let dists = measure
        .points()
        .iter()
        .map(|y| space.distance(e_p, y))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    if p < 2.0 {
        if let Some((index, &distance)) = dists.iter().enumerate().find(|(_, &d)| d <= COINCIDENCE_TOLERANCE) {
            return Err(FluctuationError::MeanOnSupport { index, distance, p });
        }
    }
    Ok(dists)
}

/// `Γ = Σ_i w_i g_i g_iᵀ` with `g_i` the coordinates of `grad_{e_p} ρ^p(·, x_i)`.
pub fn gamma_matrix(measure: &DiscreteMeasure, e_p: &Point, p: f64, basis: &[TangentVector]) -> Result<DMatrix<f64>> {
    check_regular(measure, e_p, p)?;
    let space = measure.space();
    let d = basis.len();
    let mut gamma = DMatrix::zeros(d, d);
    for (y, w) in measure.points().iter().zip(measure.weights()) {
        let g = space.coordinates(&crate::solver::grad_f(&space, e_p, y, p)?, basis);
        gamma.ger(*w, &g, &g, 1.0);
    }
    Ok(gamma)
}

/// Hessian of `H_p` at `x` in the coordinates of `basis` (see
/// [`hessian_objective`]); requires `x` off the support when `p < 2`.
pub fn hessian_h(measure: &DiscreteMeasure, x: &Point, p: f64, basis: &[TangentVector]) -> Result<DMatrix<f64>> {
    check_regular(measure, x, p)?;
    let hess = hessian_objective(&measure.space(), measure, x, p, basis)?;
    Ok(hess.expect("regularity checked above"))
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).abs().max()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenpairs sorted by ascending eigenvalue, each eigenvector signed so
/// that its first non-negligible component is positive.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut vectors = DMatrix::zeros(m.nrows(), m.nrows());
    for (col, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        if let Some(&first) = v.iter().find(|c| c.abs() > 1e-12) {
            if first < 0.0 {
                v.neg_mut();
            }
        }
        vectors.set_column(col, &v);
    }
    (order.iter().map(|&i| eig.eigenvalues[i]).collect(), vectors)
}

/// A factor `L` with `L Lᵀ = m` for a symmetric PSD matrix: Cholesky when
/// `m` is positive definite, otherwise the symmetric square root with
/// negative roundoff eigenvalues clamped to zero (so `m = 0` gives `L = 0`).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    psd_sqrt(m)
}

/// Symmetric square root of a PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `(δ, Γ, ∇dH_p(e_p))` with the Hessian's eigen-decomposition.
#[derive(Debug, Clone)]
pub struct LimitSpec {
    delta: f64,
    gamma: DMatrix<f64>,
    hessian: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    sigma: DMatrix<f64>,
    gamma_tilde: DMatrix<f64>,
    admissible: bool,
}

impl LimitSpec {
    pub fn new(delta: f64, gamma: DMatrix<f64>, hessian: DMatrix<f64>) -> Result<Self> {
        let d = hessian.nrows();
        if hessian.ncols() != d || gamma.shape() != (d, d) || d == 0 {
            return Err(FluctuationError::Shape(format!(
                "gamma {:?}, hessian {:?}",
                gamma.shape(),
                hessian.shape()
            )));
        }
        if !(delta > 0.0) {
            return Err(FluctuationError::Grid(format!("delta = {delta} must be positive")));
        }
        for m in [&gamma, &hessian] {
            let asymmetry = max_asymmetry(m);
            if !(asymmetry <= SYMMETRY_TOLERANCE) {
                return Err(FluctuationError::NotSymmetric { asymmetry });
            }
        }
        let gamma = symmetrize(&gamma);
        let hessian = symmetrize(&hessian);
        let (gamma_eigs, _) = sorted_eigen(&gamma);
        if gamma_eigs[0] < -PSD_TOLERANCE {
            return Err(FluctuationError::NotPsd {
                min_eigenvalue: gamma_eigs[0],
            });
        }
        let (eigenvalues, eigenvectors) = sorted_eigen(&hessian);
        let sigma = psd_sqrt(&gamma);
        let gamma_tilde = symmetrize(&(eigenvectors.transpose() * &gamma * &eigenvectors));
        let admissible = eigenvalues.iter().all(|l| delta * l > 1.0);
        Ok(LimitSpec {
            delta,
            gamma,
            hessian,
            eigenvalues,
            eigenvectors,
            sigma,
            gamma_tilde,
            admissible,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Columns are the eigenvectors `e_i`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Symmetric square root of `Γ`.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `Eᵀ Γ E`.
    pub fn gamma_tilde(&self) -> &DMatrix<f64> {
        &self.gamma_tilde
    }

    /// Whether `δ λ_i > 1` for every eigenvalue.
    pub fn is_admissible(&self) -> bool {
        self.admissible
    }

    pub fn require_admissible(&self) -> Result<()> {
        if self.admissible {
            Ok(())
        } else {
            let lambda_min = self.eigenvalues[0];
            Err(FluctuationError::Inadmissible {
                delta: self.delta,
                lambda_min,
                product: self.delta * lambda_min,
            })
        }
    }

    /// Coordinates of a vector given in the original basis, in the eigenbasis.
    pub fn to_eigen(&self, v: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.transpose() * v
    }

    fn exponent(&self, i: usize, j: usize) -> f64 {
        self.delta * (self.eigenvalues[i] + self.eigenvalues[j]) - 1.0
    }

    /// Covariance of the martingale increments `M(u) − M(l)`:
    /// `δ²Γ̃_ij (u^c − l^c)/c` with `c = δ(λ_i+λ_j) − 1`.
    fn increment_covariance(&self, l: f64, u: f64) -> DMatrix<f64> {
        let d = self.dim();
        let d2 = self.delta * self.delta;
        DMatrix::from_fn(d, d, |i, j| {
            let c = self.exponent(i, j);
            let lc = if l == 0.0 { 0.0 } else { l.powf(c) };
            d2 * self.gamma_tilde[(i, j)] * (u.powf(c) - lc) / c
        })
    }
}

/// `Cov(y_i(t1), y_j(t2))` in the eigenbasis:
/// `δ²Γ̃_ij/(δ(λ_i+λ_j)−1) · t1^{1−δλ_i} t2^{1−δλ_j} (t1∧t2)^{δ(λ_i+λ_j)−1}`.
pub fn limit_covariance(spec: &LimitSpec, t1: f64, t2: f64) -> Result<DMatrix<f64>> {
    spec.require_admissible()?;
    if !(t1 > 0.0 && t2 > 0.0) {
        return Err(FluctuationError::Grid(format!(
            "times must be positive, got ({t1}, {t2})"
        )));
    }
    let d = spec.dim();
    let dl = |i: usize| spec.delta * spec.eigenvalues[i];
    let m = t1.min(t2);
    let d2 = spec.delta * spec.delta;
    Ok(DMatrix::from_fn(d, d, |i, j| {
        let c = spec.exponent(i, j);
        d2 * spec.gamma_tilde[(i, j)] / c * t1.powf(1.0 - dl(i)) * t2.powf(1.0 - dl(j)) * m.powf(c)
    }))
}

/// Exact-in-law sampler for `y_δ` on a fixed grid.
#[derive(Debug, Clone)]
pub struct ExactSampler {
    grid: Vec<f64>,
    /// Factor of the increment covariance over `(t_{j−1}, t_j]`, `t_0 = 0`.
    factors: Vec<DMatrix<f64>>,
    /// `t_j^{1−δλ_i}`, one row per grid time.
    scales: DMatrix<f64>,
}

impl ExactSampler {
    pub fn new(spec: &LimitSpec, grid: &[f64]) -> Result<Self> {
        spec.require_admissible()?;
        check_grid(grid)?;
        let d = spec.dim();
        let mut factors = Vec::with_capacity(grid.len());
        let mut lower = 0.0;
        for &u in grid {
            factors.push(psd_factor(&spec.increment_covariance(lower, u)));
            lower = u;
        }
        let scales = DMatrix::from_fn(grid.len(), d, |r, i| {
            grid[r].powf(1.0 - spec.delta * spec.eigenvalues[i])
        });
        Ok(ExactSampler {
            grid: grid.to_vec(),
            factors,
            scales,
        })
    }

    pub fn sample(&self, rng: &mut RngStream) -> GaussianPath {
        let d = self.scales.ncols();
        let mut m = DVector::zeros(d);
        let mut z = DVector::zeros(d);
        let mut values = DMatrix::zeros(self.grid.len(), d);
        for (row, factor) in self.factors.iter().enumerate() {
            rng.fill_normal(z.as_mut_slice());
            m.gemv(1.0, factor, &z, 1.0);
            for i in 0..d {
                values[(row, i)] = self.scales[(row, i)] * m[i];
            }
        }
        GaussianPath {
            grid: self.grid.clone(),
            values,
        }
    }
}

/// One exactly sampled path of `y_δ` on `grid` (eigen-coordinates).
pub fn sample_limit_exact(spec: &LimitSpec, grid: &[f64], rng: &mut RngStream) -> Result<GaussianPath> {
    Ok(ExactSampler::new(spec, grid)?.sample(rng))
}

/// `paths` exact samples; path `i` uses stream `LIMIT_SAMPLER_STREAM + i`.
pub fn sample_limit_paths(spec: &LimitSpec, grid: &[f64], paths: usize, seed: u64) -> Result<Vec<GaussianPath>> {
    let sampler = ExactSampler::new(spec, grid)?;
    Ok((0..paths)
        .into_par_iter()
        .map(|i| sampler.sample(&mut derive_stream(seed, LIMIT_SAMPLER_STREAM + i as u64)))
        .collect())
}

/// Euler–Maruyama for `dy = t⁻¹(y − δ·H y)dt + δσ dB` in eigen-coordinates,
/// started at `(eps, y_eps)`. The last step before each grid time is
/// shortened so the grid is hit exactly.
pub fn integrate_sde(
    spec: &LimitSpec,
    eps: f64,
    grid: &[f64],
    y_eps: &DVector<f64>,
    dt: f64,
    rng: &mut RngStream,
) -> Result<GaussianPath> {
    check_grid(grid)?;
    if !(eps > 0.0 && eps <= grid[0]) {
        return Err(FluctuationError::Grid(format!(
            "start time {eps} must lie in (0, {}]",
            grid[0]
        )));
    }
    if !(dt > 0.0 && dt <= 1e-3) {
        return Err(FluctuationError::Grid(format!(
            "step {dt} must be positive and at most 1e-3"
        )));
    }
    let d = spec.dim();
    if y_eps.len() != d {
        return Err(FluctuationError::Shape(format!(
            "initial value has length {}, expected {d}",
            y_eps.len()
        )));
    }
    let drift: Vec<f64> = spec.eigenvalues.iter().map(|l| 1.0 - spec.delta * l).collect();
    // Diffusion δσ rotated into the eigenbasis.
    let diffusion = spec.eigenvectors.transpose() * &spec.sigma * spec.delta;
    let mut y = y_eps.clone();
    let mut t = eps;
    let mut z = DVector::zeros(d);
    let mut values = DMatrix::zeros(grid.len(), d);
    for (row, &target) in grid.iter().enumerate() {
        while t < target {
            let h = dt.min(target - t);
            if h <= 1e-14 * target {
                t = target;
                break;
            }
            rng.fill_normal(z.as_mut_slice());
            let sqrt_h = h.sqrt();
            let noise = &diffusion * &z;
            for i in 0..d {
                y[i] += drift[i] / t * y[i] * h + noise[i] * sqrt_h;
            }
            t += h;
        }
        values.row_mut(row).copy_from(&y.transpose());
    }
    Ok(GaussianPath {
        grid: grid.to_vec(),
        values,
    })
}

/// SDE paths started at `eps` (default `grid[0]/10`) from the exact marginal
/// there; path `i` uses stream `SDE_STREAM + i`.
pub fn sample_sde_paths(
    spec: &LimitSpec,
    grid: &[f64],
    paths: usize,
    seed: u64,
    dt: f64,
    eps: Option<f64>,
) -> Result<Vec<GaussianPath>> {
    check_grid(grid)?;
    let eps = eps.unwrap_or(grid[0] / 10.0);
    let start = psd_factor(&limit_covariance(spec, eps, eps)?);
    (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_stream(seed, SDE_STREAM + i as u64);
            let mut z = DVector::zeros(spec.dim());
            rng.fill_normal(z.as_mut_slice());
            let y0 = &start * z;
            integrate_sde(spec, eps, grid, &y0, dt, &mut rng)
        })
        .collect()
}

/// Sample covariance of `a` and `b` and its delta-method standard error.
pub fn covariance_with_stderr(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n = a.len();
    if n < 2 {
        return (0.0, f64::INFINITY);
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let cov = prods.iter().sum::<f64>() / (nf - 1.0);
    let mp = prods.iter().sum::<f64>() / nf;
    let var = prods.iter().map(|z| (z - mp).powi(2)).sum::<f64>() / (nf - 1.0);
    (cov, (var / nf).sqrt())
}

fn zscore(empirical: f64, theoretical: f64, stderr: f64) -> f64 {
    if stderr.is_infinite() {
        return 0.0;
    }
    let diff = empirical - theoretical;
    if stderr == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY.copysign(diff) };
    }
    diff / stderr
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CovarianceEntry {
    pub t1: f64,
    pub t2: f64,
    pub i: usize,
    pub j: usize,
    pub empirical: f64,
    pub theoretical: f64,
    pub stderr: f64,
    pub zscore: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanEntry {
    pub t: f64,
    pub i: usize,
    pub empirical: f64,
    pub stderr: f64,
    pub zscore: f64,
}

/// Compares sampled paths (eigen-coordinates) against `limit_covariance`.
#[derive(Debug, Clone, Serialize)]
pub struct PathComparison {
    pub covariance: Vec<CovarianceEntry>,
    pub means: Vec<MeanEntry>,
    pub max_abs_z: f64,
    pub max_abs_mean_z: f64,
}

impl PathComparison {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_abs_z <= threshold && self.max_abs_mean_z <= threshold
    }
}

/// Every time pair `t_a ≤ t_b` of the grid: all `(i, j)` when `a < b`,
/// `i ≤ j` when `a = b`.
pub fn compare_paths(spec: &LimitSpec, paths: &[GaussianPath]) -> Result<PathComparison> {
    let grid = &paths
        .first()
        .ok_or_else(|| FluctuationError::Grid("no paths".into()))?
        .grid;
    let d = spec.dim();
    let column = |row: usize, i: usize| -> Vec<f64> { paths.iter().map(|p| p.values[(row, i)]).collect() };
    let mut covariance = Vec::new();
    for a in 0..grid.len() {
        for b in a..grid.len() {
            let theory = limit_covariance(spec, grid[a], grid[b])?;
            for i in 0..d {
                let first_j = if a == b { i } else { 0 };
                for j in first_j..d {
                    let (empirical, stderr) = covariance_with_stderr(&column(a, i), &column(b, j));
                    let theoretical = theory[(i, j)];
                    covariance.push(CovarianceEntry {
                        t1: grid[a],
                        t2: grid[b],
                        i,
                        j,
                        empirical,
                        theoretical,
                        stderr,
                        zscore: zscore(empirical, theoretical, stderr),
                    });
                }
            }
        }
    }
    let mut means = Vec::new();
    for (row, &t) in grid.iter().enumerate() {
        for i in 0..d {
            let (empirical, stderr) = crate::solver::mean_and_stderr(&column(row, i));
            means.push(MeanEntry {
                t,
                i,
                empirical,
                stderr,
                zscore: zscore(empirical, 0.0, stderr),
            });
        }
    }
    let max_abs = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, |m, z| m.max(z.abs()));
    Ok(PathComparison {
        max_abs_z: max_abs(&mut covariance.iter().map(|e| e.zscore)),
        max_abs_mean_z: max_abs(&mut means.iter().map(|e| e.zscore)),
        covariance,
        means,
    })
}

#[derive(Debug, Clone)]
pub struct FluctuationOptions {
    pub delta: f64,
    pub n: u64,
    pub chains: usize,
    pub times: Vec<f64>,
    pub seed: u64,
    pub oracle: OracleOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaCondition {
    /// `δ·C_{p,μ,K} > 1` with the closed-form constant.
    ExplicitGrowth,
    /// `δ·λ_min > 1` with the Hessian proxy for the constant.
    HessianProxy,
}

impl DeltaCondition {
    pub fn label(self) -> &'static str {
        match self {
            DeltaCondition::ExplicitGrowth => "delta * C_growth > 1 (explicit constant)",
            DeltaCondition::HessianProxy => "delta * lambda_min > 1 (Hessian proxy)",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FluctuationReport {
    pub oracle: OracleResult,
    pub constants: AlgoConstants,
    pub spec: LimitSpec,
    pub delta_condition: DeltaCondition,
    pub n: u64,
    pub chains: usize,
    pub times: Vec<f64>,
    pub comparison: PathComparison,
    pub pass: bool,
    pub insufficient_sample: bool,
}

impl FluctuationReport {
    pub fn max_abs_z(&self) -> f64 {
        self.comparison.max_abs_z
    }
}

/// Limit specification at the oracle p-mean, along with the constants.
pub fn limit_spec_for(
    measure: &DiscreteMeasure,
    ctx: &BallContext,
    e_p: &Point,
    delta: f64,
) -> Result<(LimitSpec, AlgoConstants, Vec<TangentVector>)> {
    let space = measure.space();
    let basis = space.orthonormal_basis(e_p);
    let gamma = gamma_matrix(measure, e_p, ctx.p, &basis)?;
    let hessian = hessian_h(measure, e_p, ctx.p, &basis)?;
    let spec = LimitSpec::new(delta, gamma, hessian)?;
    let constants = AlgoConstants::new(ctx, &space, Some(spec.eigenvalues()[0]))?;
    Ok((spec, constants, basis))
}

/// Runs independent chains with `t_k = min(δ/k, δ₁)` and compares the
/// rescaled chain at `times` against the limit diffusion.
pub fn fluctuation_experiment(
    measure: &DiscreteMeasure,
    ctx: &BallContext,
    opts: &FluctuationOptions,
) -> Result<FluctuationReport> {
    check_grid(&opts.times)?;
    if opts.chains == 0 || opts.n == 0 {
        return Err(FluctuationError::Grid("chains and n must be positive".into()));
    }
    let space = measure.space();
    let oracle = oracle_mean(measure, ctx, opts.oracle)?;
    let (spec, constants, basis) = limit_spec_for(measure, ctx, &oracle.e_p, opts.delta)?;
    let delta_condition = match constants.growth_source {
        GrowthSource::Explicit => DeltaCondition::ExplicitGrowth,
        GrowthSource::HessianProxy => DeltaCondition::HessianProxy,
    };
    if !(opts.delta * constants.c_growth > 1.0) {
        return Err(FluctuationError::DeltaCondition {
            condition: delta_condition.label(),
            delta: opts.delta,
            constant: constants.c_growth,
        });
    }
    spec.require_admissible()?;

    let schedule = StepSchedule::harmonic(opts.delta, constants.delta1)?;
    let x0 = default_start(&space, measure, ctx.p)?;
    let indices: Vec<u64> = opts.times.iter().map(|&t| chain_index(opts.n, t)).collect();
    let paths = (0..opts.chains)
        .into_par_iter()
        .map(|c| -> Result<GaussianPath> {
            let mut chain = Chain::new(measure, ctx, &schedule, x0.clone(), derive_stream(opts.seed, c as u64))?;
            let mut values = DMatrix::zeros(indices.len(), spec.dim());
            for (row, &k) in indices.iter().enumerate() {
                chain.advance_to(k)?;
                let y = rescale_state(&space, chain.state(), &oracle.e_p, k, opts.n, &basis)?;
                values.row_mut(row).copy_from(&spec.to_eigen(&y).transpose());
            }
            Ok(GaussianPath {
                grid: opts.times.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let comparison = compare_paths(&spec, &paths)?;
    let insufficient_sample = opts.chains < 2;
    let pass = insufficient_sample || comparison.passes(Z_THRESHOLD);
    Ok(FluctuationReport {
        oracle,
        constants,
        spec,
        delta_condition,
        n: opts.n,
        chains: opts.chains,
        times: opts.times.clone(),
        comparison,
        pass,
        insufficient_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::validate_assumption1;
    use crate::solver::{grad_objective, run_chain};

    fn diag(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(values))
    }

    /// Hessian of `H_p` at `x` by central differences of `grad_H` along
    /// geodesics. At a critical point the transport correction vanishes, so
    /// `⟨grad H(exp(h u)), v⟩` can be differentiated directly.
    fn fd_hessian(measure: &DiscreteMeasure, p: f64, basis: &[TangentVector], h: f64) -> DMatrix<f64> {
        let space = measure.space();
        let d = basis.len();
        let mut out = DMatrix::zeros(d, d);
        for a in 0..d {
            let mut g = [DVector::zeros(d), DVector::zeros(d)];
            for (s, sign) in [1.0, -1.0].iter().enumerate() {
                let y = space.exp_map(&basis[a].scaled(sign * h)).unwrap();
                let grad = grad_objective(&space, measure, &y, p).unwrap();
                g[s] = DVector::from_iterator(d, basis.iter().map(|b| space.inner(&grad, b)));
            }
            out.set_column(a, &((&g[0] - &g[1]) / (2.0 * h)));
        }
        out
    }

    #[test]
    fn rescale_examples() {
        let e = ModelSpace::euclidean(2);
        let ep = e.point(vec![0.0, 0.0]).unwrap();
        let basis = e.orthonormal_basis(&ep);
        let x = e.point(vec![0.3, -0.4]).unwrap();
        let y = rescale_state(&e, &x, &ep, 4, 16, &basis).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-15 && (y[1] + 0.4).abs() < 1e-15);
        let y = rescale_state(&e, &x, &ep, 1, 1, &basis).unwrap();
        assert!((y.norm() - 0.5).abs() < 1e-15);
        let trace = ChainTrace {
            states: vec![ep.clone(); 5],
            steps_used: vec![0.1; 4],
            sampled: vec![0; 4],
            diagnostics: None,
        };
        let path = rescale_chain(&e, &trace, &ep, 2, &[0.5, 1.0, 2.0], &basis).unwrap();
        assert!(path.values.iter().all(|v| *v == 0.0));
        assert!(matches!(
            rescale_chain(&e, &trace, &ep, 2, &[3.0], &basis),
            Err(FluctuationError::TraceTooShort { .. })
        ));
    }

    #[test]
    fn gamma_line_example() {
        let e = ModelSpace::euclidean(1);
        let pts = vec![e.point(vec![-1.0]).unwrap(), e.point(vec![1.0]).unwrap()];
        let m = DiscreteMeasure::new(e, pts, None).unwrap();
        let ep = e.point(vec![0.0]).unwrap();
        let g = gamma_matrix(&m, &ep, 2.0, &e.orthonormal_basis(&ep)).unwrap();
        assert!((g[(0, 0)] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_euclidean_is_four_covariance() {
        let e = ModelSpace::euclidean(2);
        let raw = [[0.1, 0.2], [-0.3, 0.1], [0.2, -0.4], [0.0, 0.3]];
        let w = [0.1, 0.2, 0.3, 0.4];
        let pts = raw.iter().map(|p| e.point(p.to_vec()).unwrap()).collect();
        let m = DiscreteMeasure::new(e, pts, Some(w.to_vec())).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|c| raw.iter().zip(&w).map(|(p, w)| w * p[c]).sum())
            .collect();
        let ep = e.point(mean.clone()).unwrap();
        let g = gamma_matrix(&m, &ep, 2.0, &e.orthonormal_basis(&ep)).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let cov: f64 = raw
                    .iter()
                    .zip(&w)
                    .map(|(p, w)| w * (p[a] - mean[a]) * (p[b] - mean[b]))
                    .sum();
                assert!((g[(a, b)] - 4.0 * cov).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hessian_examples() {
        let e = ModelSpace::euclidean(2);
        let pts = vec![e.point(vec![1.0, 0.0]).unwrap(), e.point(vec![0.0, 2.0]).unwrap()];
        let m = DiscreteMeasure::new(e, pts, None).unwrap();
        let x = e.point(vec![0.2, 0.1]).unwrap();
        let basis = e.orthonormal_basis(&x);
        let h = hessian_h(&m, &x, 2.0, &basis).unwrap();
        assert!((h - diag(&[2.0, 2.0])).abs().max() < 1e-14);

        let single = DiscreteMeasure::new(
            e,
            vec![e.point(vec![3.0, 0.0]).unwrap(), e.point(vec![0.0, 0.0]).unwrap()],
            Some(vec![1.0 - 1e-15, 1e-15]),
        )
        .unwrap();
        let x = e.point(vec![0.0, 4.0]).unwrap();
        let h = hessian_h(&single, &x, 1.0, &basis).unwrap();
        // One point at distance 5 in direction n = (0.6, −0.8).
        let n = DVector::from_row_slice(&[0.6, -0.8]);
        let expected = (DMatrix::identity(2, 2) - &n * n.transpose()) / 5.0;
        assert!((h - expected).abs().max() < 1e-12);
    }

    #[test]
    fn hessian_on_support_cases() {
        let e = ModelSpace::euclidean(1);
        let pts = vec![e.point(vec![0.0]).unwrap(), e.point(vec![1.0]).unwrap()];
        let m = DiscreteMeasure::new(e, pts.clone(), None).unwrap();
        let basis = e.orthonormal_basis(&pts[0]);
        let h = hessian_h(&m, &pts[0], 2.0, &basis).unwrap();
        assert_eq!(h[(0, 0)], 2.0);
        let h = hessian_h(&m, &pts[0], 3.0, &basis).unwrap();
        assert!((h[(0, 0)] - 0.5 * 6.0).abs() < 1e-14);
        assert!(matches!(
            hessian_h(&m, &pts[0], 1.5, &basis),
            Err(FluctuationError::MeanOnSupport { index: 0, .. })
        ));
    }

    #[test]
    fn sphere_hessian_matches_finite_differences() {
        let s = ModelSpace::sphere(2);
        let pts = [(0.3, 0.0), (0.25, 2.1), (0.35, 4.0)]
            .iter()
            .map(|(th, ph): &(f64, f64)| {
                s.point(vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()])
                    .unwrap()
            })
            .collect();
        let m = DiscreteMeasure::new(s, pts, Some(vec![0.4, 0.35, 0.25])).unwrap();
        for p in [1.0, 1.5, 2.0, 3.0] {
            let ctx = validate_assumption1(&m, &s.origin(), 0.6, p).unwrap();
            let ep = oracle_mean(&m, &ctx, OracleOptions::default()).unwrap().e_p;
            let basis = s.orthonormal_basis(&ep);
            let h = hessian_h(&m, &ep, p, &basis).unwrap();
            let fd = fd_hessian(&m, p, &basis, 1e-4);
            let rel = (&h - &fd).abs().max() / h.abs().max();
            assert!(rel < 1e-5, "p = {p}: relative error {rel}");
        }
    }

    #[test]
    fn sorted_eigen_orders_and_signs() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 3.0]);
        let (vals, vecs) = sorted_eigen(&m);
        assert!((vals[0] - 2.0).abs() < 1e-12 && (vals[1] - 4.0).abs() < 1e-12);
        for c in 0..2 {
            assert!(vecs[(0, c)] > 0.0);
        }
        let rebuilt = &vecs * diag(&vals) * vecs.transpose();
        assert!((rebuilt - m).abs().max() < 1e-12);
    }

    #[test]
    fn limit_spec_rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(
            LimitSpec::new(1.0, DMatrix::identity(2, 2), asym),
            Err(FluctuationError::NotSymmetric { .. })
        ));
        assert!(matches!(
            LimitSpec::new(1.0, diag(&[1.0, -1e-6]), DMatrix::identity(2, 2)),
            Err(FluctuationError::NotPsd { .. })
        ));
        let spec = LimitSpec::new(0.5, diag(&[1.0, 1.0]), diag(&[2.0, 3.0])).unwrap();
        assert!(!spec.is_admissible());
        assert!(matches!(
            limit_covariance(&spec, 1.0, 1.0),
            Err(FluctuationError::Inadmissible { .. })
        ));
    }

    #[test]
    fn limit_covariance_examples() {
        // d = 1, Γ = 4σ², λ = 2 gives 4δ²σ²/(4δ − 1) at t = 1.
        let (delta, s2) = (1.3, 0.7);
        let spec = LimitSpec::new(delta, diag(&[4.0 * s2]), diag(&[2.0])).unwrap();
        let c = limit_covariance(&spec, 1.0, 1.0).unwrap()[(0, 0)];
        assert!((c - 4.0 * delta * delta * s2 / (4.0 * delta - 1.0)).abs() < 1e-14);

        let spec = LimitSpec::new(1.0, diag(&[1.0, 2.0]), diag(&[2.0, 3.0])).unwrap();
        for t in [0.25, 1.0, 3.0] {
            let c = limit_covariance(&spec, t, t).unwrap();
            assert!((c[(0, 0)] - t / 3.0).abs() < 1e-14);
            assert!((c[(1, 1)] - t * 2.0 / 5.0).abs() < 1e-14);
            assert_eq!(c[(0, 1)], 0.0);
        }
        let c = limit_covariance(&spec, 0.5, 2.0).unwrap();
        let ct = limit_covariance(&spec, 2.0, 0.5).unwrap();
        assert!((c - ct.transpose()).abs().max() < 1e-15);
    }

    #[test]
    fn exact_sampler_zero_gamma_is_zero() {
        let spec = LimitSpec::new(1.0, DMatrix::zeros(2, 2), diag(&[2.0, 3.0])).unwrap();
        let path = sample_limit_exact(&spec, &[0.5, 1.0], &mut derive_stream(0, 0)).unwrap();
        assert!(path.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sde_zero_noise_matches_ode() {
        let spec = LimitSpec::new(1.0, DMatrix::zeros(2, 2), diag(&[1.5, 2.0])).unwrap();
        let y0 = DVector::from_row_slice(&[1.0, -2.0]);
        let grid = [0.5, 1.0, 2.0];
        let path = integrate_sde(&spec, 0.2, &grid, &y0, 1e-4, &mut derive_stream(0, 0)).unwrap();
        for (row, &t) in grid.iter().enumerate() {
            for i in 0..2 {
                let exact = y0[i] * (t / 0.2f64).powf(1.0 - spec.eigenvalues()[i]);
                assert!(((path.values[(row, i)] - exact) / exact).abs() < 1e-3);
            }
        }
        let zero = integrate_sde(&spec, 0.2, &grid, &DVector::zeros(2), 1e-4, &mut derive_stream(0, 0)).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sde_rejects_bad_start() {
        let spec = LimitSpec::new(1.0, DMatrix::zeros(1, 1), diag(&[2.0])).unwrap();
        let y0 = DVector::zeros(1);
        assert!(integrate_sde(&spec, 0.6, &[0.5], &y0, 1e-4, &mut derive_stream(0, 0)).is_err());
        assert!(integrate_sde(&spec, 0.1, &[0.5], &y0, 1e-2, &mut derive_stream(0, 0)).is_err());
    }

    #[test]
    fn exact_sampler_matches_covariance() {
        let gamma = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
        let hess = DMatrix::from_row_slice(2, 2, &[2.5, 0.3, 0.3, 1.8]);
        let spec = LimitSpec::new(1.0, gamma, hess).unwrap();
        let paths = sample_limit_paths(&spec, &[0.5, 1.0], 20_000, 3).unwrap();
        let cmp = compare_paths(&spec, &paths).unwrap();
        assert!(cmp.passes(4.0), "max |z| = {}", cmp.max_abs_z);
    }

    #[test]
    fn covariance_stderr_degenerate() {
        let (c, se) = covariance_with_stderr(&[1.0], &[2.0]);
        assert_eq!(c, 0.0);
        assert!(se.is_infinite());
        assert_eq!(zscore(1.0, 0.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn single_chain_report_is_flagged() {
        let e = ModelSpace::euclidean(2);
        let pts = [[0.3, 0.0], [-0.2, 0.2], [0.0, -0.3]]
            .iter()
            .map(|p| e.point(p.to_vec()).unwrap())
            .collect();
        let m = DiscreteMeasure::new(e, pts, None).unwrap();
        let ctx = validate_assumption1(&m, &e.point(vec![0.0, 0.0]).unwrap(), 1.0, 2.0).unwrap();
        let opts = FluctuationOptions {
            delta: 1.0,
            n: 100,
            chains: 1,
            times: vec![1.0],
            seed: 0,
            oracle: OracleOptions::default(),
        };
        let rep = fluctuation_experiment(&m, &ctx, &opts).unwrap();
        assert!(rep.pass && rep.insufficient_sample);
        assert!(rep.comparison.covariance.iter().all(|e| e.stderr.is_infinite()));
    }

    #[test]
    fn small_delta_rejected() {
        let e = ModelSpace::euclidean(1);
        let pts = vec![e.point(vec![-0.2]).unwrap(), e.point(vec![0.3]).unwrap()];
        let m = DiscreteMeasure::new(e, pts, None).unwrap();
        let ctx = validate_assumption1(&m, &e.point(vec![0.0]).unwrap(), 1.0, 2.0).unwrap();
        let opts = FluctuationOptions {
            delta: 0.4,
            n: 10,
            chains: 2,
            times: vec![1.0],
            seed: 0,
            oracle: OracleOptions::default(),
        };
        assert!(matches!(
            fluctuation_experiment(&m, &ctx, &opts),
            Err(FluctuationError::DeltaCondition { .. })
        ));
    }

    #[test]
    fn trace_and_states_agree() {
        let e = ModelSpace::euclidean(2);
        let pts = [[0.3, 0.0], [-0.2, 0.2], [0.0, -0.3]]
            .iter()
            .map(|p| e.point(p.to_vec()).unwrap())
            .collect();
        let m = DiscreteMeasure::new(e, pts, None).unwrap();
        let ctx = validate_assumption1(&m, &e.point(vec![0.0, 0.0]).unwrap(), 1.0, 2.0).unwrap();
        let sched = StepSchedule::harmonic(1.0, 0.05).unwrap();
        let x0 = default_start(&e, &m, 2.0).unwrap();
        let tr = run_chain(&m, &ctx, &sched, x0, 40, derive_stream(0, 0)).unwrap();
        let ep = oracle_mean(&m, &ctx, OracleOptions::default()).unwrap().e_p;
        let basis = e.orthonormal_basis(&ep);
        let path = rescale_chain(&e, &tr, &ep, 20, &[1.0, 2.0], &basis).unwrap();
        let x20 = tr.states[20].as_slice();
        let scale = 20.0 / 20f64.sqrt();
        assert!((path.values[(0, 0)] - scale * (x20[0] - ep.as_slice()[0])).abs() < 1e-14);
    }
}
