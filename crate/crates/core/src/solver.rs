//! The stochastic gradient algorithm for p-means, its step schedules, the
//! objective `H_p` with its gradient, and a deterministic descent oracle.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{GeometryError, ModelSpace, Point, TangentVector, COINCIDENCE_TOLERANCE};
use crate::measure::{containment_step_cap, has_explicit_growth, BallContext, DiscreteMeasure, MeasureError};
use crate::rng::{derive_stream, RngStream};

/// Slack allowed on the containment check `ρ(a, X_k) ≤ r − ε`.
pub const CONTAINMENT_SLACK: f64 = 1e-9;
/// Iterates this close to a support point trigger the median optimality test.
pub const MEDIAN_SNAP_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("step schedule: {0}")]
    InvalidSchedule(String),
    #[error("step size bound violated: t_{k} = {t} exceeds the cap delta_1 = {delta1}")]
    StepTooLarge { k: u64, t: f64, delta1: f64 },
    #[error("starting point lies at distance {distance} from the center, outside K (radius {limit})")]
    StartOutsideK { distance: f64, limit: f64 },
    #[error(
        "invariant violated: iterate X_{step} left K (distance {distance} > {limit}); \
         step t = {t}, sampled support point {sample}, previous iterate {from:?}, new iterate {to:?}"
    )]
    Containment {
        step: u64,
        distance: f64,
        limit: f64,
        t: f64,
        sample: usize,
        from: Vec<f64>,
        to: Vec<f64>,
    },
    #[error("oracle did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence {
        best: Point,
        grad_norm: f64,
        iterations: usize,
    },
    #[error("chain length must be at least 1")]
    EmptyChain,
}

pub type Result<T> = std::result::Result<T, SolverError>;

impl SolverError {
    /// Internal invariant failures as opposed to bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, SolverError::Containment { .. })
    }
}

/// `grad_x ρ^p(·, y) = −p·ρ^{p−1}·n(x, y)`, zero when `x = y`.
pub fn grad_f(space: &ModelSpace, x: &Point, y: &Point, p: f64) -> Result<TangentVector> {
    let rho = space.distance(x, y)?;
    if rho <= COINCIDENCE_TOLERANCE {
        return Ok(space.zero_tangent(x));
    }
    let mut v = space.log_map(x, y)?;
    let norm = space.norm(&v);
    v.scale_mut(-p * rho.powf(p - 1.0) / norm);
    Ok(v)
}

fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        values.iter().sum()
    } else {
        let (a, b) = values.split_at(values.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// `H_p(x) = Σ_i w_i ρ(x, x_i)^p`.
pub fn objective(space: &ModelSpace, measure: &DiscreteMeasure, x: &Point, p: f64) -> Result<f64> {
    let terms = measure
        .points()
        .iter()
        .zip(measure.weights())
        .map(|(y, w)| Ok(w * space.distance(x, y)?.powf(p)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&terms))
}

/// `grad H_p(x) = Σ_i w_i grad_x ρ^p(·, x_i)`; coincident points contribute zero.
pub fn grad_objective(space: &ModelSpace, measure: &DiscreteMeasure, x: &Point, p: f64) -> Result<TangentVector> {
    let mut acc = space.zero_tangent(x);
    let (_, mut sum) = acc.clone().into_parts();
    for (y, w) in measure.points().iter().zip(measure.weights()) {
        let g = grad_f(space, x, y, p)?;
        sum.axpy(*w, g.vec(), 1.0);
    }
    acc = space.project_tangent(x, sum);
    Ok(acc)
}

/// Hessian of `H_p` at `x` in the coordinates of `basis`:
/// `Σ_i w_i pρ_i^{p−2}[(p−1) n_i n_iᵀ + ρ_i ct(ρ_i)(I − n_i n_iᵀ)]`.
///
/// A support point at `x` contributes `2I` for `p = 2` and nothing for
/// `p > 2`; for `p < 2` the Hessian does not exist there and `None` is
/// returned.
pub fn hessian_objective(
    space: &ModelSpace,
    measure: &DiscreteMeasure,
    x: &Point,
    p: f64,
    basis: &[TangentVector],
) -> Result<Option<DMatrix<f64>>> {
    let d = basis.len();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut hess = DMatrix::zeros(d, d);
    for (y, w) in measure.points().iter().zip(measure.weights()) {
        let rho = space.distance(x, y)?;
        if rho <= COINCIDENCE_TOLERANCE {
            if p < 2.0 {
                return Ok(None);
            }
            if p == 2.0 {
                hess += &eye * (2.0 * w);
            }
            continue;
        }
        let v = space.coordinates(&space.log_map(x, y)?, basis);
        let n = &v / v.norm();
        let nn = &n * n.transpose();
        let term = &nn * (p - 1.0) + (&eye - &nn) * space.rho_ct(rho);
        hess += term * (w * p * rho.powf(p - 2.0));
    }
    Ok(Some(hess))
}

/// Newton direction `−H⁻¹ g` when the Hessian exists and is positive definite.
fn newton_direction(
    space: &ModelSpace,
    measure: &DiscreteMeasure,
    x: &Point,
    g: &TangentVector,
    p: f64,
) -> Result<Option<TangentVector>> {
    let basis = space.orthonormal_basis(x);
    let Some(hess) = hessian_objective(space, measure, x, p, &basis)? else {
        return Ok(None);
    };
    let Some(chol) = hess.cholesky() else {
        return Ok(None);
    };
    let mut step: DVector<f64> = chol.solve(&space.coordinates(g, &basis));
    step.neg_mut();
    Ok(Some(space.from_coordinates(x, step.as_slice(), &basis)))
}

/// Generator for custom step sequences, indexed from `k = 1`.
pub type StepFn = Arc<dyn Fn(u64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ScheduleKind {
    /// `t_k = min(δ/k, δ₁)`.
    Harmonic { delta: f64 },
    /// A user sequence. `attested` records the caller's claim that
    /// `Σ t_k = ∞` and `Σ t_k² < ∞`, which cannot be checked here.
    Custom { generator: StepFn, attested: bool },
}

impl fmt::Debug for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Harmonic { delta } => f.debug_struct("Harmonic").field("delta", delta).finish(),
            ScheduleKind::Custom { attested, .. } => f
                .debug_struct("Custom")
                .field("attested", attested)
                .finish_non_exhaustive(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepSchedule {
    kind: ScheduleKind,
    delta1: f64,
}

impl StepSchedule {
    pub fn harmonic(delta: f64, delta1: f64) -> Result<Self> {
        if !(delta > 0.0) || !(delta1 > 0.0) {
            return Err(SolverError::InvalidSchedule(format!(
                "delta = {delta} and delta_1 = {delta1} must be positive"
            )));
        }
        Ok(StepSchedule {
            kind: ScheduleKind::Harmonic { delta },
            delta1,
        })
    }

    /// Every emitted term is checked against `cap`.
    pub fn custom(generator: StepFn, cap: f64, attested: bool) -> Result<Self> {
        if !(cap > 0.0) {
            return Err(SolverError::InvalidSchedule(format!("step cap {cap} must be positive")));
        }
        Ok(StepSchedule {
            kind: ScheduleKind::Custom { generator, attested },
            delta1: cap,
        })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn delta1(&self) -> f64 {
        self.delta1
    }

    pub fn delta(&self) -> Option<f64> {
        match self.kind {
            ScheduleKind::Harmonic { delta } => Some(delta),
            ScheduleKind::Custom { .. } => None,
        }
    }

    /// The step `t_k` used to move from `X_{k−1}` to `X_k`.
    pub fn step(&self, k: u64) -> Result<f64> {
        if k == 0 {
            return Err(SolverError::InvalidSchedule("steps are indexed from 1".into()));
        }
        match &self.kind {
            ScheduleKind::Harmonic { delta } => Ok((delta / k as f64).min(self.delta1)),
            ScheduleKind::Custom { generator, .. } => {
                let t = generator(k);
                if !(t > 0.0) || !t.is_finite() {
                    return Err(SolverError::InvalidSchedule(format!(
                        "t_{k} = {t} is not a positive real"
                    )));
                }
                if t > self.delta1 {
                    return Err(SolverError::StepTooLarge {
                        k,
                        t,
                        delta1: self.delta1,
                    });
                }
                Ok(t)
            }
        }
    }
}

/// One step of the algorithm: `exp_x(−t·grad_x ρ^p(·, sample))`.
pub fn sgd_step(space: &ModelSpace, x: &Point, sample: &Point, t: f64, p: f64) -> Result<Point> {
    let mut g = grad_f(space, x, sample, p)?;
    g.scale_mut(-t);
    Ok(space.exp_map(&g)?)
}

/// The support point with the smallest objective; always inside `K`.
pub fn default_start(space: &ModelSpace, measure: &DiscreteMeasure, p: f64) -> Result<Point> {
    let mut best: Option<(f64, &Point)> = None;
    for x in measure.points() {
        let h = objective(space, measure, x, p)?;
        if best.is_none_or(|(b, _)| h < b) {
            best = Some((h, x));
        }
    }
    Ok(best.expect("measure has support").1.clone())
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub k: u64,
    pub t: f64,
    pub sample: usize,
}

/// A running chain `X_0, X_1, ...` that owns its random stream.
pub struct Chain<'a> {
    space: ModelSpace,
    measure: &'a DiscreteMeasure,
    ctx: &'a BallContext,
    schedule: &'a StepSchedule,
    state: Point,
    k: u64,
    rng: RngStream,
}

impl<'a> Chain<'a> {
    pub fn new(
        measure: &'a DiscreteMeasure,
        ctx: &'a BallContext,
        schedule: &'a StepSchedule,
        x0: Point,
        rng: RngStream,
    ) -> Result<Self> {
        let space = measure.space();
        let distance = space.distance(&ctx.center, &x0)?;
        if distance > ctx.inner_radius + CONTAINMENT_SLACK {
            return Err(SolverError::StartOutsideK {
                distance,
                limit: ctx.inner_radius,
            });
        }
        Ok(Chain {
            space,
            measure,
            ctx,
            schedule,
            state: x0,
            k: 0,
            rng,
        })
    }

    pub fn state(&self) -> &Point {
        &self.state
    }

    pub fn steps_taken(&self) -> u64 {
        self.k
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let k = self.k + 1;
        let t = self.schedule.step(k)?;
        let sample = self.measure.sample_index(&mut self.rng);
        let next = sgd_step(&self.space, &self.state, &self.measure.points()[sample], t, self.ctx.p)?;
        let distance = self.space.distance(&self.ctx.center, &next)?;
        let limit = self.ctx.inner_radius;
        if !(distance <= limit + CONTAINMENT_SLACK) {
            return Err(SolverError::Containment {
                step: k,
                distance,
                limit,
                t,
                sample,
                from: self.state.to_vec(),
                to: next.to_vec(),
            });
        }
        self.state = next;
        self.k = k;
        Ok(StepRecord { k, t, sample })
    }

    /// Steps until `k` steps have been taken in total.
    pub fn advance_to(&mut self, k: u64) -> Result<()> {
        while self.k < k {
            self.step()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepDiagnostics {
    /// `ρ²(X_k, e_p)`.
    pub rho_sq_to_oracle: f64,
    /// Right side minus left side of the pathwise descent inequality for the
    /// step `X_{k−1} → X_k`; only defined for `p < 2`.
    pub descent_slack: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub states: Vec<Point>,
    pub steps_used: Vec<f64>,
    pub sampled: Vec<usize>,
    /// Entry `k − 1` describes step `k`; filled by [`ChainTrace::attach_diagnostics`].
    pub diagnostics: Option<Vec<StepDiagnostics>>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.steps_used.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps_used.is_empty()
    }

    /// Computes per-step diagnostics against a known p-mean `e`:
    /// `ρ²(X_{k+1},e) ≤ ρ²(X_k,e) − 2t(ρ^p(X_k,P) − ρ^p(e,P)) + C·t²`.
    pub fn attach_diagnostics(&mut self, measure: &DiscreteMeasure, e: &Point, p: f64, c_second: f64) -> Result<()> {
        let space = measure.space();
        let mut out = Vec::with_capacity(self.len());
        let mut prev_sq = space.distance(&self.states[0], e)?.powi(2);
        for k in 0..self.len() {
            let (from, to) = (&self.states[k], &self.states[k + 1]);
            let sample = &measure.points()[self.sampled[k]];
            let t = self.steps_used[k];
            let rho_sq = space.distance(to, e)?.powi(2);
            let descent_slack = if p < 2.0 {
                let gap = space.distance(from, sample)?.powf(p) - space.distance(e, sample)?.powf(p);
                Some(prev_sq - 2.0 * t * gap + c_second * t * t - rho_sq)
            } else {
                None
            };
            out.push(StepDiagnostics {
                rho_sq_to_oracle: rho_sq,
                descent_slack,
            });
            prev_sq = rho_sq;
        }
        self.diagnostics = Some(out);
        Ok(())
    }
}

/// Runs `n` steps and records the full trajectory.
pub fn run_chain(
    measure: &DiscreteMeasure,
    ctx: &BallContext,
    schedule: &StepSchedule,
    x0: Point,
    n: u64,
    rng: RngStream,
) -> Result<ChainTrace> {
    if n == 0 {
        return Err(SolverError::EmptyChain);
    }
    let mut chain = Chain::new(measure, ctx, schedule, x0, rng)?;
    let mut trace = ChainTrace {
        states: Vec::with_capacity(n as usize + 1),
        steps_used: Vec::with_capacity(n as usize),
        sampled: Vec::with_capacity(n as usize),
        diagnostics: None,
    };
    trace.states.push(chain.state().clone());
    for _ in 0..n {
        let rec = chain.step()?;
        trace.states.push(chain.state().clone());
        trace.steps_used.push(rec.t);
        trace.sampled.push(rec.sample);
    }
    Ok(trace)
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub e_p: Point,
    pub grad_norm: f64,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            tol: 1e-12,
            max_iter: 200_000,
        }
    }
}

/// Distance from zero to the subdifferential of `H_1` at support point `i`:
/// `max(0, |Σ_{j≠i} w_j grad ρ(·, x_j)| − w_i)`.
fn median_residual_at_support(measure: &DiscreteMeasure, i: usize) -> Result<f64> {
    let space = measure.space();
    let x = &measure.points()[i];
    let g = grad_objective(&space, measure, x, 1.0)?;
    Ok((space.norm(&g) - measure.weights()[i]).max(0.0))
}

/// Armijo condition `H_new ≤ H + c` with `c < 0`. Once `H` no longer
/// resolves the decrease, a step that lowers the gradient norm is accepted.
fn descent_accepted(h: f64, h_new: f64, c: f64, gn: f64, gn_new: f64) -> bool {
    h_new <= h + c || ((h_new - h).abs() <= 1e-14 * h.abs() && gn_new < gn)
}

/// Ground-truth p-mean by Riemannian descent with backtracking.
///
/// Each iteration first tries a damped Newton step (when the Hessian is
/// positive definite) and otherwise a gradient step. The first gradient trial
/// step is `δ₁` (or the containment cap when the growth constant needs the
/// Hessian); after an accepted gradient step the trial doubles.
/// For `p = 1` every support point is first tested for subgradient
/// optimality, so a median sitting on the support is returned exactly.
pub fn oracle_mean(measure: &DiscreteMeasure, ctx: &BallContext, opts: OracleOptions) -> Result<OracleResult> {
    let space = measure.space();
    let p = ctx.p;
    if p == 1.0 {
        for i in 0..measure.len() {
            if median_residual_at_support(measure, i)? == 0.0 {
                let e_p = measure.points()[i].clone();
                return Ok(OracleResult {
                    objective: objective(&space, measure, &e_p, p)?,
                    e_p,
                    grad_norm: 0.0,
                    iterations: 0,
                });
            }
        }
    }
    let eta0 = if has_explicit_growth(ctx, &space) {
        crate::measure::AlgoConstants::new(ctx, &space, None)?.delta1
    } else {
        containment_step_cap(ctx)
    };
    let max_step = ctx.radius.min(space.injectivity_radius() / 2.0);

    let mut x = default_start(&space, measure, p)?;
    let mut h = objective(&space, measure, &x, p)?;
    let mut g = grad_objective(&space, measure, &x, p)?;
    let mut gn = space.norm(&g);
    let mut eta = eta0;
    for iteration in 0..opts.max_iter {
        if gn <= opts.tol {
            return Ok(OracleResult {
                e_p: x,
                grad_norm: gn,
                iterations: iteration,
                objective: h,
            });
        }
        let mut accepted = false;
        // Damped Newton where the Hessian is positive definite.
        if let Some(dir) = newton_direction(&space, measure, &x, &g, p)? {
            let slope = space.inner(&dir, &g);
            let len = space.norm(&dir);
            let mut s = (max_step / len).min(1.0);
            while s > 1e-10 {
                let x_new = space.exp_map(&dir.scaled(s))?;
                let h_new = objective(&space, measure, &x_new, p)?;
                let g_new = grad_objective(&space, measure, &x_new, p)?;
                let gn_new = space.norm(&g_new);
                if descent_accepted(h, h_new, 1e-4 * s * slope, gn, gn_new) {
                    (x, h, g, gn) = (x_new, h_new, g_new, gn_new);
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
        }
        while !accepted && eta > 1e-300 {
            let step = (eta * gn).min(max_step);
            let x_new = space.exp_map(&g.scaled(-step / gn))?;
            let h_new = objective(&space, measure, &x_new, p)?;
            let g_new = grad_objective(&space, measure, &x_new, p)?;
            let gn_new = space.norm(&g_new);
            if descent_accepted(h, h_new, -1e-4 * step * gn, gn, gn_new) {
                (x, h, g, gn) = (x_new, h_new, g_new, gn_new);
                eta = (2.0 * eta).min(1e6);
                accepted = true;
            } else {
                eta *= 0.5;
            }
        }
        if !accepted {
            return Err(SolverError::NoConvergence {
                best: x,
                grad_norm: gn,
                iterations: iteration,
            });
        }
        if p == 1.0 {
            for (i, y) in measure.points().iter().enumerate() {
                if space.distance(&x, y)? <= MEDIAN_SNAP_DISTANCE && median_residual_at_support(measure, i)? == 0.0 {
                    return Ok(OracleResult {
                        e_p: y.clone(),
                        grad_norm: 0.0,
                        iterations: iteration + 1,
                        objective: objective(&space, measure, y, p)?,
                    });
                }
            }
        }
    }
    Err(SolverError::NoConvergence {
        best: x,
        grad_norm: gn,
        iterations: opts.max_iter,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProfilePoint {
    pub n: u64,
    pub mean_rho_sq: f64,
    pub stderr: f64,
}

/// Mean and standard error of `ρ²(X_n, e)` over independent chains at each
/// checkpoint. Chain `i` uses stream `i` of `root_seed`; the reduction runs
/// in chain order, so the result does not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn convergence_profile(
    measure: &DiscreteMeasure,
    ctx: &BallContext,
    schedule: &StepSchedule,
    x0: &Point,
    e: &Point,
    checkpoints: &[u64],
    chains: usize,
    root_seed: u64,
) -> Result<Vec<ProfilePoint>> {
    let space = measure.space();
    let per_chain: Vec<Vec<f64>> = (0..chains)
        .into_par_iter()
        .map(|i| {
            let mut chain = Chain::new(measure, ctx, schedule, x0.clone(), derive_stream(root_seed, i as u64))?;
            checkpoints
                .iter()
                .map(|&n| {
                    chain.advance_to(n)?;
                    Ok(space.distance(chain.state(), e)?.powi(2))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let values: Vec<f64> = per_chain.iter().map(|v| v[c]).collect();
            let (mean, stderr) = mean_and_stderr(&values);
            ProfilePoint {
                n,
                mean_rho_sq: mean,
                stderr,
            }
        })
        .collect())
}

/// Sample mean and standard error (infinite for a single sample).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
