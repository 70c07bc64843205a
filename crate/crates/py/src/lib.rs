use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pmean::fluctuation::{self, FluctuationOptions};
use pmean::harness::constants_at;
use pmean::measure::{BallContext, MeasureFile, MeasureProblem};
use pmean::solver::{self, OracleOptions, OracleResult, StepSchedule};
use pmean::{derive_stream, ModelSpace, Point, SpaceKind};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn solver_err(e: solver::SolverError) -> PyErr {
    if e.is_invariant_violation() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// A constant-curvature model space.
#[pyclass(name = "Space", frozen)]
struct PySpace {
    inner: ModelSpace,
}

#[pymethods]
impl PySpace {
    #[new]
    fn new(kind: &str, dim: usize) -> PyResult<Self> {
        let kind = match kind {
            "euclidean" => SpaceKind::Euclidean,
            "sphere" => SpaceKind::Sphere,
            "hyperbolic" => SpaceKind::Hyperbolic,
            other => return Err(value_err(format!("unknown space kind {other:?}"))),
        };
        Ok(PySpace {
            inner: ModelSpace::new(kind, dim).map_err(value_err)?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn origin(&self) -> Vec<f64> {
        self.inner.origin().to_vec()
    }

    fn distance(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        let (x, y) = (self.point(x)?, self.point(y)?);
        self.inner.distance(&x, &y).map_err(value_err)
    }

    fn exp_map(&self, base: Vec<f64>, vec: Vec<f64>) -> PyResult<Vec<f64>> {
        let base = self.point(base)?;
        let v = self.inner.tangent(&base, vec).map_err(value_err)?;
        Ok(self.inner.exp_map(&v).map_err(value_err)?.to_vec())
    }

    fn log_map(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let (x, y) = (self.point(x)?, self.point(y)?);
        let v = self.inner.log_map(&x, &y).map_err(value_err)?;
        Ok(v.vec().as_slice().to_vec())
    }

    fn orthonormal_basis(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let x = self.point(x)?;
        Ok(self
            .inner
            .orthonormal_basis(&x)
            .iter()
            .map(|b| b.vec().as_slice().to_vec())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Space({:?}, {})", self.inner.kind().name(), self.inner.dim())
    }
}

impl PySpace {
    fn point(&self, coords: Vec<f64>) -> PyResult<Point> {
        self.inner.point(coords).map_err(value_err)
    }
}

/// A validated measure on a geodesic ball, as read from a measure file.
#[pyclass(name = "Problem", frozen)]
struct PyProblem {
    problem: MeasureProblem,
    ctx: BallContext,
}

#[pymethods]
impl PyProblem {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let problem = MeasureFile::from_json(text)
            .and_then(|f| f.build())
            .map_err(value_err)?;
        let ctx = problem.validate().map_err(value_err)?;
        Ok(PyProblem { problem, ctx })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(value_err)?;
        Self::from_json(&text)
    }

    #[getter]
    fn space(&self) -> PySpace {
        PySpace {
            inner: self.problem.space,
        }
    }

    #[getter]
    fn p(&self) -> f64 {
        self.ctx.p
    }

    fn ball<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("center", self.ctx.center.to_vec())?;
        d.set_item("radius", self.ctx.radius)?;
        d.set_item("eps", self.ctx.eps)?;
        d.set_item("inner_radius", self.ctx.inner_radius)?;
        d.set_item("max_support_dist", self.ctx.max_support_dist)?;
        Ok(d)
    }

    fn objective(&self, x: Vec<f64>) -> PyResult<f64> {
        let x = self.problem.space.point(x).map_err(value_err)?;
        solver::objective(&self.problem.space, &self.problem.measure, &x, self.ctx.p).map_err(solver_err)
    }

    #[pyo3(signature = (tol = 1e-12, max_iter = 200_000))]
    fn oracle<'py>(&self, py: Python<'py>, tol: f64, max_iter: usize) -> PyResult<Bound<'py, PyDict>> {
        let res = self.run_oracle(OracleOptions { tol, max_iter })?;
        let d = PyDict::new(py);
        d.set_item("e_p", res.e_p.to_vec())?;
        d.set_item("objective", res.objective)?;
        d.set_item("grad_norm", res.grad_norm)?;
        d.set_item("iterations", res.iterations)?;
        Ok(d)
    }

    fn constants<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let res = self.run_oracle(OracleOptions::default())?;
        let c = constants_at(&self.problem.measure, &self.ctx, &res.e_p).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("c_growth", c.c_growth)?;
        d.set_item("c_second", c.c_second)?;
        d.set_item("delta1", c.delta1)?;
        d.set_item("lambda_min_estimate", c.lambda_min_estimate)?;
        Ok(d)
    }

    /// Runs one chain of `n` steps with `t_k = min(delta/k, delta_1)`,
    /// `delta` defaulting to `2 / C`. Returns the states `X_0..X_n`.
    #[pyo3(signature = (n, seed = 0, delta = None))]
    fn run_chain(&self, py: Python<'_>, n: u64, seed: u64, delta: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
        let res = self.run_oracle(OracleOptions::default())?;
        let c = constants_at(&self.problem.measure, &self.ctx, &res.e_p).map_err(value_err)?;
        let schedule = StepSchedule::harmonic(delta.unwrap_or(2.0 / c.c_growth), c.delta1).map_err(solver_err)?;
        let m = &self.problem.measure;
        let x0 = solver::default_start(&self.problem.space, m, self.ctx.p).map_err(solver_err)?;
        let trace = py
            .detach(|| solver::run_chain(m, &self.ctx, &schedule, x0, n, derive_stream(seed, 0)))
            .map_err(solver_err)?;
        Ok(trace.states.iter().map(Point::to_vec).collect())
    }

    /// Compares the rescaled chain with the limit diffusion.
    #[pyo3(signature = (delta, n, chains, times, seed = 0))]
    fn fluctuation<'py>(
        &self,
        py: Python<'py>,
        delta: f64,
        n: u64,
        chains: usize,
        times: Vec<f64>,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let opts = FluctuationOptions {
            delta,
            n,
            chains,
            times,
            seed,
            oracle: OracleOptions::default(),
        };
        let rep = py
            .detach(|| fluctuation::fluctuation_experiment(&self.problem.measure, &self.ctx, &opts))
            .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("pass", rep.pass)?;
        d.set_item("max_abs_z", rep.comparison.max_abs_z)?;
        d.set_item("max_abs_mean_z", rep.comparison.max_abs_mean_z)?;
        d.set_item("insufficient_sample", rep.insufficient_sample)?;
        d.set_item("eigenvalues", rep.spec.eigenvalues().to_vec())?;
        let entries: Vec<_> = rep
            .comparison
            .covariance
            .iter()
            .map(|e| (e.t1, e.t2, e.i, e.j, e.empirical, e.theoretical, e.stderr, e.zscore))
            .collect();
        d.set_item("entries", entries)?;
        Ok(d)
    }

    /// Limit covariance `Cov(y(t1), y(t2))` in the Hessian eigenbasis.
    fn limit_covariance(&self, delta: f64, t1: f64, t2: f64) -> PyResult<Vec<Vec<f64>>> {
        let res = self.run_oracle(OracleOptions::default())?;
        let (spec, _, _) =
            fluctuation::limit_spec_for(&self.problem.measure, &self.ctx, &res.e_p, delta).map_err(value_err)?;
        let c = fluctuation::limit_covariance(&spec, t1, t2).map_err(value_err)?;
        Ok((0..c.nrows()).map(|r| c.row(r).iter().copied().collect()).collect())
    }
}

impl PyProblem {
    fn run_oracle(&self, opts: OracleOptions) -> PyResult<OracleResult> {
        solver::oracle_mean(&self.problem.measure, &self.ctx, opts).map_err(solver_err)
    }
}

/// The first `count` uniforms of stream `(seed, stream)`.
#[pyfunction]
fn uniforms(seed: u64, stream: u64, count: usize) -> Vec<f64> {
    let mut rng = derive_stream(seed, stream);
    (0..count).map(|_| rng.next_uniform()).collect()
}

#[pymodule]
fn pmean_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpace>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(uniforms, m)?)?;
    Ok(())
}
