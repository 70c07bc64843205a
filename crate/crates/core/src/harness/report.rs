//! CSV and JSON writers. Floats are written with 17 significant digits.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::fluctuation::{FluctuationReport, GaussianPath};
use crate::solver::ChainTrace;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub const REPORT_HEADER: &str = "t1,t2,i,j,empirical,theoretical,stderr,zscore";
pub const TRACE_HEADER: &str = "k,t_k,rho,objective";
pub const PATH_HEADER: &str = "path,t,i,value";

pub fn report_csv(report: &FluctuationReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for e in &report.comparison.covariance {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(e.t1),
            fmt_f64(e.t2),
            e.i,
            e.j,
            fmt_f64(e.empirical),
            fmt_f64(e.theoretical),
            fmt_f64(e.stderr),
            fmt_f64(e.zscore)
        )
        .unwrap();
    }
    out
}

/// Per-step rows `(k, t_k, ρ(X_k, e_p), H_p(X_k))`; `t_0` is written as 0.
pub fn trace_csv(trace: &ChainTrace, rho: &[f64], objective: &[f64]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for k in 0..trace.states.len() {
        let t = if k == 0 { 0.0 } else { trace.steps_used[k - 1] };
        writeln!(out, "{k},{},{},{}", fmt_f64(t), fmt_f64(rho[k]), fmt_f64(objective[k])).unwrap();
    }
    out
}

pub fn paths_csv(paths: &[GaussianPath]) -> String {
    let mut out = String::from(PATH_HEADER);
    out.push('\n');
    for (p, path) in paths.iter().enumerate() {
        for (row, t) in path.grid.iter().enumerate() {
            for i in 0..path.values.ncols() {
                writeln!(out, "{p},{},{i},{}", fmt_f64(*t), fmt_f64(path.values[(row, i)])).unwrap();
            }
        }
    }
    out
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

#[derive(Debug, Serialize)]
pub struct FluctuationSummary<'a> {
    pub pass: bool,
    pub max_abs_z: f64,
    pub max_abs_mean_z: f64,
    pub config_digest: String,
    pub insufficient_sample: bool,
    pub delta_condition: &'static str,
    pub delta: f64,
    pub n: u64,
    pub chains: usize,
    pub times: &'a [f64],
    pub e_p: Vec<f64>,
    pub c_growth: f64,
    pub delta1: f64,
    pub eigenvalues: &'a [f64],
    /// Columns are the Hessian eigenvectors in the tangent basis at `e_p`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub hessian: Vec<Vec<f64>>,
    pub basis: &'static str,
    pub means: &'a [crate::fluctuation::MeanEntry],
}

pub const BASIS_DESCRIPTION: &str =
    "ambient coordinate axes projected to the tangent space at e_p, orthonormalized by Gram-Schmidt; \
     statistics are reported in the Hessian eigenbasis";

pub fn fluctuation_summary<'a>(report: &'a FluctuationReport, digest: String) -> FluctuationSummary<'a> {
    FluctuationSummary {
        pass: report.pass,
        max_abs_z: report.comparison.max_abs_z,
        max_abs_mean_z: report.comparison.max_abs_mean_z,
        config_digest: digest,
        insufficient_sample: report.insufficient_sample,
        delta_condition: report.delta_condition.label(),
        delta: report.spec.delta(),
        n: report.n,
        chains: report.chains,
        times: &report.times,
        e_p: report.oracle.e_p.to_vec(),
        c_growth: report.constants.c_growth,
        delta1: report.constants.delta1,
        eigenvalues: report.spec.eigenvalues(),
        eigenvectors: matrix_rows(report.spec.eigenvectors()),
        gamma: matrix_rows(report.spec.gamma()),
        hessian: matrix_rows(report.spec.hessian()),
        basis: BASIS_DESCRIPTION,
        means: &report.comparison.means,
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 12345.678901234567, f64::MIN_POSITIVE] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }
}
