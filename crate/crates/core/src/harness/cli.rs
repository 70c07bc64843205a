use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde_json::json;

use super::config::{ExperimentConfig, Mode, SamplerChoice, Tolerances, DEFAULT_N, DEFAULT_PATHS};
use super::report::{self, fmt_f64};
use super::{constants_at, HarnessError, EXIT_OK, EXIT_STATISTICAL};
use crate::fluctuation::{
    compare_paths, fluctuation_experiment, limit_spec_for, sample_limit_paths, sample_sde_paths, FluctuationOptions,
    DEFAULT_SDE_STEP, Z_THRESHOLD,
};
use crate::measure::{radius_bound, MeasureFile, MeasureProblem};
use crate::rng::derive_stream;
use crate::solver::{default_start, objective, oracle_mean, run_chain, OracleOptions, StepSchedule};

#[derive(Debug, Parser)]
#[command(name = "pmean", about = "Stochastic p-means on constant-curvature spaces")]
pub struct Cli {
    /// What to run; `--mode` overrides it.
    #[arg(value_enum)]
    pub command: Option<Mode>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Measure file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Chain length (solve) or time scale n (fluct).
    #[arg(long, default_value_t = DEFAULT_N)]
    pub n: u64,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Comma-separated observation times.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_PATHS)]
    pub paths: usize,
    #[arg(long, value_enum, default_value_t = SamplerChoice::Exact)]
    pub sampler: SamplerChoice,
    #[arg(long)]
    pub oracle_tol: Option<f64>,
    #[arg(long)]
    pub oracle_max_iter: Option<usize>,
    #[arg(long)]
    pub sde_dt: Option<f64>,
}

impl Cli {
    pub fn into_config(self) -> Result<ExperimentConfig, HarnessError> {
        let mode = self
            .mode
            .or(self.command)
            .ok_or_else(|| HarnessError::Config("a mode is required".into()))?;
        let cfg = ExperimentConfig {
            measure_file: self.config,
            mode,
            delta: self.delta,
            n: self.n,
            chains: self.chains,
            times: self.times,
            paths: self.paths,
            sampler: self.sampler,
            seed: self.seed,
            out_dir: self.out,
            threads: self.threads,
            tolerances: Tolerances {
                oracle_tol: self.oracle_tol,
                oracle_max_iter: self.oracle_max_iter,
                sde_dt: self.sde_dt,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn oracle_options(cfg: &ExperimentConfig) -> OracleOptions {
    let d = OracleOptions::default();
    OracleOptions {
        tol: cfg.tolerances.oracle_tol.unwrap_or(d.tol),
        max_iter: cfg.tolerances.oracle_max_iter.unwrap_or(d.max_iter),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        context: format!("creating {}", dir.display()),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| HarnessError::Io {
        context: format!("writing {}", path.display()),
        source,
    })?;
    Ok(path)
}

fn io_err(source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        context: "writing output".into(),
        source,
    }
}

struct Loaded {
    text: String,
    problem: MeasureProblem,
}

fn load(cfg: &ExperimentConfig) -> Result<Loaded, HarnessError> {
    let text = std::fs::read_to_string(&cfg.measure_file).map_err(|source| HarnessError::Io {
        context: format!("reading {}", cfg.measure_file.display()),
        source,
    })?;
    let problem = MeasureFile::from_json(&text)?.build()?;
    Ok(Loaded { text, problem })
}

/// Runs one configured experiment, writing human-readable output to `out`.
/// Returns the exit code for a completed run.
pub fn execute(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<i32, HarnessError> {
    let loaded = load(cfg)?;
    let problem = &loaded.problem;
    let ctx = problem.validate()?;
    let measure = &problem.measure;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    match cfg.mode {
        Mode::Validate => {
            let (bound, which) = radius_bound(&problem.space, problem.p);
            let mut value = json!({
                "manifold": problem.space.kind().name(),
                "dim": problem.space.dim(),
                "radius_bound": bound,
                "radius_bound_term": which,
                "ball": &ctx,
            });
            let oracle = oracle_mean(measure, &ctx, oracle_options(cfg))?;
            value["constants"] =
                serde_json::to_value(constants_at(measure, &ctx, &oracle.e_p)?).expect("constants serialize");
            writeln!(out, "{}", serde_json::to_string_pretty(&value).unwrap()).map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Mode::Oracle => {
            let oracle = oracle_mean(measure, &ctx, oracle_options(cfg))?;
            let value = json!({
                "e_p": oracle.e_p.to_vec(),
                "objective": oracle.objective,
                "grad_norm": oracle.grad_norm,
                "iterations": oracle.iterations,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&value).unwrap()).map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Mode::Solve => {
            let oracle = oracle_mean(measure, &ctx, oracle_options(cfg))?;
            let constants = constants_at(measure, &ctx, &oracle.e_p)?;
            let delta = cfg.delta.unwrap_or(2.0 / constants.c_growth);
            let schedule = StepSchedule::harmonic(delta, constants.delta1)?;
            let x0 = default_start(&problem.space, measure, ctx.p)?;
            let trace = run_chain(measure, &ctx, &schedule, x0, cfg.n, derive_stream(cfg.seed, 0))?;
            let mut rho = Vec::with_capacity(trace.states.len());
            let mut obj = Vec::with_capacity(trace.states.len());
            for x in &trace.states {
                rho.push(
                    problem
                        .space
                        .distance(x, &oracle.e_p)
                        .map_err(crate::solver::SolverError::from)?,
                );
                obj.push(objective(&problem.space, measure, x, ctx.p)?);
            }
            let path = write_file(&out_dir, "trace.csv", &report::trace_csv(&trace, &rho, &obj))?;
            writeln!(
                out,
                "solve: {} steps, delta = {}, final rho = {}, trace written to {}",
                cfg.n,
                fmt_f64(delta),
                fmt_f64(*rho.last().unwrap()),
                path.display()
            )
            .map_err(io_err)?;
            Ok(EXIT_OK)
        }
        Mode::Fluct => {
            let opts = FluctuationOptions {
                delta: cfg.delta.expect("validated"),
                n: cfg.n,
                chains: cfg.chains(),
                times: cfg.times.clone().expect("validated"),
                seed: cfg.seed,
                oracle: oracle_options(cfg),
            };
            let rep = fluctuation_experiment(measure, &ctx, &opts)?;
            let digest = cfg.digest(&loaded.text);
            write_file(&out_dir, "report.csv", &report::report_csv(&rep))?;
            let summary = report::fluctuation_summary(&rep, digest);
            write_file(&out_dir, "summary.json", &report::to_json_pretty(&summary))?;
            writeln!(
                out,
                "fluct: pass = {}, max |z| = {:.3}, max |mean z| = {:.3}{}",
                rep.pass,
                rep.comparison.max_abs_z,
                rep.comparison.max_abs_mean_z,
                if rep.insufficient_sample {
                    " (insufficient sample)"
                } else {
                    ""
                }
            )
            .map_err(io_err)?;
            Ok(if rep.pass { EXIT_OK } else { EXIT_STATISTICAL })
        }
        Mode::LimitSim => {
            let oracle = oracle_mean(measure, &ctx, oracle_options(cfg))?;
            let (spec, _, _) = limit_spec_for(measure, &ctx, &oracle.e_p, cfg.delta.expect("validated"))?;
            spec.require_admissible()?;
            let grid = cfg.times.clone().expect("validated");
            let mut summary = json!({
                "config_digest": cfg.digest(&loaded.text),
                "eigenvalues": spec.eigenvalues(),
                "paths": cfg.paths,
                "times": &grid,
            });
            let mut run = |name: &str, paths: Vec<crate::fluctuation::GaussianPath>| -> Result<(), HarnessError> {
                let cmp = compare_paths(&spec, &paths)?;
                write_file(&out_dir, &format!("limit_{name}.csv"), &report::paths_csv(&paths))?;
                summary[name] = json!({
                    "max_abs_z": cmp.max_abs_z,
                    "max_abs_mean_z": cmp.max_abs_mean_z,
                    "pass": cmp.passes(Z_THRESHOLD),
                });
                writeln!(
                    out,
                    "limit-sim {name}: {} paths, max |z| = {:.3}",
                    paths.len(),
                    cmp.max_abs_z
                )
                .map_err(io_err)
            };
            if matches!(cfg.sampler, SamplerChoice::Exact | SamplerChoice::Both) {
                run("exact", sample_limit_paths(&spec, &grid, cfg.paths, cfg.seed)?)?;
            }
            if matches!(cfg.sampler, SamplerChoice::Sde | SamplerChoice::Both) {
                let dt = cfg.tolerances.sde_dt.unwrap_or(DEFAULT_SDE_STEP);
                run("sde", sample_sde_paths(&spec, &grid, cfg.paths, cfg.seed, dt, None)?)?;
            }
            write_file(&out_dir, "limit_summary.json", &report::to_json_pretty(&summary))?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `argv`, runs the experiment on the requested thread pool and maps
/// the outcome to an exit code. Errors go to `err`.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { super::EXIT_INPUT } else { EXIT_OK };
            let _ = write!(err, "{e}");
            return code;
        }
    };
    let mut buffer = Vec::new();
    let result = cli.into_config().and_then(|cfg| match cfg.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
            pool.install(|| execute(&cfg, &mut buffer))
        }
        None => execute(&cfg, &mut buffer),
    });
    let _ = out.write_all(&buffer);
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn cli_main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
