//! Command-line orchestration, experiment configuration and report output.

pub mod cli;
pub mod config;
pub mod report;

use thiserror::Error;

use crate::fluctuation::{self, FluctuationError};
use crate::geometry::Point;
use crate::measure::{AlgoConstants, BallContext, DiscreteMeasure, MeasureError};
use crate::solver::SolverError;

pub use crate::rng::{derive_stream, RngStream};
pub use cli::{cli_main, run_cli, Cli};
pub use config::{ExperimentConfig, Mode, SamplerChoice, Tolerances};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Fluctuation(#[from] FluctuationError),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_STATISTICAL: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        let invariant = match self {
            HarnessError::Solver(e) => e.is_invariant_violation(),
            HarnessError::Fluctuation(FluctuationError::Solver(e)) => e.is_invariant_violation(),
            _ => false,
        };
        if invariant {
            EXIT_INVARIANT
        } else {
            EXIT_INPUT
        }
    }
}

/// Algorithm constants at a computed p-mean. The Hessian's smallest
/// eigenvalue is attached whenever the Hessian exists there.
pub fn constants_at(measure: &DiscreteMeasure, ctx: &BallContext, e_p: &Point) -> Result<AlgoConstants, HarnessError> {
    let space = measure.space();
    let basis = space.orthonormal_basis(e_p);
    let lambda_min = fluctuation::hessian_h(measure, e_p, ctx.p, &basis)
        .ok()
        .map(|h| fluctuation::sorted_eigen(&h).0[0]);
    Ok(AlgoConstants::new(ctx, &space, lambda_min)?)
}
