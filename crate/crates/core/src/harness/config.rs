use std::path::PathBuf;

use clap::ValueEnum;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Validate,
    Oracle,
    Solve,
    Fluct,
    LimitSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerChoice {
    Exact,
    Sde,
    Both,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Tolerances {
    pub oracle_tol: Option<f64>,
    pub oracle_max_iter: Option<usize>,
    pub sde_dt: Option<f64>,
}

pub const DEFAULT_N: u64 = 10_000;
pub const DEFAULT_PATHS: usize = 1_000;

/// One fully specified run. Thread count and output directory are not part
/// of the experiment: they never change the results.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub measure_file: PathBuf,
    pub mode: Mode,
    pub delta: Option<f64>,
    pub n: u64,
    pub chains: Option<usize>,
    pub times: Option<Vec<f64>>,
    pub paths: usize,
    pub sampler: SamplerChoice,
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    #[serde(skip)]
    pub threads: Option<usize>,
    pub tolerances: Tolerances,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let missing = |what: &str| {
            Err(HarnessError::Config(format!(
                "mode {} requires {what}",
                self.mode
                    .to_possible_value()
                    .map(|v| v.get_name().to_string())
                    .unwrap_or_default()
            )))
        };
        match self.mode {
            Mode::Fluct => {
                if self.delta.is_none() {
                    return missing("--delta");
                }
                if self.chains.is_none() {
                    return missing("--chains");
                }
                if self.times.is_none() {
                    return missing("--times");
                }
            }
            Mode::LimitSim => {
                if self.delta.is_none() {
                    return missing("--delta");
                }
                if self.times.is_none() {
                    return missing("--times");
                }
            }
            _ => {}
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(HarnessError::Config(format!("delta = {d} must be positive")));
            }
        }
        if self.n == 0 {
            return Err(HarnessError::Config("n must be at least 1".into()));
        }
        if self.chains == Some(0) || self.paths == 0 {
            return Err(HarnessError::Config("chains and paths must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(HarnessError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn chains(&self) -> usize {
        self.chains.unwrap_or(1)
    }

    /// SHA-256 over the measure file contents and the experiment parameters.
    pub fn digest(&self, measure_text: &str) -> String {
        let mut h = Sha256::new();
        h.update(measure_text.as_bytes());
        h.update([0u8]);
        let mut params = self.clone();
        params.measure_file = PathBuf::new();
        h.update(serde_json::to_string(&params).expect("config serializes").as_bytes());
        hex::encode(h.finalize())
    }
}
