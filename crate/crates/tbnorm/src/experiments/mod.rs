//! Reproducible experiment drivers. Each driver is a pure function of its
//! [`RunConfig`]: reruns produce byte-identical CSV output apart from one
//! timestamp header line, and byte-identical JSON.

mod ablation;
mod bias_check;
mod cil_run;
mod oracle;
mod toy_gaussian;

pub use ablation::{exp_ablation, AblationReport, AblationRow};
pub use bias_check::{exp_bias_check, exp_bias_check_with, BiasCheckOptions, BiasCheckReport, BiasGridPoint};
pub use cil_run::{exp_cil_run, CilRunReport, SeedMetrics};
pub use oracle::{exp_oracle, OracleReport, OracleSeedReport};
pub use toy_gaussian::{
    exp_toy_gaussian, exp_toy_gaussian_with, ToyGaussianReport, ToySeedReport, TOY_TASK_MEANS,
};

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cil::TrainConfig;
use crate::error::Result;

/// Everything an experiment invocation depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: String,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn new(
        experiment: impl Into<String>,
        train: TrainConfig,
        out_dir: impl Into<PathBuf>,
        seeds: Vec<u64>,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            train,
            out_dir: out_dir.into(),
            seeds,
        }
    }
}

pub(crate) fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), cfg)
}

/// Writes CSV lines under a `# written <unix-seconds>` header; everything
/// after that line is a pure function of the run configuration.
pub(crate) fn write_csv(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut out = format!("# written {stamp}\n{header}\n");
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
