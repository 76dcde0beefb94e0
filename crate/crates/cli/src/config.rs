use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use liebox_core::approx_exp::CommutatorFrame;
use liebox_core::metric::MetricConfig;
use liebox_core::vfield::{ModelSpec, OdeConfig, VectorFieldSystem};

use crate::Failure;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    #[default]
    Json,
}

/// Settings shared by every subcommand. Loaded from `--config` (JSON), then
/// overridden by flags; echoed into every report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub model_file: Option<PathBuf>,
    pub seed: u64,
    pub workers: Option<usize>,
    pub format: Format,
    pub timestamp: bool,
    pub output: Option<PathBuf>,
    pub ode: OdeConfig,
    pub metric: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            model_file: None,
            seed: 0,
            workers: None,
            format: Format::Json,
            timestamp: true,
            output: None,
            ode: OdeConfig::default(),
            metric: MetricConfig::default(),
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// JSON file with a RunConfig; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sampling batches (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Omit the timestamp so identical runs give identical bytes.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Write the report here instead of stdout.
    #[arg(long, short, global = true, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Built-in model name.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Model JSON file: {"n", "m", "s", "fields"}.
    #[arg(long, global = true, value_name = "FILE")]
    pub model_file: Option<PathBuf>,
    #[arg(long, global = true)]
    pub ode_tol: Option<f64>,
    /// Pieces per control path for distance estimates.
    #[arg(long, global = true)]
    pub segments: Option<usize>,
    #[arg(long, global = true)]
    pub starts: Option<usize>,
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn resolve(g: &GlobalArgs) -> Result<Self, Failure> {
        let mut c = match &g.config {
            Some(p) => serde_json::from_str(&read(p)?)
                .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        if let Some(f) = g.format {
            c.format = f;
        }
        if let Some(s) = g.seed {
            c.seed = s;
        }
        if g.workers.is_some() {
            c.workers = g.workers;
        }
        if g.no_timestamp {
            c.timestamp = false;
        }
        if g.output.is_some() {
            c.output = g.output.clone();
        }
        if g.model.is_some() || g.model_file.is_some() {
            c.model = g.model.clone();
            c.model_file = g.model_file.clone();
        }
        if let Some(t) = g.ode_tol {
            c.ode.atol = t;
            c.ode.rtol = t;
        }
        if let Some(k) = g.segments {
            c.metric.segments = k;
        }
        if let Some(k) = g.starts {
            c.metric.starts = k;
        }
        c.metric.seed = c.seed;
        if c.workers == Some(0) {
            return Err(Failure::usage("--workers must be positive"));
        }
        Ok(c)
    }

    pub fn system(&self) -> Result<VectorFieldSystem, Failure> {
        let mut sys = match (&self.model, &self.model_file) {
            (Some(_), Some(_)) => {
                return Err(Failure::usage("give --model or --model-file, not both"))
            }
            (Some(name), None) => {
                VectorFieldSystem::builtin(name).map_err(|e| Failure::usage(e.to_string()))?
            }
            (None, Some(p)) => {
                let spec: ModelSpec = serde_json::from_str(&read(p)?)
                    .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
                VectorFieldSystem::from_spec(&spec).map_err(|e| Failure::usage(e.to_string()))?
            }
            (None, None) => {
                return Err(Failure::usage("this command needs --model or --model-file"))
            }
        };
        sys.ode = self.ode;
        Ok(sys)
    }

    pub fn frame(&self) -> Result<CommutatorFrame, Failure> {
        Ok(CommutatorFrame::new(Arc::new(self.system()?)))
    }
}
