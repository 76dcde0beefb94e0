//! `liebox`: command-line front end for the commutator and ball-box
//! experiments. Every subcommand writes one JSON or CSV report that echoes
//! the tool version and the resolved configuration.
//!
//! Exit status: 0 when every requested check passes, 1 when a check fails,
//! 2 for usage errors (bad flags, unknown model, unreadable files).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod config;
mod report;
mod suite;

use config::{GlobalArgs, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "liebox",
    version,
    about = "Nested commutators, approximate exponentials and ball-box experiments"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Coefficients π_ℓ(σ) of the expansion of a nested commutator.
    PiTable(PiTableArgs),
    /// Exact sweeps of the commutator identity families.
    Identities(IdentitiesArgs),
    /// Triviality test for a noncommutative polynomial.
    Witness(WitnessArgs),
    /// Coefficients of the commutator field X_w.
    Bracket(BracketArgs),
    /// Flow of one generator.
    Flow(FlowArgs),
    /// Convergence of the flow quotient to X_w ψ.
    LimitCheck(LimitArgs),
    /// The almost exponential map, its Jacobian and box norm.
    Emap(EmapArgs),
    /// Maximal frame, Jacobian comparability and ball-in-box inclusion.
    Ballbox(BallboxArgs),
    /// Distance estimates with certificate paths.
    Distance(DistanceArgs),
    /// Monte Carlo doubling ratio |B(x,2r)| / |B(x,r)|.
    Doubling(DoublingArgs),
    /// Poincaré ratios for a fixed suite of polynomials.
    Poincare(PoincareArgs),
    /// Minimum-norm and regularized least squares.
    Pinv(PinvArgs),
    /// Runs the acceptance checks.
    Suite(SuiteArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct PiTableArgs {
    #[arg(long)]
    pub order: usize,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[value(alias = "jacobi")]
    GeneralizedJacobi,
    J2,
    F,
    Baker,
    Placement,
    Signed,
}

#[derive(Args, Debug, Serialize)]
pub struct IdentitiesArgs {
    #[arg(long, value_enum)]
    pub family: Family,
    /// Largest total word length (family-specific default).
    #[arg(long)]
    pub max_degree: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub alphabet: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Trivial,
    Nontrivial,
}

#[derive(Args, Debug, Serialize)]
pub struct WitnessArgs {
    /// {"degree": p, "alphabet": m, "terms": [{"word": [..], "coeff": "a/b"}]}
    #[arg(long, value_name = "FILE")]
    pub poly: PathBuf,
    /// Fail unless the verdict matches.
    #[arg(long, value_enum)]
    pub expect: Option<Expect>,
}

#[derive(Args, Debug, Serialize)]
pub struct BracketArgs {
    /// Word such as `12` or `1,2,12`.
    #[arg(long)]
    pub word: String,
    /// Comma-separated point.
    #[arg(long, allow_hyphen_values = true)]
    pub at: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct FlowArgs {
    /// Generator index, 1-based.
    #[arg(long)]
    pub field: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub time: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub at: String,
}

#[derive(Args, Debug, Serialize)]
pub struct LimitArgs {
    #[arg(long)]
    pub word: String,
    /// ψ is this coordinate function (1-based).
    #[arg(long, default_value_t = 1)]
    pub psi: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub at: String,
    #[arg(long, default_value_t = 1e-3)]
    pub t_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub t_max: f64,
    #[arg(long, default_value_t = 9)]
    pub points: usize,
    /// Fail unless the log-log error slope is within `slope_tol` of this.
    #[arg(long)]
    pub expect_slope: Option<f64>,
    #[arg(long, default_value_t = 0.2)]
    pub slope_tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct EmapArgs {
    /// Frame words, e.g. `1,2,12`; the maximal frame when omitted.
    #[arg(long, value_delimiter = ',')]
    pub frame: Vec<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub center: String,
    #[arg(long)]
    pub radius: f64,
    /// Box coordinates h; zeros when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub h: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct BallboxArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub center: String,
    #[arg(long)]
    pub radius: f64,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.3)]
    pub eps: f64,
    /// Targets satisfy ρ̂(x, y) < c·ε^s·r.
    #[arg(long, default_value_t = 0.05)]
    pub c: f64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Box radius for the Jacobian comparability probe.
    #[arg(long, default_value_t = 0.2)]
    pub bound: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct DistanceArgs {
    /// fl, cc or rho; all three when omitted.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub from: String,
    #[arg(long, allow_hyphen_values = true)]
    pub to: String,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MembershipArg {
    Rho,
    Cc,
}

#[derive(Args, Debug, Serialize)]
pub struct DoublingArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub center: String,
    #[arg(long)]
    pub radius: f64,
    #[arg(long, default_value_t = 200_000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = MembershipArg::Rho)]
    pub membership: MembershipArg,
    /// Fail unless the ratio is within `rel_tol` of this value.
    #[arg(long)]
    pub expect: Option<f64>,
    #[arg(long, default_value_t = 0.15)]
    pub rel_tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct PoincareArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub center: String,
    #[arg(long, default_value_t = 0.5)]
    pub radius: f64,
    #[arg(long, default_value_t = 2.0)]
    pub enlarge: f64,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct PinvArgs {
    #[arg(long, value_name = "FILE")]
    pub matrix: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub rhs: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Error ‖x_LS − x_λ‖ over λ ∈ [1e-6, 1e-2].
    #[arg(long)]
    pub lambda_sweep: bool,
    #[arg(long, default_value_t = 9)]
    pub sweep_points: usize,
    /// Fail unless the sweep slope is within 0.1 of this.
    #[arg(long)]
    pub expect_slope: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct SuiteArgs {
    /// Smaller sample counts for the statistical criteria.
    #[arg(long)]
    pub quick: bool,
    /// Only these criteria (1-based numbers).
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<usize>,
}

/// A run that ended without a verdict.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(m: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: m.into(),
        }
    }

    /// A computation that could not finish counts as a failed check.
    pub fn runtime(m: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: m.into(),
        }
    }
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let cfg = RunConfig::resolve(&cli.global)?;
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Failure::runtime(e.to_string()))?;
    }
    let args = serde_json::to_value(&cli.command).map_err(|e| Failure::runtime(e.to_string()))?;
    let (name, out) = match &cli.command {
        Command::PiTable(a) => ("pi-table", commands::pi_table(a)?),
        Command::Identities(a) => ("identities", commands::identities(a)?),
        Command::Witness(a) => ("witness", commands::witness(a)?),
        Command::Bracket(a) => ("bracket", commands::bracket(&cfg, a)?),
        Command::Flow(a) => ("flow", commands::flow(&cfg, a)?),
        Command::LimitCheck(a) => ("limit-check", commands::limit_check(&cfg, a)?),
        Command::Emap(a) => ("emap", commands::emap(&cfg, a)?),
        Command::Ballbox(a) => ("ballbox", commands::ballbox(&cfg, a)?),
        Command::Distance(a) => ("distance", commands::distance(&cfg, a)?),
        Command::Doubling(a) => ("doubling", commands::doubling(&cfg, a)?),
        Command::Poincare(a) => ("poincare", commands::poincare(&cfg, a)?),
        Command::Pinv(a) => ("pinv", commands::pinv(a)?),
        Command::Suite(a) => ("suite", suite::run(&cfg, a)?),
    };
    report::emit(&cfg, name, &args, &out)?;
    Ok(out.passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("liebox: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
