//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

fn parse_unit_interval(raw: &str) -> Result<f64, String> {
    let value: f64 = raw.parse().map_err(|_| format!("`{raw}` is not a number"))?;
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(format!("{value} is out of [0,1]"))
    }
}

fn parse_open_unit_interval(raw: &str) -> Result<f64, String> {
    let value: f64 = raw.parse().map_err(|_| format!("`{raw}` is not a number"))?;
    if value > 0.0 && value < 1.0 {
        Ok(value)
    } else {
        Err(format!("{value} is out of (0,1)"))
    }
}

fn parse_replications(raw: &str) -> Result<usize, String> {
    let value: usize = raw.parse().map_err(|_| format!("`{raw}` is not an integer"))?;
    if value >= 2 {
        Ok(value)
    } else {
        Err("at least 2 replications are required".into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "rctdesign",
    version,
    about = "Design toolkit for randomized trials reweighted to a target cohort"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a recruitment allocation from a target distribution and a
    /// variability profile.
    Allocate(AllocateArgs),
    /// Score and rank candidate trial allocations by deviation.
    Evaluate(EvaluateArgs),
    /// Estimate the variability profile from observational data.
    EstimateSigma(EstimateSigmaArgs),
    /// Run the seeded synthetic candidate sweep.
    SimulateSynthetic(SimulateSyntheticArgs),
    /// Run the seeded cost-constrained candidate sweep.
    SimulateCost(SimulateCostArgs),
    /// Run the semi-synthetic sweep over a class-size extract (or the
    /// bundled stand-in).
    SimulateStar(SimulateStarArgs),
    /// Fit a line to a previously written points file.
    Fit(FitArgs),
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Target distribution CSV (level,prob).
    #[arg(long)]
    pub f0: PathBuf,
    /// Variability profile CSV (level,sigma).
    #[arg(long)]
    pub sigma: PathBuf,
    /// Trial size; adds integer recruitment counts to the report.
    #[arg(long)]
    pub n1: Option<u64>,
    /// Compromise exponent: 1 = variance-minimizing, 0 = same precision.
    #[arg(long, value_parser = parse_unit_interval)]
    pub k: Option<f64>,
    /// Unit-cost CSV (level,cost); switches to the cost-aware optimum.
    #[arg(long, requires = "budget")]
    pub costs: Option<PathBuf>,
    /// Total recruitment budget.
    #[arg(long, requires = "costs")]
    pub budget: Option<f64>,
    /// Output file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Target distribution CSV (level,prob).
    #[arg(long)]
    pub f0: PathBuf,
    /// Variability profile CSV (level,sigma).
    #[arg(long)]
    pub sigma: PathBuf,
    /// Candidate allocation CSV, repeatable; `id=path` or bare path
    /// (file stem becomes the design id).
    #[arg(long = "candidate", required = true)]
    pub candidates: Vec<String>,
    /// Trial size for absolute variances.
    #[arg(long)]
    pub n1: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct EstimateSigmaArgs {
    /// Dataset CSV (unit_id,s,t,y,x...).
    #[arg(long)]
    pub data: PathBuf,
    /// Planned trial treatment probability, strictly inside (0,1).
    #[arg(long, value_parser = parse_open_unit_interval)]
    pub e: f64,
    /// Borrow pooled arm variances for cells with fewer than two units.
    #[arg(long)]
    pub pool: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct SimulateSyntheticArgs {
    /// Number of candidate designs.
    #[arg(long, default_value_t = 100)]
    pub designs: usize,
    /// Experiments per design.
    #[arg(long, value_parser = parse_replications, default_value = "1000")]
    pub reps: usize,
    /// Master seed (required: every random command is reproducible).
    #[arg(long)]
    pub seed: u64,
    /// Target cohort size.
    #[arg(long, default_value_t = 10_000)]
    pub n0: usize,
    /// Trial size per design.
    #[arg(long, default_value_t = 200)]
    pub n1: usize,
    /// Treatment probability.
    #[arg(long, value_parser = parse_open_unit_interval, default_value = "0.5")]
    pub e: f64,
    /// Points CSV output path.
    #[arg(long, default_value = "points.csv")]
    pub out_points: PathBuf,
    /// Fit JSON output path.
    #[arg(long, default_value = "fit.json")]
    pub out_fit: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateCostArgs {
    /// Unit-cost CSV (level,cost) over levels 1,2,3.
    #[arg(long)]
    pub costs: PathBuf,
    /// Total budget per design.
    #[arg(long)]
    pub budget: f64,
    #[arg(long, default_value_t = 100)]
    pub designs: usize,
    #[arg(long, value_parser = parse_replications, default_value = "1000")]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub n0: usize,
    #[arg(long, value_parser = parse_open_unit_interval, default_value = "0.5")]
    pub e: f64,
    #[arg(long, default_value = "points.csv")]
    pub out_points: PathBuf,
    #[arg(long, default_value = "fit.json")]
    pub out_fit: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateStarArgs {
    /// Extract CSV (treatment,race,urbanicity,score). Uses the bundled
    /// synthetic stand-in when omitted.
    #[arg(long)]
    pub star: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub candidates: usize,
    #[arg(long, default_value_t = 500)]
    pub n1: usize,
    #[arg(long, value_parser = parse_replications, default_value = "100")]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "points.csv")]
    pub out_points: PathBuf,
    #[arg(long, default_value = "fit.json")]
    pub out_fit: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Points CSV written by a simulate command.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
