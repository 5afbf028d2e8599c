use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use igr_core::io::{
    instance_from_json, instance_to_json, read_environment_csv, read_environment_dir, write_environment_dir,
    OracleJson, WeightsJson,
};
use igr_core::lab::{
    enumerate_invariant_sets, maximum_invariant_sets, parse_dimacs, reduce_3sat, verify_parsimony, EnumerateOptions,
};
use igr_core::pipeline::{igr_fit, rate_experiment, GridConfig};
use igr_core::scm::ex3_1_shifted_environment;
use igr_core::{
    make_example, moments_from_samples, population_moments, random_scm, sample, weight_table, EnvMoments, ExampleName,
    IgrError, IndexSet, LinearScm, MultiEnvDataset, PenalizedProblem, ScmRegime, WeightConvention,
};

#[derive(Parser)]
#[command(name = "igr", version, about = "Invariance-guided regression and invariance-lab tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grid search over (gamma, lambda) with validation-based selection.
    Fit(FitArgs),
    /// Invariance weights of every covariate.
    Weights(WeightsArgs),
    /// Solution path over a gamma grid at fixed lambda.
    Path(PathArgs),
    /// Sample per-environment CSVs from a worked example or a random SCM.
    Synth(SynthArgs),
    /// Compile a DIMACS 3-CNF formula into an invariance instance.
    ReduceSat(ReduceArgs),
    /// List the invariant sets of an instance.
    EnumerateInvariant(EnumerateArgs),
    /// Compare satisfying assignments with invariant sets of the reduced instance.
    VerifyParsimony(ParsimonyArgs),
    /// Estimation error against the population target over growing n.
    RateExp(RateArgs),
}

#[derive(Args)]
struct GridArgs {
    /// JSON grid configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
    gamma_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
    lambda_grid: Option<Vec<f64>>,
    /// Scale every covariate to unit variance before fitting.
    #[arg(long)]
    normalize: bool,
    /// Keep raw (uncentered) data.
    #[arg(long)]
    no_center: bool,
    /// `squared` or `sqrt`.
    #[arg(long)]
    convention: Option<WeightConvention>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
}

impl GridArgs {
    fn resolve(&self) -> Result<GridConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_str(&read(p)?).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?,
            None => GridConfig::default(),
        };
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(g) = &self.gamma_grid {
            cfg.gammas = g.clone();
        }
        if let Some(l) = &self.lambda_grid {
            cfg.lambdas = l.clone();
        }
        cfg.normalize |= self.normalize;
        if self.no_center {
            cfg.center = false;
        }
        if let Some(c) = self.convention {
            cfg.convention = c;
        }
        if let Some(t) = self.tol {
            cfg.solver.tol = t;
        }
        if let Some(s) = self.max_sweeps {
            cfg.solver.max_sweeps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FitArgs {
    /// Directory with one CSV per training environment.
    #[arg(long)]
    train: PathBuf,
    /// Validation CSV, or a directory of them.
    #[arg(long)]
    valid: PathBuf,
    /// Optional directory of test environments for out-of-sample metrics.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Moments come either from data or from a worked example's population.
#[derive(Args)]
struct Source {
    #[arg(long, conflicts_with = "example", required_unless_present = "example")]
    train: Option<PathBuf>,
    /// ex2_1, ex2_2 or ex3_1, evaluated on population moments.
    #[arg(long)]
    example: Option<ExampleName>,
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, conflicts_with = "random_d", required_unless_present = "random_d")]
    example: Option<ExampleName>,
    /// Append the shifted test environment (ex3_1 only).
    #[arg(long, requires = "example")]
    shifted: bool,
    /// Sample only the shifted environment (ex3_1 only).
    #[arg(long, requires = "example", conflicts_with = "shifted")]
    shifted_only: bool,
    /// Dimension of a random SCM.
    #[arg(long)]
    random_d: Option<usize>,
    /// general, block-orthogonal:<k> or no-ancestor-intervention.
    #[arg(long, default_value = "general")]
    regime: ScmRegime,
    #[arg(long, default_value_t = 3)]
    envs: usize,
    #[arg(long, default_value_t = 0)]
    scm_seed: u64,
    /// Rows per environment.
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReduceArgs {
    /// DIMACS CNF file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    /// Instance JSON.
    #[arg(long)]
    input: PathBuf,
    /// Largest d scanned without the row-sum shortcut.
    #[arg(long, default_value_t = igr_core::lab::invariance::DEFAULT_ENUMERATION_CAP)]
    cap: usize,
    /// Also report the maximum invariant sets.
    #[arg(long)]
    maximum: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParsimonyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RateArgs {
    #[arg(long, default_value = "ex3_1")]
    example: ExampleName,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    gamma: f64,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [250, 1000, 4000])]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Core(IgrError),
    /// A check ran to completion and did not hold.
    Failed,
}

impl CliError {
    fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) | CliError::Input(_) => 2,
        }
    }
}

impl From<IgrError> for CliError {
    fn from(e: IgrError) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
            CliError::Failed => f.write_str("check failed"),
        }
    }
}

fn read(p: &Path) -> Result<String, CliError> {
    fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(IgrError::from)?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::input(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_dataset(p: &Path) -> Result<MultiEnvDataset, CliError> {
    if !p.exists() {
        return Err(CliError::input(format!("{} does not exist", p.display())));
    }
    if p.is_dir() {
        Ok(read_environment_dir(p)?)
    } else {
        Ok(MultiEnvDataset::new(vec![read_environment_csv(p)?])?)
    }
}

fn source_moments(src: &Source, cfg: &GridConfig) -> Result<EnvMoments<f64>, CliError> {
    match (&src.train, src.example) {
        (Some(dir), _) => {
            let opts = igr_core::MomentOptions { center: cfg.center, normalize: cfg.normalize };
            Ok(moments_from_samples(&load_dataset(dir)?, &opts)?)
        }
        (None, Some(name)) => Ok(population_moments(&make_example(name))?.moments.to_f64()),
        (None, None) => Err(CliError::input("either --train or --example is required")),
    }
}

fn fit(a: &FitArgs) -> Result<(), CliError> {
    let cfg = a.grid.resolve()?;
    let train = load_dataset(&a.train)?;
    let valid = load_dataset(&a.valid)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    let report = igr_fit(&train, &valid, test.as_ref(), &cfg)?;
    emit(&report, a.out.as_deref())
}

fn weights(a: &WeightsArgs) -> Result<(), CliError> {
    let cfg = a.grid.resolve()?;
    let json = match (&a.source.train, a.source.example) {
        // exact population weights for the worked examples
        (None, Some(name)) => {
            let m = population_moments(&make_example(name))?.moments;
            WeightsJson::from_table(&weight_table(&m, cfg.k.min(m.d()))?.with_convention(cfg.convention))
        }
        _ => {
            let m = source_moments(&a.source, &cfg)?;
            WeightsJson::from_table(&weight_table(&m, cfg.k.min(m.d()))?.with_convention(cfg.convention))
        }
    };
    emit(&json, a.out.as_deref())
}

#[derive(Serialize)]
struct PathOutput {
    lambda: f64,
    #[serde(flatten)]
    path: igr_core::SolutionPath,
    wall_time_ms: f64,
}

fn path(a: &PathArgs) -> Result<(), CliError> {
    let cfg = a.grid.resolve()?;
    if !(a.lambda.is_finite() && a.lambda >= 0.0) {
        return Err(CliError::input("lambda must be a nonnegative number"));
    }
    let start = Instant::now();
    let m = source_moments(&a.source, &cfg)?;
    let w = weight_table(&m, cfg.k.min(m.d()))?.with_convention(cfg.convention);
    let mut gammas = cfg.gammas.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let path = PenalizedProblem::new(&m, &w)?.path(&gammas, a.lambda, &cfg.solver)?;
    let out = PathOutput { lambda: a.lambda, path, wall_time_ms: start.elapsed().as_secs_f64() * 1e3 };
    emit(&out, a.out.as_deref())
}

fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let scm: LinearScm<f64> = match (a.example, a.random_d) {
        (Some(name), _) => {
            let mut scm = make_example(name);
            if a.shifted || a.shifted_only {
                if name != ExampleName::Ex3_1 {
                    return Err(CliError::input("--shifted applies to ex3_1 only"));
                }
                scm = scm.with_environment(ex3_1_shifted_environment())?;
                if a.shifted_only {
                    scm = scm.select_environments(&[2])?;
                }
            }
            scm.to_f64()
        }
        (None, Some(d)) => random_scm(d, a.regime, a.envs, a.scm_seed)?,
        (None, None) => return Err(CliError::input("either --example or --random-d is required")),
    };
    let data = sample(&scm, a.n, a.seed)?;
    write_environment_dir(&a.out_dir, &data)?;
    let oracle = OracleJson::from_oracle(&population_moments(&scm)?);
    emit(&oracle, Some(&a.out_dir.join("oracle.json")))
}

fn reduce(a: &ReduceArgs) -> Result<(), CliError> {
    let f = parse_dimacs(&read(&a.input)?)?;
    let text = instance_to_json(&reduce_3sat(&f))?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::input(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EnumerateOutput {
    d: usize,
    /// `∅` is trivially invariant and never listed in `sets`.
    empty_set_invariant: bool,
    sets: Vec<IndexSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    maximum_sets: Option<Vec<IndexSet>>,
}

fn enumerate(a: &EnumerateArgs) -> Result<(), CliError> {
    let inst = instance_from_json(&read(&a.input)?)?;
    let opts = EnumerateOptions { cap: a.cap, ..Default::default() };
    let sets = enumerate_invariant_sets(inst.moments(), &opts)?;
    let maximum_sets = if a.maximum { Some(maximum_invariant_sets(inst.moments(), &opts)?) } else { None };
    emit(&EnumerateOutput { d: inst.d(), empty_set_invariant: true, sets, maximum_sets }, a.out.as_deref())
}

fn parsimony(a: &ParsimonyArgs) -> Result<(), CliError> {
    let f = parse_dimacs(&read(&a.input)?)?;
    let report = verify_parsimony(&f)?;
    emit(&report, a.out.as_deref())?;
    eprintln!(
        "{}: {} satisfying assignments, {} invariant sets",
        if report.pass { "PASS" } else { "FAIL" },
        report.sat_count,
        report.invariant_count
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Failed)
    }
}

fn rate(a: &RateArgs) -> Result<(), CliError> {
    let table = rate_experiment(&make_example(a.example), a.k, a.gamma, &a.n_grid, a.seeds)?;
    emit(&table, a.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Weights(a) => weights(a),
        Command::Path(a) => path(a),
        Command::Synth(a) => synth(a),
        Command::ReduceSat(a) => reduce(a),
        Command::EnumerateInvariant(a) => enumerate(a),
        Command::VerifyParsimony(a) => parsimony(a),
        Command::RateExp(a) => rate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("igr: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
