//! Command-line front end: `analyze`, `coverage` and `simulate`.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 when the data or the
//! chosen method fails. Reports go to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::aggregate::{
    ingest, read_csv, read_kdd, summarize, write_csv, AggregateError, ObservationLine,
};
use crate::bootstrap::{mixed_ci, quantile_ci, run_online_bootstrap, BootstrapError};
use crate::clt::{clt_ci, two_sided_multiplier, CiReport, CltError, Method};
use crate::harness::{
    assign_group, blank_split, naive_display_variance, records_from_aggregates, run_coverage,
    CoverageConfig, CoverageSource, HarnessError, SyntheticPopulationSpec,
};
use crate::model::{DesignParams, Group, MetricKind, ModelError};

const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Clt(#[from] CltError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("UnsupportedCombination: method {method} cannot produce {kind} intervals")]
    Unsupported { method: Method, kind: MetricKind },
    #[error("IoError: {0}")]
    Io(#[from] io::Error),
    #[error("WorkerPool: {0}")]
    Pool(String),
}

#[derive(Debug, Parser)]
#[command(name = "abci", version, about = "Confidence intervals for A/B-test metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute a confidence interval for one dataset.
    Analyze(AnalyzeArgs),
    /// Score interval coverage over simulated blank A/B tests.
    Coverage(CoverageArgs),
    /// Write a synthetic dataset as `user_id,group,x,y` CSV.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FormatArg {
    Csv,
    KddTsv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MetricArg {
    SumDiff,
    SumRatio,
    RatioDiff,
    RatioRel,
}

impl From<MetricArg> for MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::SumDiff => MetricKind::SumDiff,
            MetricArg::SumRatio => MetricKind::SumRatio,
            MetricArg::RatioDiff => MetricKind::RatioDiff,
            MetricArg::RatioRel => MetricKind::RatioOfRatios,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Clt,
    Bootstrap,
    BootstrapClt,
    NaiveDisplay,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Clt => Method::Clt,
            MethodArg::Bootstrap => Method::BootstrapQuantile,
            MethodArg::BootstrapClt => Method::BootstrapClt,
            MethodArg::NaiveDisplay => Method::NaiveDisplay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum OutputArg {
    Json,
    Csv,
}

/// Group of every KDD line, or a salted split by user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum KddGroupArg {
    A,
    B,
    Split,
}

fn parse_level(s: &str) -> Result<f64, String> {
    let q: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(format!("confidence level {q} must lie in (0, 1)"))
    }
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&a) {
        Ok(a)
    } else {
        Err(format!("size ratio {a} must lie in [0, 1]"))
    }
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Dataset path (`-` for stdin).
    #[arg(long = "input", value_name = "PATH")]
    input_flag: Option<PathBuf>,
    /// Dataset path, as an alternative to `--input`.
    #[arg(value_name = "INPUT", conflicts_with = "input_flag")]
    input_pos: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Group assigned to KDD-style lines.
    #[arg(long = "kdd-group", value_enum, default_value_t = KddGroupArg::Split)]
    kdd_group: KddGroupArg,
}

impl InputArgs {
    fn path(&self) -> Option<&PathBuf> {
        self.input_flag.as_ref().or(self.input_pos.as_ref())
    }
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value_t = MetricArg::RatioDiff)]
    metric: MetricArg,
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    level: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::BootstrapClt)]
    method: MethodArg,
    /// Bootstrap replicates M.
    #[arg(long, default_value_t = 10)]
    bootstraps: usize,
    #[arg(long = "alpha-a", default_value_t = 0.5, value_parser = parse_ratio)]
    alpha_a: f64,
    #[arg(long = "alpha-b", default_value_t = 0.5, value_parser = parse_ratio)]
    alpha_b: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OutputArg::Json)]
    output: OutputArg,
    /// Also write the bootstrap replicates as JSON to this path.
    #[arg(long = "bootstrap-out", value_name = "PATH")]
    bootstrap_out: Option<PathBuf>,
    /// Worker threads (0 = one per core). Does not affect results.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct CoverageArgs {
    /// Dataset to re-split; the default synthetic population otherwise.
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value_t = MetricArg::RatioDiff)]
    metric: MetricArg,
    /// Confidence levels, comma separated or repeated.
    #[arg(long = "level", value_delimiter = ',', value_parser = parse_level,
          default_values_t = vec![0.5, 0.8, 0.9, 0.95, 0.99])]
    levels: Vec<f64>,
    #[arg(long, value_enum, default_value_t = MethodArg::BootstrapClt)]
    method: MethodArg,
    #[arg(long, default_value_t = 10)]
    bootstraps: usize,
    #[arg(long = "alpha-a", default_value_t = 0.5, value_parser = parse_ratio)]
    alpha_a: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Number of blank tests.
    #[arg(long, default_value_t = 500)]
    tests: usize,
    /// Users in the synthetic population (ignored with an input dataset).
    #[arg(long, default_value_t = 50_000)]
    users: usize,
    #[arg(long, value_enum, default_value_t = OutputArg::Csv)]
    output: OutputArg,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 50_000)]
    users: usize,
    #[arg(long = "alpha-a", default_value_t = 0.5, value_parser = parse_ratio)]
    alpha_a: f64,
    #[arg(long = "alpha-b", default_value_t = 0.5, value_parser = parse_ratio)]
    alpha_b: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Destination file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// Effective configuration of a run, echoed in every JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub input: Option<String>,
    pub format: Option<&'static str>,
    pub kdd_group: Option<&'static str>,
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub kind: MetricKind,
    pub levels: Vec<f64>,
    pub method: Method,
    pub bootstraps: usize,
    pub seed: u64,
    pub tests: Option<usize>,
    pub users: Option<usize>,
    pub output: &'static str,
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    #[serde(flatten)]
    report: &'a CiReport,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct CoverageReport<'a> {
    #[serde(flatten)]
    result: &'a crate::harness::CoverageResult,
    config: &'a RunConfig,
}

fn format_name(f: FormatArg) -> &'static str {
    match f {
        FormatArg::Csv => "csv",
        FormatArg::KddTsv => "kdd-tsv",
    }
}

fn output_name(o: OutputArg) -> &'static str {
    match o {
        OutputArg::Json => "json",
        OutputArg::Csv => "csv",
    }
}

fn kdd_group_name(g: KddGroupArg) -> &'static str {
    match g {
        KddGroupArg::A => "A",
        KddGroupArg::B => "B",
        KddGroupArg::Split => "split",
    }
}

fn open_input(path: &PathBuf) -> Result<Box<dyn Read>, CliError> {
    if path.as_os_str() == "-" {
        Ok(Box::new(io::stdin().lock()))
    } else {
        Ok(Box::new(BufReader::new(File::open(path)?)))
    }
}

fn read_lines(
    input: &InputArgs,
    path: &PathBuf,
    seed: u64,
    alpha_a: f64,
) -> Result<Vec<ObservationLine>, CliError> {
    let reader = open_input(path)?;
    let lines = match input.format {
        FormatArg::Csv => read_csv(reader)?,
        FormatArg::KddTsv => {
            let group = input.kdd_group;
            read_kdd(reader, |user| match group {
                KddGroupArg::A => Group::A,
                KddGroupArg::B => Group::B,
                KddGroupArg::Split => blank_split(user, seed, alpha_a),
            })?
        }
    };
    Ok(lines)
}

fn naive_display_ci(
    lines: &[ObservationLine],
    kind: MetricKind,
    level: f64,
) -> Result<CiReport, CliError> {
    if kind != MetricKind::RatioDiff {
        return Err(CliError::Unsupported {
            method: Method::NaiveDisplay,
            kind,
        });
    }
    let users = ingest(lines)?;
    let mut sums = [0.0f64; 4];
    for u in &users {
        match u.group {
            Group::A => {
                sums[0] += u.x_sum;
                sums[1] += u.y_sum;
            }
            Group::B => {
                sums[2] += u.x_sum;
                sums[3] += u.y_sum;
            }
            Group::Unassigned => {}
        }
    }
    let ctr_a = sums[0] / sums[1];
    let ctr_b = sums[2] / sums[3];
    let sd = naive_display_variance(ctr_a, sums[1], ctr_b, sums[3])?.sqrt();
    let estimate = ctr_b - ctr_a;
    let half = two_sided_multiplier(level)? * sd;
    Ok(CiReport {
        kind,
        estimate,
        lo: estimate - half,
        hi: estimate + half,
        level,
        n: users.len() as u64,
        method: Method::NaiveDisplay,
        m_replicates: None,
        seed: None,
        flags: vec![],
    })
}

fn report_csv(r: &CiReport) -> String {
    let flags: Vec<String> = r
        .flags
        .iter()
        .map(|f| serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        .collect();
    format!(
        "kind,estimate,lo,hi,level,n,method,m_replicates,seed,flags\n{},{},{},{},{},{},{},{},{},{}\n",
        r.kind,
        r.estimate,
        r.lo,
        r.hi,
        r.level,
        r.n,
        r.method,
        r.m_replicates.map(|m| m.to_string()).unwrap_or_default(),
        r.seed.map(|s| s.to_string()).unwrap_or_default(),
        flags.join(";")
    )
}

fn analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let path = args
        .input
        .path()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no input dataset given"))?;
    let kind: MetricKind = args.metric.into();
    let method: Method = args.method.into();
    let design = DesignParams::new(args.alpha_a, args.alpha_b)?;
    let lines = read_lines(&args.input, path, args.seed, args.alpha_a)?;

    let mut report = match method {
        Method::Clt => {
            let users = ingest(&lines)?;
            clt_ci(kind, &summarize(&users, &design)?, args.level)?
        }
        Method::BootstrapQuantile | Method::BootstrapClt => {
            let dist = run_online_bootstrap(&lines, design, kind, args.bootstraps, args.seed)?;
            if let Some(dump) = &args.bootstrap_out {
                let mut f = File::create(dump)?;
                serde_json::to_writer_pretty(&mut f, &dist).map_err(io::Error::from)?;
                writeln!(f)?;
            }
            if method == Method::BootstrapQuantile {
                quantile_ci(&dist, args.level)?
            } else {
                let estimate = dist
                    .point_estimate
                    .ok_or(BootstrapError::EmptyDistribution)?;
                mixed_ci(estimate, &dist, args.level)?
            }
        }
        Method::NaiveDisplay => naive_display_ci(&lines, kind, args.level)?,
    };
    report.seed = Some(args.seed);

    let config = RunConfig {
        command: "analyze",
        input: Some(path.display().to_string()),
        format: Some(format_name(args.input.format)),
        kdd_group: (args.input.format == FormatArg::KddTsv)
            .then(|| kdd_group_name(args.input.kdd_group)),
        alpha_a: args.alpha_a,
        alpha_b: args.alpha_b,
        kind,
        levels: vec![args.level],
        method,
        bootstraps: args.bootstraps,
        seed: args.seed,
        tests: None,
        users: None,
        output: output_name(args.output),
    };
    match args.output {
        OutputArg::Json => {
            serde_json::to_writer_pretty(
                &mut *out,
                &AnalyzeReport {
                    report: &report,
                    config: &config,
                },
            )
            .map_err(io::Error::from)?;
            writeln!(out)?;
        }
        OutputArg::Csv => out.write_all(report_csv(&report).as_bytes())?,
    }
    Ok(())
}

fn coverage(args: &CoverageArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let kind: MetricKind = args.metric.into();
    let method: Method = args.method.into();
    let (source, input, format) = match args.input.path() {
        Some(path) => {
            let lines = read_lines(&args.input, path, args.seed, args.alpha_a)?;
            let users = records_from_aggregates(&ingest(&lines)?);
            (
                CoverageSource::Users(users),
                Some(path.display().to_string()),
                Some(format_name(args.input.format)),
            )
        }
        None => (
            CoverageSource::Synthetic {
                spec: SyntheticPopulationSpec {
                    n_users: args.users,
                    ..Default::default()
                },
                seed: args.seed,
            },
            None,
            None,
        ),
    };
    let cfg = CoverageConfig {
        method,
        kind,
        levels: args.levels.clone(),
        num_tests: args.tests,
        seed: args.seed,
        replicates: args.bootstraps,
        alpha_a: args.alpha_a,
    };
    let result = run_coverage(&source, &cfg)?;
    let config = RunConfig {
        command: "coverage",
        users: input.is_none().then_some(args.users),
        input,
        kdd_group: (format == Some("kdd-tsv")).then(|| kdd_group_name(args.input.kdd_group)),
        format,
        alpha_a: args.alpha_a,
        alpha_b: 1.0 - args.alpha_a,
        kind,
        levels: args.levels.clone(),
        method,
        bootstraps: args.bootstraps,
        seed: args.seed,
        tests: Some(args.tests),
        output: output_name(args.output),
    };
    match args.output {
        OutputArg::Csv => out.write_all(result.to_csv().as_bytes())?,
        OutputArg::Json => {
            serde_json::to_writer_pretty(
                &mut *out,
                &CoverageReport {
                    result: &result,
                    config: &config,
                },
            )
            .map_err(io::Error::from)?;
            writeln!(out)?;
        }
    }
    Ok(())
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let design = DesignParams::new(args.alpha_a, args.alpha_b)?;
    let spec = SyntheticPopulationSpec {
        n_users: args.users,
        ..Default::default()
    };
    let users = spec.generate(args.seed)?;
    let lines: Vec<ObservationLine> = users
        .into_iter()
        .map(|u| {
            let group = assign_group(u.key, args.seed, &design);
            ObservationLine::new(u.user_id, group, u.x, u.y)
        })
        .collect();
    match &args.out {
        Some(path) => write_csv(io::BufWriter::new(File::create(path)?), &lines)?,
        None => write_csv(out, &lines)?,
    }
    Ok(())
}

fn with_workers<T: Send>(
    workers: usize,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Pool(e.to_string()))?
        .install(f)
}

/// Parse `argv` (program name first), run the command and return the exit
/// status. Reports are written to `out`, diagnostics to `err`.
pub fn run_command_with<I, T>(argv: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Analyze(a) => with_workers(a.workers, || analyze(a, out)),
        Command::Coverage(c) => with_workers(c.workers, || coverage(c, out)),
        Command::Simulate(s) => simulate(s, out),
    };
    match result.and_then(|_| out.flush().map_err(CliError::from)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

/// Entry point used by the binary: stdout for reports, stderr for errors.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = io::BufWriter::new(io::stdout());
    let code = run_command_with(argv, &mut out, &mut io::stderr());
    let _ = out.flush();
    code
}
