//! `skyquil`: batch front end over the model pipeline.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use skyquil::config::PipelineConfig;
use skyquil::counterfactual::{EvalOrder, ScenarioName};
use skyquil::pipeline::{Pipeline, ReportKind, StageReport, TableFormat, Workspace, DEFAULT_BINS};
use skyquil::{Result, SkyError};

#[derive(Parser, Debug)]
#[command(name = "skyquil", version, about = "Airline network competition under carbon pricing and mergers")]
struct Cli {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every stage's artefacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset bundle to use instead of `<out>/data`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "SKYQUIL_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scenario {
    Base,
    Low,
    Med,
    High,
    Vh,
    Uh,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ordering {
    ProfitDesc,
    ProfitAsc,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Report {
    Welfare,
    Heatmap,
    Binscatter,
    AirlineBreakdown,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Generate,
    /// Estimate demand and marginal costs.
    Estimate,
    /// Bound fixed costs from observed network choices.
    Fixedcost,
    /// Draw fixed-cost shocks consistent with the observed networks.
    Rationalize {
        /// Simulation seeds per parameter draw.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run best-response network dynamics under a carbon-price scenario.
    Simulate {
        #[arg(long, value_enum)]
        scenario: Scenario,
        /// Airline orderings to run; repeat or comma-separate. Default: all.
        #[arg(long, value_enum, value_delimiter = ',')]
        ordering: Vec<Ordering>,
        /// Use the first N rationalized seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Screen and simulate a merger between two airlines.
    Merge {
        /// Two airline ids or codes, `A,B`.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        partners: Vec<String>,
        #[arg(long, value_enum, default_value_t = Scenario::Base)]
        scenario: Scenario,
        #[arg(long, value_enum, value_delimiter = ',')]
        ordering: Vec<Ordering>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Only the pricing-pressure screen and network expansion.
        #[arg(long)]
        screen_only: bool,
    },
    /// Tables built from simulation outputs.
    Report {
        #[arg(value_enum)]
        kind: Report,
        #[arg(long, value_enum, default_value_t = Scenario::High)]
        scenario: Scenario,
        /// Merger whose runs fill the heatmap's upper triangle.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        partners: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
}

impl From<Scenario> for ScenarioName {
    fn from(s: Scenario) -> Self {
        match s {
            Scenario::Base => ScenarioName::Base,
            Scenario::Low => ScenarioName::Low,
            Scenario::Med => ScenarioName::Med,
            Scenario::High => ScenarioName::High,
            Scenario::Vh => ScenarioName::Vh,
            Scenario::Uh => ScenarioName::Uh,
        }
    }
}

impl From<Ordering> for EvalOrder {
    fn from(o: Ordering) -> Self {
        match o {
            Ordering::ProfitDesc => EvalOrder::ProfitDesc,
            Ordering::ProfitAsc => EvalOrder::ProfitAsc,
            Ordering::Random => EvalOrder::Random,
        }
    }
}

impl From<Report> for ReportKind {
    fn from(r: Report) -> Self {
        match r {
            Report::Welfare => ReportKind::Welfare,
            Report::Heatmap => ReportKind::Heatmap,
            Report::Binscatter => ReportKind::Binscatter,
            Report::AirlineBreakdown => ReportKind::AirlineBreakdown,
        }
    }
}

fn pair(partners: &[String]) -> Result<Option<(&str, &str)>> {
    match partners {
        [] => Ok(None),
        [a, b] => Ok(Some((a.as_str(), b.as_str()))),
        _ => Err(SkyError::Validation {
            messages: vec![format!("--partners takes two airlines `A,B`, got {}", partners.join(","))],
        }),
    }
}

fn overrides(cfg: &mut PipelineConfig, ordering: &[Ordering], seeds: Option<usize>) {
    if !ordering.is_empty() {
        cfg.counterfactual.orderings = ordering.iter().map(|&o| o.into()).collect();
    }
    if let Some(n) = seeds {
        cfg.counterfactual.seeds = n;
    }
}

fn run(cli: Cli) -> Result<StageReport> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    match &cli.command {
        Command::Rationalize { seeds } => overrides(&mut cfg, &[], *seeds),
        Command::Simulate { ordering, seeds, .. } | Command::Merge { ordering, seeds, .. } => {
            overrides(&mut cfg, ordering, *seeds)
        }
        _ => {}
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| SkyError::domain(format!("thread pool: {e}")))?;
    }
    let mut ws = Workspace::new(&cli.out);
    if let Some(d) = &cli.data {
        ws = ws.with_data(d);
    }
    let format = match cli.format {
        Format::Csv => TableFormat::Csv,
        Format::Json => TableFormat::Json,
    };
    let p = Pipeline::new(ws, cfg).with_format(format);
    match cli.command {
        Command::Generate => p.generate(),
        Command::Estimate => p.estimate(),
        Command::Fixedcost => p.fixedcost(),
        Command::Rationalize { .. } => p.rationalize(),
        Command::Simulate { scenario, .. } => p.simulate(scenario.into()),
        Command::Merge {
            partners,
            scenario,
            screen_only,
            ..
        } => {
            let (a, b) = pair(&partners)?.ok_or_else(|| SkyError::Validation {
                messages: vec!["--partners is required".into()],
            })?;
            p.merge(a, b, scenario.into(), screen_only)
        }
        Command::Report {
            kind,
            scenario,
            partners,
            bins,
        } => p.report(kind.into(), scenario.into(), pair(&partners)?, bins),
    }
}

fn fail(kind: &str, message: &str, code: i32) -> ExitCode {
    let err = json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    eprintln!("{err}");
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim(), 2);
        }
    };
    let json_out = matches!(cli.format, Format::Json);
    match run(cli) {
        Ok(report) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let mut stdout = std::io::stdout().lock();
            if json_out {
                let outputs: Vec<&str> = report.manifest.outputs.iter().map(|d| d.path.as_str()).collect();
                let v = json!({
                    "command": report.command,
                    "dir": report.dir,
                    "outputs": outputs,
                    "summary": report.summary,
                });
                let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&v).expect("report serializes"));
            } else {
                let _ = writeln!(
                    stdout,
                    "{}: wrote {} files to {}",
                    report.command,
                    report.manifest.outputs.len(),
                    report.dir.display()
                );
                let _ = writeln!(
                    stdout,
                    "{}",
                    serde_json::to_string_pretty(&report.summary).expect("summary serializes")
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code()),
    }
}
