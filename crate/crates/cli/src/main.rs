mod demo;
mod sweep;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use reveal_core::{run, ConfigError, RunReport, ScenarioConfig, Verdict};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ASSERT: u8 = 3;

#[derive(Parser)]
#[command(name = "reveal", version, about = "Relay detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its trace and report.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Line-delimited JSON trace output.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// JSON report output. Printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Exit with status 3 unless the run ends with this verdict.
        #[arg(long, value_enum)]
        assert_verdict: Option<VerdictName>,
    },
    /// Print the clock synchronization demonstration.
    SyncDemo,
    /// Run a scenario over a parameter range and print a CSV summary.
    Sweep {
        #[arg(value_enum)]
        param: sweep::Param,
        /// `a..b`, `a..=b`, `start:step:end` or a comma list.
        range: String,
        #[arg(long, default_value = "scenarios/fullduplex_attack.toml")]
        scenario: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// CSV output. Stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
}

#[derive(clap::Args, Clone, Copy, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Uniform receive-stamp jitter, ±n nanoseconds.
    #[arg(long)]
    jitter_ns: Option<i64>,
}

impl Overrides {
    fn apply(self, cfg: &mut ScenarioConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jitter_ns {
            cfg.traffic.stamp_jitter_ns = j;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerdictName {
    NoMim,
    HalfDuplex,
    FullDuplex,
    DoubleFullDuplex,
    Inconclusive,
}

impl VerdictName {
    fn holds(self, r: &RunReport) -> bool {
        let want = match self {
            VerdictName::NoMim => {
                return !r.verdicts.is_empty() && r.verdicts.iter().all(|v| v.verdict == Verdict::NoMimEvidence)
            }
            VerdictName::HalfDuplex => Verdict::HalfDuplexDetected,
            VerdictName::FullDuplex => Verdict::FullDuplexDetected,
            VerdictName::DoubleFullDuplex => Verdict::DoubleFullDuplexDetected,
            VerdictName::Inconclusive => Verdict::Inconclusive,
        };
        r.overall() == Some(want)
    }
}

enum Failure {
    Config(ConfigError),
    Assert(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    ScenarioConfig::from_toml(&text).map_err(Failure::Config)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_run(
    scenario: &Path,
    overrides: Overrides,
    trace: Option<&Path>,
    report: Option<&Path>,
    assert: Option<VerdictName>,
) -> Result<(), Failure> {
    let mut cfg = load(scenario)?;
    overrides.apply(&mut cfg);
    let t0 = Instant::now();
    let (sim, rep) = run(cfg, trace.is_some()).map_err(Failure::Config)?;
    eprintln!("{}: {} TTIs in {:.1} ms", rep.scenario, rep.ttis, t0.elapsed().as_secs_f64() * 1e3);
    if let Some(p) = trace {
        let mut w = create(p)?;
        sim.trace().write_to(&mut w).context("writing trace")?;
        w.flush().context("writing trace")?;
    }
    match report {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{}", rep.to_json()).context("writing report")?;
        }
        None => println!("{}", rep.to_json()),
    }
    for v in &rep.verdicts {
        eprintln!("  test {} {:?}: {:?}", v.test_id, v.test, v.verdict);
    }
    if let Some(a) = assert {
        if !a.holds(&rep) {
            let name = a.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
            return Err(Failure::Assert(format!("expected {name}, got {:?}", rep.overall())));
        }
    }
    Ok(())
}

fn cmd_validate(scenario: &Path) -> Result<(), Failure> {
    let cfg = load(scenario)?;
    println!("{}: ok ({} TTIs, seed {})", cfg.name, cfg.run_ttis, cfg.seed);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            scenario,
            overrides,
            trace,
            report,
            assert_verdict,
        } => cmd_run(&scenario, overrides, trace.as_deref(), report.as_deref(), assert_verdict),
        Command::SyncDemo => {
            demo::print(&mut std::io::stdout().lock())?;
            Ok(())
        }
        Command::Sweep {
            param,
            range,
            scenario,
            overrides,
            out,
        } => {
            let mut base = load(&scenario)?;
            overrides.apply(&mut base);
            let values = sweep::parse_range(&range).map_err(|e| Failure::Other(anyhow::anyhow!(e)))?;
            let rows = sweep::run_all(&base, param, &values).map_err(Failure::Config)?;
            match out {
                Some(p) => sweep::write_csv(create(&p)?, &rows)?,
                None => sweep::write_csv(std::io::stdout().lock(), &rows)?,
            }
            Ok(())
        }
        Command::Validate { scenario } => cmd_validate(&scenario),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Assert(m)) => {
            eprintln!("assertion failed: {m}");
            ExitCode::from(EXIT_ASSERT)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
