use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wbft_bench::report::{to_csv, to_text};
use wbft_bench::table1::{render, render_csv, table1_check};
use wbft_bench::{compare, load_suite, run_all, BenchError, Outcome, ScenarioSpec};
use wbft_core::consensus::Registry;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Parser)]
#[command(
    name = "wbft-bench",
    about = "Run consensus scenarios over the simulated shared channel"
)]
struct Cli {
    /// Overrides the seed of every scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Writes output here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Runs one scenario file.
    Run { file: PathBuf },
    /// Runs every scenario file in a directory.
    Suite { dir: PathBuf },
    /// Checks per-node message counts of each component.
    Table1 {
        #[arg(long, value_delimiter = ',', default_value = "4,7,10")]
        n: Vec<usize>,
    },
    /// Runs two scenarios that differ only in batching and prints cost factors.
    Compare { a: PathBuf, b: PathBuf },
}

enum Failure {
    Error(BenchError),
    Check,
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        Failure::Error(e)
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), BenchError> {
    match out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| BenchError::Io(format!("{}: {e}", p.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ScenarioSpec, BenchError> {
    let mut spec = ScenarioSpec::load(path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

/// Writes the trace of each failed run and reports whether all passed.
fn check_outcomes(cli: &Cli, outcomes: &[Outcome]) -> Result<bool, BenchError> {
    let dir = cli
        .out
        .as_ref()
        .and_then(|p| p.parent())
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut ok = true;
    for o in outcomes {
        if let wbft_bench::Safety::Fail(reason) = &o.report.safety {
            ok = false;
            let path = dir.join(format!("{}-seed{}.trace", o.report.scenario, o.report.seed));
            std::fs::write(&path, o.trace_text())
                .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
            eprintln!(
                "safety violation in {}: {reason}\ncounterexample trace: {}",
                o.report.scenario,
                path.display()
            );
        }
    }
    Ok(ok)
}

fn reports(cli: &Cli, outcomes: &[Outcome]) -> Result<(), Failure> {
    let list: Vec<_> = outcomes.iter().map(|o| o.report.clone()).collect();
    let text = match cli.format {
        Format::Csv => to_csv(&list),
        Format::Text => to_text(&list),
    };
    emit(&cli.out, &text)?;
    if check_outcomes(cli, outcomes)? {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let registry = Registry::builtin();
    match &cli.cmd {
        Cmd::Run { file } => {
            let spec = load(file, cli.seed)?;
            let outcomes = run_all(&[spec], &registry)?;
            reports(cli, &outcomes)
        }
        Cmd::Suite { dir } => {
            let specs: Vec<ScenarioSpec> = load_suite(dir)?
                .into_iter()
                .map(|(_, mut s)| {
                    if let Some(seed) = cli.seed {
                        s.seed = seed;
                    }
                    s
                })
                .collect();
            let outcomes = run_all(&specs, &registry)?;
            reports(cli, &outcomes)
        }
        Cmd::Table1 { n } => {
            let cells = table1_check(n, &registry)?;
            let text = match cli.format {
                Format::Csv => render_csv(&cells),
                Format::Text => render(&cells),
            };
            emit(&cli.out, &text)?;
            if cells.iter().all(|c| c.pass()) {
                Ok(())
            } else {
                for c in cells.iter().filter(|c| !c.pass()) {
                    eprintln!(
                        "mismatch: n={} row={} column={} expected={} observed={:?}",
                        c.n,
                        c.row.component(),
                        c.column.name(),
                        c.expected,
                        c.observed
                    );
                }
                Err(Failure::Check)
            }
        }
        Cmd::Compare { a, b } => {
            let (a, b) = (load(a, cli.seed)?, load(b, cli.seed)?);
            let (cmp, outcomes) = compare(&a, &b, &registry)?;
            let text = match cli.format {
                Format::Csv => cmp.csv(),
                Format::Text => cmp.text(),
            };
            emit(&cli.out, &text)?;
            if check_outcomes(cli, &outcomes)? {
                Ok(())
            } else {
                Err(Failure::Check)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(Failure::Check) => ExitCode::from(2),
    }
}
