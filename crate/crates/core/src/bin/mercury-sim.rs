use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mercury_core::harness::{suite, sweep, Axis, RunReport, Scenario, World};

#[derive(Parser)]
#[command(name = "mercury-sim", about = "Deterministic simulator for enclave-operated cross-chain exchange")]
struct Cli {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Writes the report here instead of stdout.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    JsonLines,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one scenario file.
    Run {
        scenario: PathBuf,
        /// Writes both chains' event logs as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Runs a template once per value of one parameter.
    Sweep {
        /// Scenario file, or `builtin:<name>` for a bundled template.
        template: String,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<u64>,
    },
    /// Runs the named scenarios and the randomized fault suite.
    Check {
        /// Randomized seeds 1..=N.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
}

fn load(path: &Path) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Scenario::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn builtin(name: &str) -> Option<Scenario> {
    Some(match name {
        "happy-path" => suite::happy_path(),
        "all-suspended" => suite::all_suspended(),
        "f-crashed" => suite::f_crashed(3, 3),
        "amortization" => suite::amortization(),
        "checkpoint" => suite::checkpoint(),
        "htlc" => suite::htlc_swap(None),
        _ => return None,
    })
}

fn render(reports: &[RunReport], format: Format) -> String {
    match format {
        Format::JsonLines => reports.iter().map(RunReport::to_json_lines).collect(),
        Format::Table => reports.iter().map(RunReport::to_table).collect::<Vec<_>>().join("\n"),
    }
}

fn emit(cli: &Cli, text: &str) -> Result<(), String> {
    match &cli.report {
        Some(path) => fs::write(path, text).map_err(|e| format!("{}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main_inner(cli: &Cli) -> Result<bool, String> {
    match &cli.command {
        Command::Run { scenario, events } => {
            let mut s = load(scenario)?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let mut world = World::new(s).map_err(|e| e.to_string())?;
            world.run_to_end();
            if let Some(path) = events {
                fs::write(path, world.export_events()).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            let report = world.report();
            let mut text = render(std::slice::from_ref(&report), cli.format);
            if cli.format == Format::JsonLines && cli.report.is_some() {
                eprint!("{}", report.to_table());
            } else if cli.format == Format::JsonLines {
                text.push_str(&report.to_table());
            }
            emit(cli, &text)?;
            Ok(report.passed())
        }
        Command::Sweep { template, axis, values } => {
            let mut s = match template.strip_prefix("builtin:") {
                Some(name) => builtin(name).ok_or_else(|| format!("no builtin template {name:?}"))?,
                None => load(Path::new(template))?,
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let axis: Axis = axis.parse().map_err(|e: sweep::SweepError| e.to_string())?;
            let result = sweep(&s, axis, values).map_err(|e| e.to_string())?;
            let reports: Vec<RunReport> = result.reports.iter().map(|(_, r)| r.clone()).collect();
            let mut text = String::new();
            if cli.format == Format::JsonLines {
                text.push_str(&render(&reports, Format::JsonLines));
                for row in result.rows() {
                    text.push_str(&serde_json::json!({ "record": "amortization", "axis": axis, "row": row }).to_string());
                    text.push('\n');
                }
            }
            text.push_str(&result.table());
            emit(cli, &text)?;
            Ok(reports.iter().all(RunReport::passed))
        }
        Command::Check { seeds } => {
            let mut scenarios = suite::named();
            scenarios.extend((1..=*seeds).map(suite::randomized_seed));
            if let Some(seed) = cli.seed {
                for s in &mut scenarios {
                    s.seed = seed;
                }
            }
            let reports: Vec<RunReport> = scenarios
                .into_par_iter()
                .map(|s| World::new(s).map(World::run).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            let failed: Vec<&RunReport> = reports.iter().filter(|r| !r.passed()).collect();
            let mut text = match cli.format {
                Format::JsonLines => render(&reports, Format::JsonLines),
                Format::Table => String::new(),
            };
            for r in &reports {
                text.push_str(&format!(
                    "{:<40} {:>4} deposits {:>3} confirmed {:>3} refunded {:>3} pending  {}\n",
                    r.scenario,
                    r.deposits.len(),
                    r.count(mercury_core::harness::DepositOutcome::Confirmed),
                    r.count(mercury_core::harness::DepositOutcome::Refunded),
                    r.count(mercury_core::harness::DepositOutcome::PendingAtHorizon),
                    if r.passed() { "PASS" } else { "FAIL" }
                ));
            }
            text.push_str(&format!("{} scenarios, {} failed\n", reports.len(), failed.len()));
            for r in failed {
                text.push_str(&r.to_table());
            }
            emit(cli, &text)?;
            Ok(reports.iter().all(RunReport::passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
