use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tclsim::metrics::Settling;
use tclsim::oracle::run_oracles;
use tclsim::output::{read_power_csv, read_summary, render_summary, write_outputs};
use tclsim::runner::{recompute_stats, run_scenario, RunError};
use tclsim::scenario::Scenario;

/// Simulate populations of thermostatically controlled loads.
#[derive(Debug, Parser)]
#[command(name = "tclsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write power.csv / summary.txt.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run a scenario once per value of a dotted parameter key.
    Sweep {
        scenario: PathBuf,
        /// e.g. `population.n` or `noise.sigma`.
        #[arg(long)]
        param: String,
        #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the scenario's fleet against closed forms and brute-force
    /// estimates.
    Oracle { scenario: PathBuf },
    /// Recompute metrics from a saved run directory.
    Report { dir: PathBuf },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    Scenario::load(path).map_err(|e| Failure::Validation(e.to_string()))
}

fn default_out(scenario: &Scenario, path: &Path) -> PathBuf {
    scenario.output.dir.clone().unwrap_or_else(|| {
        let stem = scenario
            .name
            .clone()
            .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "run".into());
        PathBuf::from("out").join(stem)
    })
}

fn run_one(scenario: &Scenario, out: &Path) -> Result<tclsim::runner::RunOutput, Failure> {
    let result = run_scenario(scenario)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let extra = result.summary_extra(scenario);
    write_outputs(out, &result.trace, &result.stats, &extra, &result.per_tcl)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(result)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            threads,
        } => {
            let mut sc = load(&scenario)?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            if threads.is_some() {
                sc.simulation.threads = threads;
            }
            let out = out.unwrap_or_else(|| default_out(&sc, &scenario));
            let result = run_one(&sc, &out)?;
            print!("{}", render_summary(&result.stats, &result.summary_extra(&sc)));
            eprintln!("wrote {}", out.display());
        }
        Command::Sweep {
            scenario,
            param,
            values,
            out,
        } => {
            let sc = load(&scenario)?;
            let root = out.unwrap_or_else(|| default_out(&sc, &scenario));
            println!("{param},baseline_mean_mw,osc_amplitude_mw,settling_time_h,pulse_energy_mwh,residual_std_mw");
            for v in &values {
                let variant = sc
                    .with_override(&param, v)
                    .map_err(|e| Failure::Validation(format!("{param}={v}: {e}")))?;
                variant
                    .validate()
                    .map_err(|e| Failure::Validation(format!("{param}={v}: {e}")))?;
                let dir = root.join(format!("{param}={v}"));
                let r = run_one(&variant, &dir)?;
                let f = |x: Option<f64>| x.map_or("na".to_owned(), |x| format!("{x:.6}"));
                let settle = match r.stats.settling_time {
                    Some(Settling::Settled(h)) => format!("{h:.6}"),
                    Some(Settling::Unsettled) => "unsettled".into(),
                    None => "na".into(),
                };
                println!(
                    "{v},{},{},{settle},{},{}",
                    f(r.stats.baseline_mean),
                    f(r.stats.osc_amplitude),
                    f(r.stats.pulse_energy),
                    f(r.stats.residual_std)
                );
            }
        }
        Command::Oracle { scenario } => {
            let sc = load(&scenario)?;
            let checks = run_oracles(&sc)?;
            let mut failed = 0;
            for c in &checks {
                let verdict = if c.passed() { "ok" } else { "MISMATCH" };
                if !c.passed() {
                    failed += 1;
                }
                println!(
                    "{:<16} expected {:>12.6} measured {:>12.6} rel_err {:.4} (tol {}) {verdict}",
                    c.name,
                    c.expected,
                    c.measured,
                    c.rel_error(),
                    c.rel_tol
                );
            }
            if failed > 0 {
                return Err(Failure::Runtime(format!("{failed} oracle check(s) failed")));
            }
        }
        Command::Report { dir } => {
            let trace = read_power_csv(&dir.join("power.csv"))
                .map_err(|e| Failure::Validation(e.to_string()))?;
            let saved = read_summary(&dir.join("summary.txt"))
                .map_err(|e| Failure::Validation(e.to_string()))?;
            let num = |k: &str| saved.get(k).and_then(|v| v.parse::<f64>().ok());
            let window = saved.get("residual_window_h").and_then(|v| {
                let (a, b) = v.split_once(':')?;
                Some((a.parse().ok()?, b.parse().ok()?))
            });
            let stats = recompute_stats(
                &trace,
                num("event_t_h"),
                num("exclude_min").unwrap_or(tclsim::metrics::EXCLUDE_MARGIN_MIN),
                num("tolerance").unwrap_or(tclsim::metrics::DEFAULT_TOLERANCE),
                window,
            );
            let fresh = render_summary(&stats, &[]);
            print!("{fresh}");
            for line in fresh.lines() {
                if let Some((k, v)) = line.split_once('=') {
                    if let Some(old) = saved.get(k) {
                        if old != v {
                            eprintln!("note: {k} differs from saved value {old}");
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
