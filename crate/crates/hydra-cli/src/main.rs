//! `hydra-sim`: run, sweep and replay simulator scenarios.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hydra::harness::config::{Mode, ScenarioConfig};
use hydra::harness::metrics::RunReport;
use hydra::harness::report::emit_report;
use hydra::harness::scenario::{first_divergence, format_trace, run_scenario, run_traced, sweep, sweep_grid};

#[derive(Parser)]
#[command(name = "hydra-sim", version, about = "Deterministic multi-instance BFT simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and append its report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write the event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a grid over cross ratio, straggler factor and replica count.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1")]
        ratios: Vec<f64>,
        /// Straggler slowdown of replica 0; 1 means none.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        stragglers: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        ns: Vec<u32>,
    },
    /// Re-run a scenario and compare it with a recorded trace.
    ReplayTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
    },
}

fn load(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &RunReport) {
    println!(
        "{} mode={} tput={:.1}tps lat={:.2}ms [tx {:.2} | cons {:.2} | ord {:.2} | exec {:.2}] ok={} fail={} submitted={} aborts={} deadlocks={}",
        r.config_hash,
        r.mode,
        r.throughput_tps,
        r.mean_latency_ms,
        r.transmission_ms,
        r.consensus_ms,
        r.ordering_ms,
        r.execution_ms,
        r.replied_success,
        r.replied_failure,
        r.submitted,
        r.aborts,
        r.deadlocks
    );
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { common, out, trace } => {
            let cfg = load(&common)?;
            let res = if trace.is_some() { run_traced(&cfg)? } else { run_scenario(&cfg)? };
            emit_report(&res.report, &out)?;
            print_report(&res.report);
            if let Some(t) = trace {
                write(&t, &format_trace(&res.trace))?;
            }
        }
        Cmd::Sweep {
            common,
            out,
            ratios,
            stragglers,
            ns,
        } => {
            let base = load(&common)?;
            let grid = sweep_grid(&base, &ratios, &stragglers, &ns);
            for (cfg, res) in grid.iter().zip(sweep(&grid)) {
                let rep = res.with_context(|| format!("scenario {}", cfg.config_hash()))?;
                emit_report(&rep, &out)?;
                print_report(&rep);
            }
        }
        Cmd::ReplayTrace { common, trace } => {
            let cfg = load(&common)?;
            let expected = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let res = run_traced(&cfg)?;
            match first_divergence(&expected, &res.trace) {
                None => println!("trace matches ({} events)", res.trace.len()),
                Some((line, want, got)) => {
                    bail!("trace diverges at line {line}\n  recorded: {want}\n  replayed: {got}")
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
