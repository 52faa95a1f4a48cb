use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ems_core::mission::{run_mission, MissionError};
use ems_core::scenario::Scenario;
use ems_core::selftest::{self, DEFAULT_SEED};
use ems_core::telemetry::write_trace;
use ems_service::{SessionConfig, SessionManager};

const EXIT_INVALID: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "ems", version, about = "Hybrid MPC energy management for a shipboard DC microgrid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a mission to completion and write its trace and metrics.
    Run {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// CSV trace output.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// JSON metrics output; printed to stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Parse and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run the solver, model and mission checks.
    Selftest {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Start the HTTP service with one session already running.
    Serve {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

fn load(path: Option<&PathBuf>) -> Result<Scenario, ExitCode> {
    match path {
        None => Ok(Scenario::default_mission()),
        Some(p) => Scenario::from_path(p).map_err(|e| {
            eprintln!("{}: {e}", p.display());
            ExitCode::from(EXIT_INVALID)
        }),
    }
}

fn run(scenario: Option<PathBuf>, trace: Option<PathBuf>, metrics: Option<PathBuf>) -> Result<(), ExitCode> {
    let scenario = load(scenario.as_ref())?;
    let out = run_mission(&scenario).map_err(|e| {
        eprintln!("mission failed: {e}");
        match e {
            MissionError::Setup(_) => ExitCode::from(EXIT_INVALID),
            _ => ExitCode::from(EXIT_RUNTIME),
        }
    })?;
    if let Some(p) = &trace {
        write_trace(&out.trace, p).map_err(|e| runtime_error("cannot write trace", &e))?;
    }
    let json = serde_json::to_string_pretty(&out.metrics).expect("metrics serialize");
    match &metrics {
        Some(p) => std::fs::write(p, json + "\n").map_err(|e| runtime_error("cannot write metrics", &e))?,
        None => println!("{json}"),
    }
    log::info!("{} frames in {:.3} s", out.trace.len(), out.metrics.wall_time);
    Ok(())
}

fn serve(scenario: Option<PathBuf>, port: u16, speed: f64) -> Result<(), ExitCode> {
    let scenario = load(scenario.as_ref())?;
    let manager = Arc::new(SessionManager::new());
    let id = manager.start(&scenario, SessionConfig { speed, ..SessionConfig::default() }).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(EXIT_INVALID)
    })?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| runtime_error("runtime", &e))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await.map_err(|e| runtime_error("bind", &e))?;
        let addr = listener.local_addr().map_err(|e| runtime_error("bind", &e))?;
        println!("listening on http://{addr}, session {id}");
        ems_service::serve(listener, manager, scenario).await.map_err(|e| runtime_error("serve", &e))
    })
}

fn runtime_error(what: &str, e: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("{what}: {e}");
    ExitCode::from(EXIT_RUNTIME)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Command::Run { scenario, trace, metrics } => run(scenario, trace, metrics),
        Command::Validate { scenario } => load(Some(&scenario)).map(|_| println!("{}: ok", scenario.display())),
        Command::Selftest { seed } => {
            let outcomes = selftest::run_all(seed);
            for o in &outcomes {
                println!("{}", o.line());
            }
            if outcomes.iter().all(|o| o.passed) {
                Ok(())
            } else {
                Err(ExitCode::from(EXIT_INVALID))
            }
        }
        Command::Serve { scenario, port, speed } => serve(scenario, port, speed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
