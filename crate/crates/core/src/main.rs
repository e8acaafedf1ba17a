use std::fs;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use delaytube::influence::{self, FilterConfig};
use delaytube::scenario::{builtin, run_scenario, Arm, Scenario};
use delaytube::vehicle::StepTrace;

#[derive(Parser)]
#[command(name = "delaytube", version, about = "Delay-aware tube MPC scenarios and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario under one arm and write logs, metrics and plots.
    Run {
        /// Scenario name (static_obstacle, overtaking, closed_track).
        scenario: String,
        #[arg(long, default_value = "influence")]
        arm: Arm,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scenario file; defaults to the shipped one of that name.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit with status 2 if the vehicle collides.
        #[arg(long)]
        require_safe: bool,
    },
    /// Fit the steering time constant to a recorded step (CSV with t, delta_cmd, delta_a).
    FitActuator {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Replay the latency filter over a computation-time trace.
    ReplayFilter {
        /// One latency per line, or a CSV with a t_c column.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        beta: f64,
        #[arg(long, default_value_t = 100)]
        warmup: usize,
        /// CSV destination; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(name: &str, config: Option<&PathBuf>) -> Result<Scenario, String> {
    let (src, origin) = match config {
        Some(p) => (fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?, p.display().to_string()),
        None => (
            builtin(name).ok_or_else(|| format!("no shipped scenario {name:?}; pass --config"))?.to_string(),
            format!("<{name}>"),
        ),
    };
    let scn = Scenario::from_toml(&src).map_err(|e| format!("{origin}: {e}"))?;
    if scn.name != name {
        return Err(format!("{origin} describes scenario {:?}, not {name:?}", scn.name));
    }
    Ok(scn)
}

fn main() -> ExitCode {
    env_logger::init();
    match Cli::parse().command {
        Command::Run {
            scenario,
            arm,
            seed,
            config,
            out,
            require_safe,
        } => {
            let scn = match load(&scenario, config.as_ref()) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let m = match run_scenario(scn, arm, seed, &out) {
                Ok(m) => m,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            print!("{}", m.to_json());
            println!();
            if let Some(f) = &m.failure {
                eprintln!("run ended early: {f}");
            }
            if require_safe && m.collision {
                eprintln!("collision (min clearance {:.3} m)", m.min_clearance.unwrap_or(0.0));
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Command::FitActuator { trace } => {
            let fit = fs::File::open(&trace)
                .map_err(|e| e.to_string())
                .and_then(|f| StepTrace::read(f).map_err(|e| e.to_string()))
                .and_then(|t| t.fit().map_err(|e| e.to_string()));
            match fit {
                Ok((k, rms)) => {
                    println!("k_delta = {k:.6}");
                    println!("rms residual = {rms:.3e}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", trace.display());
                    ExitCode::from(1)
                }
            }
        }
        Command::ReplayFilter { trace, beta, warmup, out } => {
            let cfg = FilterConfig::std_dev(beta);
            let rows = fs::File::open(&trace)
                .map_err(influence::InfluenceError::from)
                .and_then(|f| influence::read_trace(BufReader::new(f)))
                .and_then(|m| {
                    cfg.validate()?;
                    influence::replay(&m, &cfg)
                });
            let rows = match rows {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {}: {e}", trace.display());
                    return ExitCode::from(1);
                }
            };
            let written = match &out {
                Some(p) => fs::File::create(p)
                    .map_err(influence::InfluenceError::from)
                    .and_then(|f| influence::write_replay_csv(&rows, f)),
                None => influence::write_replay_csv(&rows, io::stdout().lock()),
            };
            if let Err(e) = written {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
            eprintln!(
                "{} samples, coverage after {warmup} = {:.4}",
                rows.len(),
                influence::coverage(&rows, warmup)
            );
            ExitCode::SUCCESS
        }
    }
}
