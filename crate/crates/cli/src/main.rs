use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use goalnav::dataset::{default_min_distance, emit_samples, generate_traces, RouteParams};
use goalnav::experiment::{run_experiment, summarize, write_results, write_summary, ExperimentConfig, RunOptions};
use goalnav::gridmap::load_map;
use goalnav::potential_field::compute_field;
use goalnav::simulator::{RobotParams, TrialParams};
use goalnav::teleop::Task;
use goalnav::WorldPoint;
use goalnav_server::ServerConfig;

/// Goal-inferring shared control for sparse, discrete operator commands.
#[derive(Parser)]
#[command(name = "goalnav", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scripted-operator experiment batch.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Per-trial results CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-condition summary CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Directory for one trajectory CSV per trial.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Export potential-descent routes with per-step goal likelihood grids.
    GenDataset {
        #[arg(long)]
        map: PathBuf,
        /// Number of samples (route steps) to write.
        #[arg(long)]
        samples: usize,
        /// Minimum start-goal distance in meters; half the map diagonal by default.
        #[arg(long)]
        min_distance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Robot radius used to inflate the map, meters.
        #[arg(long, default_value_t = 0.25)]
        radius: f64,
        #[arg(long, default_value_t = 0.3)]
        speed: f64,
    },
    /// Serve live teleoperation sessions over WebSocket.
    Serve {
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 20.0)]
        tick_hz: f64,
        /// Start position `x,y` in meters.
        #[arg(long, value_parser = parse_point, default_value = "5.85,3.65")]
        start: WorldPoint,
        /// Goal position `x,y` in meters.
        #[arg(long, value_parser = parse_point, default_value = "1.0,4.2")]
        goal: WorldPoint,
        #[arg(long, default_value_t = 0.25)]
        radius: f64,
        /// Built operator console to serve under `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn parse_point(s: &str) -> Result<WorldPoint, String> {
    let (x, y) = s.split_once(',').ok_or("expected `x,y`")?;
    let x: f64 = x.trim().parse().map_err(|e| format!("{e}"))?;
    let y: f64 = y.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(WorldPoint::new(x, y))
}

enum Failure {
    Config(String),
    Run(String),
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn create(path: &PathBuf) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Cmd::Simulate { config, out, summary, trajectories } => {
            let cfg = ExperimentConfig::load(&config).map_err(|e| {
                if e.is_config() { Failure::Config(e.to_string()) } else { Failure::Run(e.to_string()) }
            })?;
            let rows = run_experiment(&cfg, &RunOptions { trajectories: trajectories.as_deref() })
                .map_err(|e| Failure::Run(e.to_string()))?;
            let written = match &out {
                Some(p) => write_results(create(p)?, &rows),
                None => write_results(io::stdout().lock(), &rows),
            };
            written.map_err(|e| Failure::Run(e.to_string()))?;
            if let Some(p) = &summary {
                write_summary(create(p)?, &summarize(&rows)).map_err(|e| Failure::Run(e.to_string()))?;
            }
            eprintln!("{} trials over {} conditions", rows.len(), cfg.cells.len());
            Ok(())
        }
        Cmd::GenDataset { map, samples, min_distance, seed, out, radius, speed } => {
            let grid = load_map(&map).map_err(|e| Failure::Config(e.to_string()))?.inflate(radius);
            let min_distance = min_distance.unwrap_or_else(|| default_min_distance(&grid));
            let params = RouteParams { speed, ..RouteParams::default() };
            let traces = generate_traces(&grid, samples, min_distance, seed, &params)
                .map_err(|e| Failure::Config(e.to_string()))?;
            let n = emit_samples(&grid, &traces, speed, &out).map_err(|e| Failure::Run(e.to_string()))?;
            eprintln!("{n} samples from {} route(s) written to {}", traces.len(), out.display());
            Ok(())
        }
        Cmd::Serve { map, port, tick_hz, start, goal, radius, static_dir, host } => {
            if !(tick_hz.is_finite() && tick_hz > 0.0) {
                return Err(Failure::Config(format!("tick rate {tick_hz} must be positive")));
            }
            let grid = load_map(&map).map_err(|e| Failure::Config(e.to_string()))?.inflate(radius);
            let free = |p: WorldPoint| grid.world_to_cell(p).filter(|c| grid.is_free(*c));
            let start_cell = free(start).ok_or_else(|| {
                Failure::Config(format!("start ({}, {}) is not free on the inflated map; pass --start", start.x, start.y))
            })?;
            let goal_cell = free(goal).ok_or_else(|| {
                Failure::Config(format!("goal ({}, {}) is not free on the inflated map; pass --goal", goal.x, goal.y))
            })?;
            let reachable = compute_field(&grid, goal_cell).map(|f| f.is_reachable(start_cell)).unwrap_or(false);
            if !reachable {
                return Err(Failure::Config("goal is unreachable from start".into()));
            }
            let id = map.file_stem().map_or("map".into(), |s| s.to_string_lossy().into_owned());
            let robot = RobotParams { radius, ..RobotParams::default() };
            let task = Task {
                grid: Arc::new(grid),
                start,
                goal: goal_cell,
                params: TrialParams { robot, ..TrialParams::default() },
            };
            let config = ServerConfig {
                maps: BTreeMap::from([(id.clone(), task)]),
                default_map: id,
                tick_hz,
                static_dir,
            };
            let addr = SocketAddr::new(host, port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Run(e.to_string()))?;
            eprintln!("listening on http://{addr} (WebSocket at /ws)");
            let _ = io::stderr().flush();
            rt.block_on(goalnav_server::serve(config, addr)).map_err(|e| Failure::Run(e.to_string()))
        }
    }
}
