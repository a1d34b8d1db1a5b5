//! `cavsim` command line.

use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cavsim_core::client::{run_client, ClientOptions};
use cavsim_core::config::{load_scenario, EdgeAlgorithm};
use cavsim_core::manager::{bind, write_run_dir, Placement, RunOptions, RunStatus};
use cavsim_core::metrics::{emit_plots, load_run};

const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "cavsim", version, about = "Lockstep connected-vehicle simulation with an edge planner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario as the manager.
    Run(RunArgs),
    /// Run one vehicle client against a manager.
    SpawnClient(SpawnArgs),
    /// Regenerate plots from run directories.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    ClusteredAstar,
    JointAstar,
    None,
}

impl From<AlgorithmArg> for EdgeAlgorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::ClusteredAstar => EdgeAlgorithm::ClusteredAstar,
            AlgorithmArg::JointAstar => EdgeAlgorithm::JointAstar,
            AlgorithmArg::None => EdgeAlgorithm::None,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Output root; the run goes to `<out>/<run-id>`.
    #[arg(long, env = "ECAV_OUT_DIR", default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Client port. Defaults to the scenario's for remote clients and to an
    /// ephemeral port for local ones.
    #[arg(long)]
    port: Option<u16>,
    /// Spawn N client processes on this machine.
    #[arg(long, value_name = "N", conflicts_with_all = ["wait_remote", "sequential"])]
    local_clients: Option<usize>,
    /// Wait for N clients started elsewhere.
    #[arg(long, value_name = "N", conflicts_with = "sequential")]
    wait_remote: Option<usize>,
    /// Run every client in this process, one after another.
    #[arg(long)]
    sequential: bool,
    /// Deliver edge output on the next tick regardless of runtime and latency.
    #[arg(long)]
    ideal_edge: bool,
    /// Wait for every edge job before the next tick.
    #[arg(long)]
    sync_edge: bool,
    /// Keep running when a client disconnects.
    #[arg(long)]
    continue_on_dropout: bool,
    /// Override the scenario's edge algorithm.
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    run_id: Option<String>,
    /// Address to listen on for remote clients.
    #[arg(long)]
    bind: Option<IpAddr>,
}

#[derive(Args)]
struct SpawnArgs {
    /// host:port of the manager.
    #[arg(long)]
    manager: String,
    #[arg(long)]
    vehicle_index: u32,
    /// Seconds to keep retrying the first connection.
    #[arg(long, default_value_t = 30.0)]
    connect_timeout: f64,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directories to plot together.
    #[arg(long, required = true, num_args = 1..)]
    run: Vec<PathBuf>,
    /// Where to put `plots/`; defaults to the first run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_run_id(scenario: &Path) -> String {
    let stem = scenario
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{stem}-{secs}-{}", std::process::id())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let config = load_scenario(&args.scenario)
        .with_context(|| format!("loading {}", args.scenario.display()))?;
    let config_text = std::fs::read_to_string(&args.scenario)?;
    let n = config.vehicles.len();
    let placement = if args.sequential {
        Placement::Sequential
    } else if let Some(k) = args.wait_remote {
        if k != n {
            bail!("--wait-remote {k} but the scenario has {n} vehicles");
        }
        Placement::Remote
    } else {
        let k = args.local_clients.unwrap_or(n);
        if k != n {
            bail!("--local-clients {k} but the scenario has {n} vehicles");
        }
        Placement::LocalProcesses {
            program: std::env::current_exe().context("locating the cavsim binary")?,
            args: Vec::new(),
        }
    };
    let remote = matches!(placement, Placement::Remote);
    let run_id = args.run_id.unwrap_or_else(|| default_run_id(&args.scenario));
    let opts = RunOptions {
        placement,
        ideal_edge: args.ideal_edge,
        sync_edge: args.sync_edge,
        continue_on_dropout: args.continue_on_dropout,
        seed: args.seed,
        port: args.port,
        algorithm: args.algorithm.map(Into::into),
        run_id: run_id.clone(),
        bind_ip: args.bind.unwrap_or(if remote {
            IpAddr::from([0, 0, 0, 0])
        } else {
            IpAddr::from([127, 0, 0, 1])
        }),
    };
    let bound = bind(config, opts)?;
    if let Some(addr) = bound.local_addr() {
        if remote {
            eprintln!("waiting for {n} clients on {addr}");
        }
    }
    let outcome = bound.run()?;
    let dir = args.out.join(&run_id);
    write_run_dir(&outcome, &config_text, &dir)?;
    let s = &outcome.summary;
    println!(
        "{}: {} ticks, {} vehicles, mean velocity {:.2} km/h, mean deviation {:.3} m/s, collisions {}, headway violations {}",
        dir.display(),
        s.ticks,
        s.n_vehicles,
        s.mean_velocity_kph,
        s.mean_deviation_mps,
        s.safety.collisions,
        s.safety.headway_violations
    );
    Ok(match outcome.status {
        RunStatus::Complete => ExitCode::SUCCESS,
        RunStatus::Partial => {
            for note in &outcome.bundle.notes {
                eprintln!("partial run: {note}");
            }
            ExitCode::from(EXIT_PARTIAL)
        }
    })
}

fn cmd_spawn_client(args: SpawnArgs) -> Result<ExitCode> {
    let report = run_client(&ClientOptions {
        manager: args.manager,
        vehicle_index: args.vehicle_index,
        connect_timeout: Duration::from_secs_f64(args.connect_timeout),
    })?;
    log::info!("vehicle {} finished after {} ticks", report.vehicle_id, report.ticks);
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(args: PlotArgs) -> Result<ExitCode> {
    let runs = args
        .run
        .iter()
        .map(|d| load_run(d).with_context(|| format!("reading {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let out = args.out.unwrap_or_else(|| args.run[0].clone());
    for p in emit_plots(&runs, &out)? {
        println!("{}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::SpawnClient(a) => cmd_spawn_client(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
