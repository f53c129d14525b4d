use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use blackstart_core::netmodel::{apply_energization_with, load_case, load_crankpath, CrankPath, Network};
use blackstart_core::powerflow::{solve_with, PfMode};
use blackstart_core::restoration::{audit_ramps, boundary_state, run_restoration, synchronize, RestorationRun};
use blackstart_service::store::load_snapshot;
use blackstart_service::{router, AppState, EngineConfig, SnapshotStore};

#[derive(Parser)]
#[command(name = "sugar-r", version, about = "Crank-path validation and island synchronization")]
struct Cli {
    /// TOML file with solver, bound and server defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Classical,
    Governor,
}

#[derive(Subcommand)]
enum Command {
    /// Power flow of a case, fully energized or after part of a crank path.
    Pf {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        crankpath: Option<PathBuf>,
        /// Apply crank steps 1..=N (all when omitted).
        #[arg(long, requires = "crankpath")]
        through: Option<usize>,
        #[arg(long, value_enum, default_value = "governor")]
        mode: Mode,
        #[arg(long)]
        loading: Option<f64>,
    },
    /// Validate and actuate every crank step in order.
    Restore {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        crankpath: PathBuf,
        #[arg(long)]
        loading: Option<f64>,
        /// Print the full run as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Restore two islands and recommend set-points matching island 1 to
    /// island 2 at the tie.
    Sync {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        crankpath: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        loading1: f64,
        #[arg(long, default_value_t = 1.0)]
        loading2: f64,
        #[arg(long)]
        local_bus: u32,
        #[arg(long)]
        remote_bus: u32,
        #[arg(long, value_delimiter = ',', required = true)]
        participants: Vec<u32>,
    },
    /// Serve the HTTP API. Port and token also come from SUGARR_PORT and
    /// SUGARR_TOKEN.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        snapshot_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
    },
    /// Recompute every recorded step of a session snapshot and compare.
    Replay {
        snapshot: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn case_and_path(case: &Path, crankpath: &Path) -> Result<(Network, CrankPath)> {
    let net = load_case(&read(case)?).with_context(|| format!("{}", case.display()))?;
    let path = load_crankpath(&read(crankpath)?, &net).with_context(|| format!("{}", crankpath.display()))?;
    Ok((net, path))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, v).map_err(std::io::Error::from).and_then(|_| writeln!(out));
    match written {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn restore(cfg: &EngineConfig, net: &Network, path: &CrankPath, loading: f64) -> Result<RestorationRun> {
    Ok(run_restoration(net, path, &cfg.bounds, &cfg.restoration(loading))?)
}

fn print_run(net: &Network, run: &RestorationRun) {
    println!("{:>4}  {:<13} {:>9} {:>9} {:>7} {:>7} {:>10} {:>5} {:>9}", "step", "status", "gov df", "df", "v min", "v max", "max dP", "bus", "slack P");
    for r in &run.reports {
        println!(
            "{:>4}  {:<13} {:>9.4} {:>9.4} {:>7.4} {:>7.4} {:>10.4} {:>5} {:>9.4}",
            r.step,
            format!("{:?}", r.status),
            r.governor_delta_f.unwrap_or(f64::NAN),
            r.delta_f,
            r.v_min,
            r.v_max,
            r.max_delta_p,
            r.max_delta_p_bus.map_or("-".to_string(), |b| b.to_string()),
            r.slack_p
        );
        for d in &r.diagnostics {
            println!("        {d}");
        }
    }
    if let Some(step) = run.halted_at {
        println!("halted at step {step}");
    }
    let ramps = audit_ramps(net, &run.reports, 1e-6);
    println!("ramp audit: {} violations", ramps.len());
}

async fn serve(mut cfg: EngineConfig, port: Option<u16>, snapshot_dir: Option<PathBuf>, bind: std::net::IpAddr) -> Result<()> {
    if let Some(p) = port {
        cfg.server.port = p;
    }
    if snapshot_dir.is_some() {
        cfg.server.snapshot_dir = snapshot_dir;
    }
    if cfg.server.token.is_none() {
        tracing::warn!("SUGARR_TOKEN not set; the API accepts unauthenticated requests");
    }
    let store = cfg.server.snapshot_dir.as_deref().map(SnapshotStore::open).transpose()?;
    let restored = match &store {
        Some(s) => {
            let (sessions, problems) = s.load_all()?;
            for p in problems {
                tracing::warn!("skipping snapshot {p}");
            }
            sessions
        }
        None => Vec::new(),
    };
    let addr = SocketAddr::new(bind, cfg.server.port);
    let app = Arc::new(AppState::new(cfg, store));
    tracing::info!("restored {} sessions", restored.len());
    app.adopt(restored).await;
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, router(app)).with_graceful_shutdown(async { tokio::signal::ctrl_c().await.ok(); }).await?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let cfg = EngineConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Pf { case, crankpath, through, mode, loading } => {
            let mut net = load_case(&read(&case)?).with_context(|| format!("{}", case.display()))?;
            match crankpath {
                Some(p) => {
                    let path = load_crankpath(&read(&p)?, &net)?;
                    let n = through.unwrap_or(path.len());
                    if n > path.len() {
                        bail!("--through {n} exceeds the {} crank steps", path.len());
                    }
                    for step in &path.steps[..n] {
                        net = apply_energization_with(&net, step, loading.unwrap_or(cfg.loading_factor))?;
                    }
                }
                None => {
                    for b in &mut net.buses {
                        b.energized = true;
                    }
                    for g in &mut net.generators {
                        g.energized = true;
                    }
                    for l in &mut net.loads {
                        l.energized = true;
                    }
                }
            }
            let mode = match mode {
                Mode::Classical => PfMode::Classical,
                Mode::Governor => PfMode::Governor,
            };
            print_json(&solve_with(&net, mode, &cfg.pf)?)
        }
        Command::Restore { case, crankpath, loading, json } => {
            let (net, path) = case_and_path(&case, &crankpath)?;
            let run = restore(&cfg, &net, &path, loading.unwrap_or(cfg.loading_factor))?;
            if json {
                print_json(&run)
            } else {
                print_run(&net, &run);
                Ok(())
            }
        }
        Command::Sync { case, crankpath, loading1, loading2, local_bus, remote_bus, participants } => {
            let (net, path) = case_and_path(&case, &crankpath)?;
            let island1 = restore(&cfg, &net, &path, loading1)?;
            let island2 = restore(&cfg, &net, &path, loading2)?;
            if island1.halted_at.is_some() || island2.halted_at.is_some() {
                bail!("restoration halted: island 1 at {:?}, island 2 at {:?}", island1.halted_at, island2.halted_at);
            }
            let remote = boundary_state(&island2.network, remote_bus, "island-2", 0.0)?;
            let rec = synchronize(&island1.network, local_bus, &remote, &participants, &cfg.sync(cfg.bounds))?;
            print_json(&rec)
        }
        Command::Serve { port, snapshot_dir, bind } => {
            tokio::runtime::Runtime::new()?.block_on(serve(cfg, port, snapshot_dir, bind))
        }
        Command::Replay { snapshot, tol } => {
            let session = load_snapshot(&snapshot)?;
            let steps = session.replay(&cfg)?;
            let mut ok = true;
            for s in &steps {
                let good = s.reproduced(tol);
                ok &= good;
                println!(
                    "step {:>2}: {} (max difference {:.2e}, status {}, network {})",
                    s.step,
                    if good { "reproduced" } else { "DIFFERS" },
                    s.max_difference,
                    if s.same_status { "same" } else { "differs" },
                    if s.same_network { "same" } else { "differs" }
                );
            }
            if !ok {
                bail!("replay differs from the recorded session");
            }
            Ok(())
        }
    }
}
