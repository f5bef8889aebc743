//! `kmn`: role daemons, local deployments, benchmarks and the transfer demo.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 network,
//! 4 protocol abort or rejection.

mod bench;
mod demo;
mod deploy;
mod error;
mod roles;
mod topology;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kmn_bench::PhaseKind;
use kmn_core::paillier::PaillierProfile;
use log::LevelFilter;

use crate::error::CliError;
use crate::roles::Daemon;
use crate::topology::{read_toml, TopologyConfig};

#[derive(Parser)]
#[command(name = "kmn", version, about = "Threshold key management for payment processors")]
struct Cli {
    #[arg(long, global = true, env = "KMN_LOG_LEVEL", default_value = "info")]
    log_level: LevelFilter,
    /// Seeds benchmark digests and workloads.
    #[arg(long, global = true, env = "KMN_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark scenario.
    Bench {
        #[command(subcommand)]
        phase: BenchPhase,
    },
    /// Start, stop or inspect the daemons of a topology on this host.
    Deploy {
        #[command(subcommand)]
        action: DeployAction,
    },
    /// Run one daemon in the foreground until SIGTERM or SIGINT.
    Run {
        role: Role,
        #[arg(long, env = "KMN_CONFIG")]
        config: PathBuf,
    },
    /// Execute one transfer and print its steps with timings.
    DemoTransfer(DemoArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, env = "KMN_CONFIG")]
    config: PathBuf,
    /// Directory for the CSV and summary.
    #[arg(long, env = "KMN_OUT", default_value = "reports")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchPhase {
    /// Keygen, presign and sign compute over a (t, n) sweep.
    Crypto(BenchArgs),
    /// End-to-end transfers under concurrent users.
    Load(BenchArgs),
}

#[derive(Subcommand)]
enum DeployAction {
    Up {
        #[arg(long, env = "KMN_TOPOLOGY")]
        topology: PathBuf,
    },
    Down {
        #[arg(long, env = "KMN_TOPOLOGY")]
        topology: PathBuf,
    },
    Status {
        #[arg(long, env = "KMN_TOPOLOGY")]
        topology: PathBuf,
    },
    /// Write the default two-FSP topology on loopback.
    Init {
        #[arg(long, env = "KMN_TOPOLOGY")]
        topology: PathBuf,
        #[arg(long, default_value_t = 7100)]
        base_port: u16,
        #[arg(long, default_value_t = 2048)]
        paillier_bits: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    KmnNode,
    Coordinator,
    Verifier,
    Pp,
}

#[derive(Args)]
struct DemoArgs {
    /// Use the running deployment of this topology instead of an in-process
    /// network.
    #[arg(long, env = "KMN_TOPOLOGY")]
    topology: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    from: u16,
    #[arg(long, default_value_t = 2)]
    to: u16,
    #[arg(long, default_value_t = 10)]
    value: u64,
    /// Transfer within the sending FSP.
    #[arg(long)]
    local: bool,
    /// Paillier modulus size of the in-process network.
    #[arg(long, env = "KMN_PAILLIER_BITS", default_value_t = 2048)]
    paillier_bits: u64,
}

fn serve_until_signalled(daemon: Daemon) -> Result<(), CliError> {
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, stop.clone()).map_err(CliError::other)?;
    }
    log::info!("{} serving on {:?}", daemon.name, daemon.addrs());
    while !stop.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(50));
    }
    log::info!("{} shutting down", daemon.name);
    drop(daemon);
    Ok(())
}

fn run_role(role: Role, config: &Path) -> Result<(), CliError> {
    let daemon = match role {
        Role::KmnNode => roles::start_node(&read_toml(config)?)?,
        Role::Coordinator => roles::start_coordinator(&read_toml(config)?)?,
        Role::Verifier => roles::start_verifier(&read_toml(config)?)?,
        Role::Pp => roles::start_pp(&read_toml(config)?)?,
    };
    serve_until_signalled(daemon)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Bench { phase } => {
            let (args, phase) = match phase {
                BenchPhase::Crypto(a) => (a, PhaseKind::Crypto),
                BenchPhase::Load(a) => (a, PhaseKind::E2e),
            };
            let config = bench::load_scenario(&args.config, phase, cli.seed)?;
            let path = bench::run(&config, &args.out)?;
            println!("report written to {}", path.display());
            Ok(())
        }
        Command::Deploy { action } => match action {
            DeployAction::Up { topology } => deploy::up(&TopologyConfig::load(&topology)?, cli.log_level),
            DeployAction::Down { topology } => deploy::down(&TopologyConfig::load(&topology)?),
            DeployAction::Status { topology } => deploy::status(&TopologyConfig::load(&topology)?),
            DeployAction::Init {
                topology,
                base_port,
                paillier_bits,
            } => {
                let mut topo = TopologyConfig::local(base_port);
                topo.paillier = PaillierProfile {
                    bits: paillier_bits,
                    allow_unsafe: paillier_bits < 2048,
                };
                topo.validate()?;
                topology::write_toml(&topology, &topo)?;
                println!("wrote {}", topology.display());
                Ok(())
            }
        },
        Command::Run { role, config } => run_role(role, &config),
        Command::DemoTransfer(args) => {
            let req = demo::DemoRequest {
                from: args.from,
                to: if args.local { args.from } else { args.to },
                value: args.value,
            };
            let out = match &args.topology {
                Some(path) => demo::against(&TopologyConfig::load(path)?, &req)?,
                None => {
                    let paillier = PaillierProfile {
                        bits: args.paillier_bits,
                        allow_unsafe: args.paillier_bits < 2048,
                    };
                    demo::in_process(&req, paillier)?
                }
            };
            print!("{out}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_millis()
        .init();
    let result = execute(cli);
    log::logger().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kmn: {e}");
            let _ = std::io::stderr().flush();
            ExitCode::from(e.exit_code())
        }
    }
}
