use std::net::{Ipv4Addr, UdpSocket};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use boxer::execution::{launch, launch_on_fabric, LaunchError, LaunchSpec};
use boxer::overlay::{OverlayConfig, SimOverlay};
use boxer::proto::Endpoint;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "boxer", version, about = "Join a Boxer overlay and run a command inside it")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Join through the seed, wait for the barrier, then run the command.
    Run(RunArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    Sim,
    Socket,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Seed endpoint. Required for the socket transport.
    #[arg(short, long)]
    seed: Option<Endpoint>,
    /// Start the command once this many members have joined.
    #[arg(short = 'n', long = "count")]
    count: Option<usize>,
    /// Give up on join plus barrier after this many seconds.
    #[arg(long, default_value_t = 60.0)]
    deadline: f64,
    #[arg(long, value_enum, default_value_t = Transport::Socket)]
    transport: Transport,
    /// Local address for the agent; by default the interface that routes
    /// to the seed.
    #[arg(long)]
    bind: Option<Ipv4Addr>,
    /// Port for the agent's control listener; 0 picks one.
    #[arg(long, default_value_t = 0)]
    control_port: u16,
    /// Interception library to preload into the command.
    #[arg(long)]
    preload: Option<PathBuf>,
    /// Directory for the peers file and IPC socket.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Command and arguments to run.
    #[arg(last = true, required = true)]
    command: Vec<String>,
}

/// Address the kernel would use to reach `seed`.
fn route_to(seed: Endpoint) -> Option<Ipv4Addr> {
    let s = UdpSocket::bind("0.0.0.0:0").ok()?;
    s.connect((seed.ip(), seed.port())).ok()?;
    match s.local_addr().ok()?.ip() {
        std::net::IpAddr::V4(ip) if !ip.is_unspecified() => Some(ip),
        _ => None,
    }
}

fn run(args: RunArgs) -> Result<i32, LaunchError> {
    let deadline = Duration::from_secs_f64(args.deadline.max(0.0));
    let state_dir = args
        .state_dir
        .unwrap_or_else(|| std::env::temp_dir().join(format!("boxer-{}", std::process::id())));
    match args.transport {
        Transport::Socket => {
            let seed = args.seed.ok_or_else(|| LaunchError::InvalidSpec("--seed is required".into()))?;
            let ip = args
                .bind
                .or_else(|| route_to(seed))
                .ok_or_else(|| LaunchError::InvalidSpec(format!("no local route to {seed}; pass --bind")))?;
            let mut spec = LaunchSpec::new(seed, args.command, state_dir);
            spec.barrier_n = args.count;
            spec.deadline = Some(deadline);
            spec.preload = args.preload;
            launch(&spec, ip, args.control_port)
        }
        Transport::Sim => {
            // A simulated overlay of `count` functions; the command runs for
            // real on behalf of the last one to join.
            let n = args.count.unwrap_or(1).max(1);
            let mut ov = SimOverlay::functions(OverlayConfig::default(), n);
            ov.start_all();
            let agent = ov.nodes[n - 1].agent.expect("started");
            let mut spec = LaunchSpec::new(ov.seed_endpoint, args.command, state_dir);
            spec.barrier_n = args.count;
            spec.preload = args.preload;
            launch_on_fabric(&mut ov.fabric, agent, &spec, deadline).map(|r| r.exit_code)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Cli { cmd: Cmd::Run(args) } = Cli::parse();
    let code = match run(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("boxer: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code.clamp(0, 255) as u8)
}
