use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddrV4;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::time::Duration;

use boxer::proto::Endpoint;
use boxer::seed::{SeedProcess, DEFAULT_PORT};
use boxer::socket::{self, RuntimeConfig};
use clap::Parser;

/// Rendezvous server: reflects each joiner's public address, hands out
/// node ids and relays membership.
#[derive(Parser)]
#[command(name = "boxer-seed", version)]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value_t = SocketAddrV4::new([0, 0, 0, 0].into(), DEFAULT_PORT))]
    listen: SocketAddrV4,
    /// Publish this endpoint as the seed's own record instead of the
    /// listening address.
    #[arg(long)]
    advertise: Option<Endpoint>,
    /// Append join/leave events to this file as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let (tx, rx) = mpsc::channel();
    let mut seed = SeedProcess::new(*args.listen.ip(), args.listen.port()).notify_listening(tx);
    if let Some(ep) = args.advertise {
        seed = seed.advertise(ep);
    }
    if let Some(path) = &args.trace {
        match File::create(path) {
            Ok(f) => seed = seed.journal(Box::new(BufWriter::new(f))),
            Err(e) => {
                eprintln!("boxer-seed: cannot open {}: {e}", path.display());
                return ExitCode::from(74);
            }
        }
    }
    let runtime = socket::spawn(RuntimeConfig::new(*args.listen.ip()), Box::new(seed));
    match rx.recv_timeout(Duration::from_secs(10)) {
        Ok(Ok(ep)) => println!("listening on {ep}"),
        Ok(Err(e)) => {
            eprintln!("boxer-seed: {e}");
            return ExitCode::from(69);
        }
        Err(_) => {
            eprintln!("boxer-seed: runtime did not start");
            return ExitCode::from(70);
        }
    }
    while runtime.is_running() {
        std::thread::sleep(Duration::from_millis(500));
    }
    ExitCode::from(70)
}
