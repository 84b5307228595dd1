use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use boxer::bench::sim::{self, SimBenchConfig};
use boxer::bench::socket::LoopbackOverlay;
use boxer::bench::{self, write_csv, write_ecdf, write_fanin_csv, write_raw, BenchRecord, ConnectionType, Direction, FanInPoint};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "boxer-bench", version, about = "Connection setup, latency and throughput benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    Sim,
    Socket,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dir {
    Forward,
    Reverse,
    Both,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long, value_enum, default_value_t = Transport::Sim)]
    transport: Transport,
    /// Concurrent client/server pairs.
    #[arg(long, default_value_t = 32)]
    pairs: usize,
    /// Summary table.
    #[arg(long)]
    out: PathBuf,
    /// Every sample; defaults to `<out>.raw.csv`.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// ECDF of all samples of the first connection type.
    #[arg(long)]
    ecdf: Option<PathBuf>,
    /// One-way link delay in microseconds (sim only).
    #[arg(long, default_value_t = 100)]
    delay: u64,
    /// Connection types to run; sim defaults to all six, socket to the two
    /// VM-to-VM variants.
    #[arg(long = "type")]
    types: Vec<ConnectionType>,
    /// Simulation RNG seed.
    #[arg(long, default_value_t = 1)]
    rng_seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    Throughput {
        #[command(flatten)]
        common: Common,
        /// Seconds per run.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// Sampling interval in seconds.
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
        #[arg(long, value_enum, default_value_t = Dir::Both)]
        direction: Dir,
    },
    Latency {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1024)]
        msg_size: usize,
        /// Echoes averaged into one sample.
        #[arg(long, default_value_t = 128)]
        rounds: usize,
        #[arg(long, default_value_t = 1024)]
        reps: usize,
    },
    Ttfb {
        #[command(flatten)]
        common: Common,
        /// Connections per pair.
        #[arg(long, default_value_t = 1024)]
        reps: usize,
    },
    Fanin {
        #[command(flatten)]
        common: Common,
        /// Sender counts to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16, 32])]
        senders: Vec<usize>,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
    },
}

const JOIN_TIMEOUT: Duration = Duration::from_secs(30);

impl Common {
    fn types(&self) -> Vec<ConnectionType> {
        if !self.types.is_empty() {
            return self.types.clone();
        }
        match self.transport {
            Transport::Sim => ConnectionType::ALL.to_vec(),
            Transport::Socket => vec![ConnectionType::VmToVm, ConnectionType::VmToVmNative],
        }
    }

    fn sim(&self, t: ConnectionType) -> SimBenchConfig {
        SimBenchConfig {
            connection_type: t,
            pairs: self.pairs,
            delay: Duration::from_micros(self.delay),
            rng_seed: self.rng_seed,
            ..SimBenchConfig::default()
        }
    }

    fn raw_path(&self) -> PathBuf {
        self.raw.clone().unwrap_or_else(|| {
            let mut p = self.out.clone().into_os_string();
            p.push(".raw.csv");
            p.into()
        })
    }
}

/// The loopback benches only distinguish brokered from native setup.
fn brokered(t: ConnectionType) -> io::Result<bool> {
    match t {
        ConnectionType::VmToVm => Ok(true),
        ConnectionType::VmToVmNative => Ok(false),
        other => Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("{other} needs NAT gateways; use --transport sim"),
        )),
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(1e-3))
}

fn create(path: &Path) -> io::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new)
}

fn report_failures(label: &str, failures: &[String]) {
    if failures.is_empty() {
        return;
    }
    eprintln!("warning: {label}: {} failed and excluded (first: {})", failures.len(), failures[0]);
}

fn write_records(common: &Common, records: &[BenchRecord]) -> io::Result<()> {
    for r in records {
        report_failures(&format!("{} {}", r.connection_type, r.metric), &r.failures);
        if let Some(s) = r.summary() {
            println!("{:<22} {:<15} median {:.3} {} (n={})", r.connection_type.label(), r.metric.name(), s.median, r.metric.unit(), r.samples.len());
        }
    }
    let mut out = create(&common.out)?;
    write_csv(&mut out, records)?;
    out.flush()?;
    let mut raw = create(&common.raw_path())?;
    write_raw(&mut raw, records)?;
    raw.flush()?;
    if let (Some(path), Some(first)) = (&common.ecdf, records.first()) {
        let mut e = create(path)?;
        write_ecdf(&mut e, &first.samples)?;
        e.flush()?;
    }
    Ok(())
}

/// Agents on 127.0.0.x with their state in a scratch directory.
fn loopback(nodes: usize) -> io::Result<(tempfile::TempDir, LoopbackOverlay)> {
    let dir = tempfile::tempdir()?;
    let ov = LoopbackOverlay::start(nodes, dir.path(), JOIN_TIMEOUT)?;
    Ok((dir, ov))
}

fn run(cmd: Cmd) -> io::Result<()> {
    match cmd {
        Cmd::Ttfb { common, reps } => {
            let mut records = Vec::new();
            let lb = match common.transport {
                Transport::Socket => Some(loopback(2 * common.pairs)?),
                Transport::Sim => None,
            };
            for t in common.types() {
                records.push(match &lb {
                    None => sim::ttfb(&common.sim(t), reps),
                    Some((_, ov)) => bench::socket::ttfb(ov, brokered(t)?, common.pairs, reps)?,
                });
            }
            write_records(&common, &records)
        }
        Cmd::Latency { common, msg_size, rounds, reps } => {
            let mut records = Vec::new();
            let lb = match common.transport {
                Transport::Socket => Some(loopback(2 * common.pairs)?),
                Transport::Sim => None,
            };
            for t in common.types() {
                records.push(match &lb {
                    None => sim::latency(&common.sim(t), msg_size, rounds, reps),
                    Some((_, ov)) => bench::socket::latency(ov, brokered(t)?, common.pairs, msg_size, rounds, reps)?,
                });
            }
            write_records(&common, &records)
        }
        Cmd::Throughput { common, duration, interval, direction } => {
            let dirs = match direction {
                Dir::Forward => vec![Direction::Forward],
                Dir::Reverse => vec![Direction::Reverse],
                Dir::Both => vec![Direction::Forward, Direction::Reverse],
            };
            let (duration, interval) = (secs(duration), secs(interval));
            let lb = match common.transport {
                Transport::Socket => Some(loopback(2)?),
                Transport::Sim => None,
            };
            let mut records = Vec::new();
            for t in common.types() {
                for &d in &dirs {
                    records.push(match &lb {
                        None => sim::throughput(&common.sim(t), duration, interval, d),
                        Some((_, ov)) => bench::socket::throughput(ov, brokered(t)?, duration, interval, d)?.0,
                    });
                }
            }
            write_records(&common, &records)
        }
        Cmd::Fanin { common, senders, duration, interval } => {
            let (duration, interval) = (secs(duration), secs(interval));
            let t = common.types()[0];
            let lb = match common.transport {
                Transport::Socket => {
                    let most = senders.iter().copied().max().unwrap_or(1);
                    Some(loopback(1 + most.min(common.pairs.max(1)))?)
                }
                Transport::Sim => None,
            };
            let mut points: Vec<FanInPoint> = Vec::new();
            for &n in senders.iter().filter(|n| **n > 0) {
                let p = match &lb {
                    None => sim::fanin(&common.sim(t), n, duration, interval),
                    Some((_, ov)) => bench::socket::fanin(ov, brokered(t)?, n, duration, interval)?,
                };
                report_failures(&format!("{t} fan-in {n}"), &p.failures);
                points.push(p);
            }
            let mut out = create(&common.out)?;
            write_fanin_csv(&mut out, &points)?;
            out.flush()?;
            let mut raw = create(&common.raw_path())?;
            writeln!(raw, "senders,value")?;
            for p in &points {
                for v in &p.samples {
                    writeln!(raw, "{},{v}", p.senders)?;
                }
            }
            raw.flush()?;
            if let (Some(path), Some(first)) = (&common.ecdf, points.first()) {
                let mut e = create(path)?;
                write_ecdf(&mut e, &first.samples)?;
                e.flush()?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("boxer-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
