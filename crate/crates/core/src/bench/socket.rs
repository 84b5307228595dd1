//! The same measurements over loopback sockets, with a seed and one agent
//! per node running on distinct 127.0.0.x addresses.

use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Barrier};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{mbits, BenchRecord, ConnectionType, Direction, FanInPoint, Metric};
use crate::coordination::MembershipHandle;
use crate::ipc::{self, BrokerClient};
use crate::networking::{AgentConfig, NodeAgent};
use crate::proto::Endpoint;
use crate::seed::SeedProcess;
use crate::socket::{self, shared_socket, RuntimeConfig, RuntimeHandle};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const IO_BUF: usize = 128 * 1024;

pub struct LoopbackNode {
    pub ip: Ipv4Addr,
    pub ipc: PathBuf,
    pub handle: MembershipHandle,
    _runtime: RuntimeHandle,
}

/// A seed plus `n` agents on loopback.
pub struct LoopbackOverlay {
    pub seed: Endpoint,
    pub nodes: Vec<LoopbackNode>,
    _seed_runtime: RuntimeHandle,
}

/// Loopback address of node `i`.
pub fn node_ip(i: usize) -> Ipv4Addr {
    assert!(i < 240, "loopback overlay supports up to 240 nodes");
    Ipv4Addr::new(127, 0, 0, 10 + i as u8)
}

impl LoopbackOverlay {
    /// Starts the seed and `n` agents, and waits until every agent knows
    /// every member.
    pub fn start(n: usize, state_dir: &Path, timeout: Duration) -> io::Result<Self> {
        let (tx, rx) = mpsc::channel();
        let seed_proc = SeedProcess::new(Ipv4Addr::LOCALHOST, 0).notify_listening(tx);
        let seed_runtime = socket::spawn(RuntimeConfig::new(Ipv4Addr::LOCALHOST), Box::new(seed_proc));
        let seed = rx
            .recv_timeout(timeout)
            .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "seed did not start"))?
            .map_err(io::Error::other)?;
        std::fs::create_dir_all(state_dir)?;
        let nodes = (0..n)
            .map(|i| {
                let ip = node_ip(i);
                let ipc = state_dir.join(format!("node{i}.sock"));
                let handle = MembershipHandle::new();
                let mut config = AgentConfig::new(seed);
                config.ipc_path = Some(ipc.to_string_lossy().into_owned());
                let agent = NodeAgent::with_handle(config, handle.clone());
                let runtime = socket::spawn(RuntimeConfig::new(ip), Box::new(agent));
                LoopbackNode { ip, ipc, handle, _runtime: runtime }
            })
            .collect::<Vec<_>>();
        let deadline = Instant::now() + timeout;
        for node in &nodes {
            node.handle
                .await_members(n, Some(deadline))
                .map_err(|e| io::Error::new(io::ErrorKind::TimedOut, e.to_string()))?;
        }
        Ok(LoopbackOverlay { seed, nodes, _seed_runtime: seed_runtime })
    }
}

fn label(brokered: bool) -> ConnectionType {
    if brokered {
        ConnectionType::VmToVm
    } else {
        ConnectionType::VmToVmNative
    }
}

/// A listener on `node`, registered with its agent when `brokered`; returns
/// once the agent knows about it. The broker client must outlive the
/// listener or the registration lapses.
pub fn listen(node: &LoopbackNode, brokered: bool) -> io::Result<(TcpListener, Option<BrokerClient>)> {
    if brokered {
        let mut broker = BrokerClient::connect(&node.ipc.to_string_lossy())?;
        let l = ipc::listen(Some(&mut broker), node.ip, 0)?;
        let ep = Endpoint::try_from(l.local_addr()?).map_err(|e| io::Error::other(e.to_string()))?;
        if !node.handle.await_listener(ep, Some(Instant::now() + CONNECT_TIMEOUT)) {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "agent did not pick up the listener"));
        }
        Ok((l, Some(broker)))
    } else {
        Ok((TcpListener::bind((node.ip, 0))?, None))
    }
}

/// Connects from `node` to `dst`, through the agent when a broker is given.
pub fn connect(ip: Ipv4Addr, broker: Option<&mut BrokerClient>, dst: SocketAddr) -> io::Result<TcpStream> {
    let dst_ep = Endpoint::try_from(dst).map_err(|e| io::Error::other(e.to_string()))?;
    let stream = match broker {
        Some(b) => ipc::connect(b, ip, dst_ep, CONNECT_TIMEOUT)?,
        None => {
            let s = shared_socket(false)?;
            s.bind(&SocketAddr::from((ip, 0)).into())?;
            s.connect_timeout(&dst.into(), CONNECT_TIMEOUT)?;
            s.into()
        }
    };
    stream.set_nodelay(true)?;
    Ok(stream)
}

fn broker_for(node: &LoopbackNode, brokered: bool) -> io::Result<Option<BrokerClient>> {
    brokered.then(|| BrokerClient::connect(&node.ipc.to_string_lossy())).transpose()
}

/// Runs `serve` for every accepted stream until the returned guard drops.
struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    _broker: Option<BrokerClient>,
}

impl Server {
    fn start(node: &LoopbackNode, brokered: bool, serve: impl Fn(TcpStream) + Send + Sync + 'static) -> io::Result<Self> {
        let (listener, broker) = listen(node, brokered)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let serve = Arc::new(serve);
        let thread = thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    return;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let serve = serve.clone();
                thread::spawn(move || serve(stream));
            }
        });
        Ok(Server { addr, stop, thread: Some(thread), _broker: broker })
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn pair_nodes(ov: &LoopbackOverlay, pair: usize) -> (&LoopbackNode, &LoopbackNode) {
    let n = ov.nodes.len();
    assert!(n >= 2, "need at least two nodes");
    (&ov.nodes[(2 * pair) % n], &ov.nodes[(2 * pair + 1) % n])
}

/// Connect-to-first-byte time per rep, microseconds.
pub fn ttfb(ov: &LoopbackOverlay, brokered: bool, pairs: usize, reps: usize) -> io::Result<BenchRecord> {
    let mut workers = Vec::new();
    let mut servers = Vec::new();
    for p in 0..pairs {
        let (client, server) = pair_nodes(ov, p);
        let srv = Server::start(server, brokered, |mut s| {
            let _ = s.write_all(&[1]);
            let mut sink = [0u8; 1];
            let _ = s.read(&mut sink);
        })?;
        let dst = srv.addr;
        servers.push(srv);
        let mut broker = broker_for(client, brokered)?;
        let ip = client.ip;
        workers.push(thread::spawn(move || {
            let mut samples = Vec::new();
            let mut failures = Vec::new();
            for _ in 0..reps {
                let t0 = Instant::now();
                match connect(ip, broker.as_mut(), dst).and_then(|mut s| {
                    let mut b = [0u8; 1];
                    s.read_exact(&mut b)
                }) {
                    Ok(()) => samples.push(t0.elapsed().as_nanos() as f64 / 1e3),
                    Err(e) => failures.push(e.to_string()),
                }
            }
            (samples, failures)
        }));
    }
    let mut rec = BenchRecord { connection_type: label(brokered), metric: Metric::Ttfb, samples: vec![], failures: vec![] };
    for w in workers {
        let (s, f) = w.join().expect("ttfb worker");
        rec.samples.extend(s);
        rec.failures.extend(f);
    }
    drop(servers);
    Ok(rec)
}

/// Per-rep mean round-trip time of `rounds` echoes, microseconds.
pub fn latency(
    ov: &LoopbackOverlay,
    brokered: bool,
    pairs: usize,
    msg_size: usize,
    rounds: usize,
    reps: usize,
) -> io::Result<BenchRecord> {
    let mut workers = Vec::new();
    let mut servers = Vec::new();
    for p in 0..pairs {
        let (client, server) = pair_nodes(ov, p);
        let srv = Server::start(server, brokered, move |mut s| {
            let mut buf = vec![0u8; msg_size];
            while s.read_exact(&mut buf).is_ok() {
                if s.write_all(&buf).is_err() {
                    return;
                }
            }
        })?;
        let dst = srv.addr;
        servers.push(srv);
        let mut broker = broker_for(client, brokered)?;
        let stream = connect(client.ip, broker.as_mut(), dst);
        workers.push(thread::spawn(move || -> Result<Vec<f64>, String> {
            let mut s = stream.map_err(|e| e.to_string())?;
            let msg = vec![0xa5u8; msg_size];
            let mut back = vec![0u8; msg_size];
            let mut means = Vec::with_capacity(reps);
            for _ in 0..reps {
                let mut total = Duration::ZERO;
                for _ in 0..rounds {
                    let t0 = Instant::now();
                    s.write_all(&msg).map_err(|e| e.to_string())?;
                    s.read_exact(&mut back).map_err(|e| e.to_string())?;
                    total += t0.elapsed();
                }
                means.push(total.as_nanos() as f64 / 1e3 / rounds as f64);
            }
            Ok(means)
        }));
    }
    let mut rec =
        BenchRecord { connection_type: label(brokered), metric: Metric::RttLatency, samples: vec![], failures: vec![] };
    for w in workers {
        match w.join().expect("latency worker") {
            Ok(s) => rec.samples.extend(s),
            Err(e) => rec.failures.push(e),
        }
    }
    drop(servers);
    Ok(rec)
}

/// Counts bytes into fixed intervals measured from a shared start.
struct Buckets {
    start: Instant,
    interval: Duration,
    counts: Vec<AtomicU64>,
}

impl Buckets {
    fn new(start: Instant, interval: Duration, duration: Duration) -> Self {
        let n = (duration.as_nanos() / interval.as_nanos().max(1)).max(1) as usize;
        Buckets { start, interval, counts: (0..n).map(|_| AtomicU64::new(0)).collect() }
    }

    fn add(&self, bytes: usize) {
        let idx = (self.start.elapsed().as_nanos() / self.interval.as_nanos()) as usize;
        if let Some(c) = self.counts.get(idx) {
            c.fetch_add(bytes as u64, Ordering::Relaxed);
        }
    }

    fn rates(&self) -> Vec<f64> {
        self.counts.iter().map(|c| mbits(c.load(Ordering::Relaxed), self.interval.as_secs_f64())).collect()
    }

    fn total(&self) -> u64 {
        self.counts.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }
}

fn blast(mut s: TcpStream, until: Instant) {
    let buf = vec![0x5au8; IO_BUF];
    while Instant::now() < until {
        if s.write_all(&buf).is_err() {
            return;
        }
    }
}

fn drain(mut s: TcpStream, buckets: &Buckets) {
    let mut buf = vec![0u8; IO_BUF];
    loop {
        match s.read(&mut buf) {
            Ok(0) | Err(_) => return,
            Ok(n) => buckets.add(n),
        }
    }
}

/// One saturating stream between nodes 0 and 1 for `duration`; returns
/// per-interval Mbit/s and the total byte count.
pub fn throughput(
    ov: &LoopbackOverlay,
    brokered: bool,
    duration: Duration,
    interval: Duration,
    direction: Direction,
) -> io::Result<(BenchRecord, u64)> {
    let (client, server) = pair_nodes(ov, 0);
    let (listener, _registration) = listen(server, brokered)?;
    let dst = listener.local_addr()?;
    let mut broker = broker_for(client, brokered)?;
    let stream = connect(client.ip, broker.as_mut(), dst)?;
    let (accepted, _) = listener.accept()?;
    let start = Instant::now();
    let until = start + duration;
    let buckets = Arc::new(Buckets::new(start, interval, duration));
    let (tx, rx) = match direction {
        Direction::Forward => (stream, accepted),
        Direction::Reverse => (accepted, stream),
    };
    let b = buckets.clone();
    let reader = thread::spawn(move || drain(rx, &b));
    blast(tx, until);
    reader.join().expect("throughput reader");
    let total = buckets.total();
    let rec = BenchRecord {
        connection_type: label(brokered),
        metric: direction.metric(),
        samples: buckets.rates(),
        failures: vec![],
    };
    Ok((rec, total))
}

/// `senders` streams into node 0 at once; aggregate Mbit/s per interval.
pub fn fanin(ov: &LoopbackOverlay, brokered: bool, senders: usize, duration: Duration, interval: Duration) -> io::Result<FanInPoint> {
    assert!(ov.nodes.len() >= 2 && senders >= 1);
    let (listener, _registration) = listen(&ov.nodes[0], brokered)?;
    let dst = listener.local_addr()?;
    let mut streams = Vec::with_capacity(senders);
    let mut failures = Vec::new();
    for i in 0..senders {
        let node = &ov.nodes[1 + i % (ov.nodes.len() - 1)];
        let mut broker = broker_for(node, brokered)?;
        match connect(node.ip, broker.as_mut(), dst) {
            Ok(s) => streams.push(s),
            Err(e) => failures.push(e.to_string()),
        }
    }
    let accepted: Vec<TcpStream> = (0..streams.len()).map(|_| listener.accept().map(|(s, _)| s)).collect::<io::Result<_>>()?;
    let start = Instant::now();
    let buckets = Arc::new(Buckets::new(start, interval, duration));
    let go = Arc::new(Barrier::new(streams.len()));
    let readers: Vec<_> = accepted
        .into_iter()
        .map(|s| {
            let b = buckets.clone();
            thread::spawn(move || drain(s, &b))
        })
        .collect();
    let writers: Vec<_> = streams
        .into_iter()
        .map(|s| {
            let go = go.clone();
            thread::spawn(move || {
                go.wait();
                blast(s, start + duration)
            })
        })
        .collect();
    for t in writers.into_iter().chain(readers) {
        t.join().expect("fan-in worker");
    }
    Ok(FanInPoint { senders, samples: buckets.rates(), failures })
}
