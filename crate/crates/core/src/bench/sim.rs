//! Benchmark applications as fabric processes, and the scenarios that run
//! them between overlay nodes.

use std::any::Any;
use std::collections::BTreeMap;
use std::time::Duration;

use super::{mbits, BenchRecord, ConnectionType, Direction, FanInPoint, Metric};
use crate::fabric::{FabricConfig, NatPolicy, ProcId};
use crate::overlay::{OverlayConfig, Placement, SimOverlay, IPC_PATH};
use crate::proto::{encode, ControlMessage, Endpoint, FrameReader, SetupErrorCode};
use crate::transport::{ConnId, NetEvent, NetIo, Process};

/// Application port; below any port a gateway allocates dynamically.
pub const APP_PORT: u16 = 80;

const TIMER_STREAM_END: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Server writes one byte on accept; the client times connect start to
    /// that byte.
    Ttfb { reps: usize },
    /// Client sends `msg_size` bytes, server echoes; `rounds` exchanges per
    /// rep, one mean per rep.
    PingPong { msg_size: usize, rounds: usize, reps: usize },
    /// One side streams for `duration` under a receiver-granted credit
    /// window; the receiver counts bytes per `interval`.
    Stream { duration: Duration, interval: Duration, client_sends: bool, chunk: usize, window: usize },
}

/// Bytes received per interval, starting at the first byte.
#[derive(Debug, Clone, Default)]
pub struct Meter {
    interval: Duration,
    start: Option<Duration>,
    buckets: Vec<u64>,
}

impl Meter {
    fn new(interval: Duration, duration: Duration) -> Self {
        let n = (duration.as_nanos() / interval.as_nanos().max(1)) as usize;
        Meter { interval, start: None, buckets: vec![0; n.max(1)] }
    }

    fn add(&mut self, now: Duration, bytes: usize) {
        let start = *self.start.get_or_insert(now);
        let idx = ((now - start).as_nanos() / self.interval.as_nanos()) as usize;
        if let Some(b) = self.buckets.get_mut(idx) {
            *b += bytes as u64;
        }
    }

    /// Per-interval rates in Mbit/s; empty if nothing arrived.
    pub fn rates(&self) -> Vec<f64> {
        if self.start.is_none() {
            return Vec::new();
        }
        self.buckets.iter().map(|b| mbits(*b, self.interval.as_secs_f64())).collect()
    }

    pub fn total(&self) -> u64 {
        self.buckets.iter().sum()
    }
}

#[derive(Debug, Default)]
struct Sender {
    credit: usize,
    pending: Vec<u8>,
    duration: Duration,
    /// Set by the first send so the stream spans exactly `duration`.
    stop_at: Option<Duration>,
}

impl Sender {
    /// Absorbs credit grants and sends as much as they allow.
    fn on_credit(&mut self, io: &mut dyn NetIo, conn: ConnId, bytes: &[u8], chunk: usize) -> bool {
        self.pending.extend_from_slice(bytes);
        let whole = self.pending.len() / 4 * 4;
        for c in self.pending.drain(..whole).collect::<Vec<_>>().chunks(4) {
            self.credit += u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize;
        }
        self.pump(io, conn, chunk)
    }

    /// Returns false once the stream is over.
    fn pump(&mut self, io: &mut dyn NetIo, conn: ConnId, chunk: usize) -> bool {
        let stop_at = *self.stop_at.get_or_insert(io.now() + self.duration);
        if io.now() >= stop_at {
            io.close(conn);
            return false;
        }
        let block = vec![0x5a; chunk];
        while self.credit >= chunk {
            io.send(conn, &block);
            self.credit -= chunk;
        }
        true
    }
}

fn grant(io: &mut dyn NetIo, conn: ConnId, bytes: usize) {
    io.send(conn, &(bytes as u32).to_be_bytes());
}

/// Accepting side of every workload.
pub struct SimServer {
    port: u16,
    ipc: Option<String>,
    workload: Workload,
    listening: Option<Endpoint>,
    ipc_conn: Option<ConnId>,
    senders: BTreeMap<ConnId, Sender>,
    meter: Meter,
    accepted: usize,
}

impl SimServer {
    pub fn new(port: u16, ipc: Option<String>, workload: Workload) -> Self {
        let meter = match workload {
            Workload::Stream { duration, interval, .. } => Meter::new(interval, duration),
            _ => Meter::default(),
        };
        SimServer { port, ipc, workload, listening: None, ipc_conn: None, senders: BTreeMap::new(), meter, accepted: 0 }
    }

    pub fn meter(&self) -> &Meter {
        &self.meter
    }

    pub fn accepted(&self) -> usize {
        self.accepted
    }

    pub fn listening(&self) -> Option<Endpoint> {
        self.listening
    }
}

impl Process for SimServer {
    fn on_event(&mut self, io: &mut dyn NetIo, event: NetEvent) {
        match event {
            NetEvent::Started => {
                match io.listen(io.local_ip(), self.port, true) {
                    Ok(ep) => self.listening = Some(ep),
                    Err(e) => log::error!("bench server: {e}"),
                }
                if let Some(path) = self.ipc.clone() {
                    self.ipc_conn = Some(io.connect_local(&path));
                }
            }
            NetEvent::Connected { conn } if Some(conn) == self.ipc_conn => {
                if let Some(endpoint) = self.listening {
                    io.send(conn, &encode(&ControlMessage::RegisterListener { endpoint }));
                }
            }
            NetEvent::Accepted { conn, .. } => {
                self.accepted += 1;
                match self.workload {
                    Workload::Ttfb { .. } => io.send(conn, &[1]),
                    Workload::PingPong { .. } => {}
                    Workload::Stream { client_sends: true, window, .. } => grant(io, conn, window),
                    Workload::Stream { client_sends: false, duration, .. } => {
                        self.senders.insert(conn, Sender { duration, ..Sender::default() });
                    }
                }
            }
            NetEvent::Data { conn, bytes } => match self.workload {
                Workload::PingPong { .. } => io.send(conn, &bytes),
                Workload::Stream { client_sends: true, .. } => {
                    self.meter.add(io.now(), bytes.len());
                    grant(io, conn, bytes.len());
                }
                Workload::Stream { client_sends: false, chunk, .. } => {
                    if let Some(s) = self.senders.get_mut(&conn) {
                        if !s.on_credit(io, conn, &bytes, chunk) {
                            self.senders.remove(&conn);
                        }
                    }
                }
                Workload::Ttfb { .. } => {}
            },
            NetEvent::Closed { conn } => {
                self.senders.remove(&conn);
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Requesting { local: Endpoint },
    Connecting,
    Open,
    Done,
}

/// Connecting side of every workload.
pub struct SimClient {
    target: Endpoint,
    ipc: Option<String>,
    workload: Workload,
    ipc_conn: Option<ConnId>,
    ipc_reader: FrameReader,
    next_req: u64,
    phase: Phase,
    conn: Option<ConnId>,
    t0: Duration,
    reps_done: usize,
    rounds_done: usize,
    echoed: usize,
    round_rtts: Vec<Duration>,
    sender: Sender,
    pub ttfb: Vec<Duration>,
    pub rtt_means: Vec<Duration>,
    pub failures: Vec<String>,
    meter: Meter,
}

impl SimClient {
    /// `ipc` set means setup goes through the local agent.
    pub fn new(target: Endpoint, ipc: Option<String>, workload: Workload) -> Self {
        let meter = match workload {
            Workload::Stream { duration, interval, .. } => Meter::new(interval, duration),
            _ => Meter::default(),
        };
        SimClient {
            target,
            ipc,
            workload,
            ipc_conn: None,
            ipc_reader: FrameReader::new(),
            next_req: 1,
            phase: Phase::Idle,
            conn: None,
            t0: Duration::ZERO,
            reps_done: 0,
            rounds_done: 0,
            echoed: 0,
            round_rtts: Vec::new(),
            sender: Sender::default(),
            ttfb: Vec::new(),
            rtt_means: Vec::new(),
            failures: Vec::new(),
            meter,
        }
    }

    pub fn done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn meter(&self) -> &Meter {
        &self.meter
    }

    fn reps(&self) -> usize {
        match self.workload {
            Workload::Ttfb { reps } | Workload::PingPong { reps, .. } => reps,
            Workload::Stream { .. } => 1,
        }
    }

    fn begin(&mut self, io: &mut dyn NetIo) {
        if self.reps_done >= self.reps() {
            self.phase = Phase::Done;
            return;
        }
        self.t0 = io.now();
        match self.ipc_conn {
            Some(ipc) => {
                let local = match io.bind_ephemeral() {
                    Ok(ep) => ep,
                    Err(e) => return self.fail(io, e.to_string()),
                };
                let req_id = self.next_req;
                self.next_req += 1;
                io.send(ipc, &encode(&ControlMessage::NatSetupReq { req_id, src: local, dst: self.target }));
                self.phase = Phase::Requesting { local };
            }
            None => self.dial(io, None),
        }
    }

    fn dial(&mut self, io: &mut dyn NetIo, local: Option<Endpoint>) {
        self.conn = Some(io.connect(local, self.target));
        self.phase = Phase::Connecting;
    }

    /// Records a failed rep and moves on.
    fn fail(&mut self, io: &mut dyn NetIo, reason: String) {
        self.failures.push(reason);
        self.conn = None;
        self.reps_done += 1;
        self.begin(io);
    }

    fn finish_rep(&mut self, io: &mut dyn NetIo) {
        if let Some(conn) = self.conn.take() {
            io.close(conn);
        }
        self.reps_done += 1;
        self.begin(io);
    }

    fn on_ipc(&mut self, io: &mut dyn NetIo, msg: ControlMessage) {
        let Phase::Requesting { local } = self.phase else { return };
        match msg {
            ControlMessage::NatSetupAck { .. } => self.dial(io, Some(local)),
            ControlMessage::NatSetupErr { code: SetupErrorCode::UnknownDestination, .. } => {
                self.dial(io, Some(local))
            }
            ControlMessage::NatSetupErr { code, .. } => self.fail(io, code.to_string()),
            other => log::warn!("bench client: unexpected {other:?}"),
        }
    }

    fn send_round(&mut self, io: &mut dyn NetIo, conn: ConnId, msg_size: usize) {
        self.echoed = 0;
        self.t0 = io.now();
        io.send(conn, &vec![0xa5; msg_size]);
    }

    fn on_data(&mut self, io: &mut dyn NetIo, conn: ConnId, bytes: Vec<u8>) {
        match self.workload {
            Workload::Ttfb { .. } => {
                self.ttfb.push(io.now() - self.t0);
                self.finish_rep(io);
            }
            Workload::PingPong { msg_size, rounds, .. } => {
                self.echoed += bytes.len();
                if self.echoed < msg_size {
                    return;
                }
                self.round_rtts.push(io.now() - self.t0);
                self.rounds_done += 1;
                if self.rounds_done < rounds {
                    return self.send_round(io, conn, msg_size);
                }
                let total: Duration = self.round_rtts.drain(..).sum();
                self.rtt_means.push(total / rounds as u32);
                self.rounds_done = 0;
                self.reps_done += 1;
                if self.reps_done < self.reps() {
                    self.send_round(io, conn, msg_size);
                } else {
                    io.close(conn);
                    self.conn = None;
                    self.phase = Phase::Done;
                }
            }
            Workload::Stream { client_sends: true, chunk, .. } => {
                if !self.sender.on_credit(io, conn, &bytes, chunk) {
                    self.conn = None;
                    self.phase = Phase::Done;
                }
            }
            Workload::Stream { client_sends: false, .. } => {
                self.meter.add(io.now(), bytes.len());
                grant(io, conn, bytes.len());
            }
        }
    }
}

impl Process for SimClient {
    fn on_event(&mut self, io: &mut dyn NetIo, event: NetEvent) {
        match event {
            NetEvent::Started => match self.ipc.clone() {
                Some(path) => self.ipc_conn = Some(io.connect_local(&path)),
                None => self.begin(io),
            },
            NetEvent::Connected { conn } if Some(conn) == self.ipc_conn => self.begin(io),
            NetEvent::ConnectFailed { conn, error } if Some(conn) == self.ipc_conn => {
                self.failures.push(format!("ipc: {error}"));
                self.phase = Phase::Done;
            }
            NetEvent::Connected { conn } if Some(conn) == self.conn => {
                self.phase = Phase::Open;
                match self.workload {
                    Workload::Ttfb { .. } => {}
                    Workload::PingPong { msg_size, .. } => self.send_round(io, conn, msg_size),
                    Workload::Stream { client_sends: true, duration, .. } => {
                        self.sender = Sender { duration, ..Sender::default() };
                    }
                    Workload::Stream { client_sends: false, window, duration, .. } => {
                        grant(io, conn, window);
                        io.set_timer(duration * 2, TIMER_STREAM_END);
                    }
                }
            }
            NetEvent::ConnectFailed { conn, error } if Some(conn) == self.conn => self.fail(io, error.to_string()),
            NetEvent::Data { conn, bytes } if Some(conn) == self.ipc_conn => {
                self.ipc_reader.push(&bytes);
                while let Ok(Some((msg, _))) = self.ipc_reader.next_frame() {
                    self.on_ipc(io, msg);
                }
            }
            NetEvent::Data { conn, bytes } if Some(conn) == self.conn => self.on_data(io, conn, bytes),
            NetEvent::Closed { conn } if Some(conn) == self.conn => {
                self.conn = None;
                if matches!(self.workload, Workload::Stream { .. }) {
                    self.phase = Phase::Done;
                } else if self.phase != Phase::Done {
                    self.fail(io, "closed by peer".into());
                }
            }
            NetEvent::Timer { token: TIMER_STREAM_END } => {
                if let Some(conn) = self.conn.take() {
                    io.close(conn);
                }
                self.phase = Phase::Done;
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[derive(Debug, Clone)]
pub struct SimBenchConfig {
    pub connection_type: ConnectionType,
    pub pairs: usize,
    /// One-way link delay.
    pub delay: Duration,
    pub rng_seed: u64,
    pub policy: NatPolicy,
    pub connect_timeout: Duration,
    pub record_trace: bool,
}

impl Default for SimBenchConfig {
    fn default() -> Self {
        SimBenchConfig {
            connection_type: ConnectionType::FunctionToFunction,
            pairs: 1,
            delay: Duration::from_micros(100),
            rng_seed: 1,
            policy: NatPolicy::default(),
            connect_timeout: Duration::from_secs(1),
            record_trace: false,
        }
    }
}

impl SimBenchConfig {
    fn overlay_config(&self) -> OverlayConfig {
        OverlayConfig {
            fabric: FabricConfig {
                rng_seed: self.rng_seed,
                link_delay: self.delay,
                connect_timeout: self.connect_timeout,
                record_trace: self.record_trace,
                ..FabricConfig::default()
            },
            policy: self.policy,
            ..OverlayConfig::default()
        }
    }
}

/// An overlay with benchmark servers and clients attached.
pub struct Scenario {
    pub overlay: SimOverlay,
    pub servers: Vec<ProcId>,
    pub clients: Vec<ProcId>,
    /// Simulated time when the clients were started.
    pub clients_started: Duration,
}

impl Scenario {
    pub fn client(&self, i: usize) -> &SimClient {
        self.overlay.fabric.process::<SimClient>(self.clients[i]).expect("client")
    }

    pub fn server(&self, i: usize) -> &SimServer {
        self.overlay.fabric.process::<SimServer>(self.servers[i]).expect("server")
    }

    pub fn run(&mut self) {
        self.overlay.drain();
    }
}

/// Joins the overlay with function nodes first, so functions take the
/// lower ids and dial VMs for their control links.
fn join(overlay: &mut SimOverlay) {
    for placement in [Placement::Function, Placement::Vm] {
        for i in 0..overlay.nodes.len() {
            if overlay.nodes[i].placement == placement {
                overlay.start(i);
            }
        }
    }
    overlay.drain();
}

/// Builds `servers` accepting nodes and `clients` connecting nodes (client
/// `c` targets server `c % servers`), joins them and registers listeners.
/// Clients are spawned but not yet run.
pub fn build(config: &SimBenchConfig, servers: usize, clients: usize, workload: Workload, server_workload: Workload) -> Scenario {
    let t = config.connection_type;
    let mut placements = vec![t.server(); servers];
    placements.extend(std::iter::repeat_n(t.client(), clients));
    let mut overlay = SimOverlay::new(config.overlay_config(), &placements);
    join(&mut overlay);

    let ipc = t.brokered().then(|| IPC_PATH.to_string());
    let server_pids: Vec<ProcId> = (0..servers)
        .map(|i| {
            let host = overlay.nodes[i].host;
            overlay.fabric.spawn(host, Box::new(SimServer::new(APP_PORT, ipc.clone(), server_workload)))
        })
        .collect();
    overlay.drain();

    let clients_started = overlay.fabric.now();
    let client_pids = (0..clients)
        .map(|c| {
            let s = c % servers;
            let target = Endpoint::new(overlay.external_ip(s), APP_PORT).expect("nonzero");
            let host = overlay.nodes[servers + c].host;
            overlay.fabric.spawn(host, Box::new(SimClient::new(target, ipc.clone(), workload)))
        })
        .collect();
    Scenario { overlay, servers: server_pids, clients: client_pids, clients_started }
}

fn us(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e3
}

fn record(config: &SimBenchConfig, metric: Metric, samples: Vec<f64>, failures: Vec<String>) -> BenchRecord {
    BenchRecord { connection_type: config.connection_type, metric, samples, failures }
}

pub fn ttfb(config: &SimBenchConfig, reps: usize) -> BenchRecord {
    let w = Workload::Ttfb { reps };
    let mut s = build(config, config.pairs, config.pairs, w, w);
    s.run();
    let (mut samples, mut failures) = (Vec::new(), Vec::new());
    for i in 0..config.pairs {
        let c = s.client(i);
        samples.extend(c.ttfb.iter().map(|d| us(*d)));
        failures.extend(c.failures.iter().cloned());
    }
    record(config, Metric::Ttfb, samples, failures)
}

pub fn latency(config: &SimBenchConfig, msg_size: usize, rounds: usize, reps: usize) -> BenchRecord {
    let w = Workload::PingPong { msg_size, rounds, reps };
    let mut s = build(config, config.pairs, config.pairs, w, w);
    s.run();
    let (mut samples, mut failures) = (Vec::new(), Vec::new());
    for i in 0..config.pairs {
        let c = s.client(i);
        samples.extend(c.rtt_means.iter().map(|d| us(*d)));
        failures.extend(c.failures.iter().cloned());
    }
    record(config, Metric::RttLatency, samples, failures)
}

/// Credit-window stream sizes used by the throughput runs.
pub const STREAM_CHUNK: usize = 16 * 1024;
pub const STREAM_WINDOW: usize = 64 * 1024;

pub fn stream_workload(duration: Duration, interval: Duration, client_sends: bool, window: usize) -> Workload {
    Workload::Stream { duration, interval, client_sends, chunk: STREAM_CHUNK.min(window), window }
}

pub fn throughput(config: &SimBenchConfig, duration: Duration, interval: Duration, direction: Direction) -> BenchRecord {
    let w = stream_workload(duration, interval, direction == Direction::Forward, STREAM_WINDOW);
    let mut s = build(config, config.pairs, config.pairs, w, w);
    s.run();
    let (mut samples, mut failures) = (Vec::new(), Vec::new());
    for i in 0..config.pairs {
        failures.extend(s.client(i).failures.iter().cloned());
        let rates = match direction {
            Direction::Forward => s.server(i).meter().rates(),
            Direction::Reverse => s.client(i).meter().rates(),
        };
        if rates.is_empty() && s.client(i).failures.is_empty() {
            failures.push(format!("pair {i}: no data received"));
        }
        samples.extend(rates);
    }
    record(config, direction.metric(), samples, failures)
}

/// `senders` clients stream into one server that grants a fixed total
/// window split evenly between them.
pub fn fanin(config: &SimBenchConfig, senders: usize, duration: Duration, interval: Duration) -> FanInPoint {
    assert!(senders >= 1);
    let per_sender = (STREAM_WINDOW / senders).max(1024);
    let w = stream_workload(duration, interval, true, per_sender);
    let mut s = build(config, 1, senders, w, w);
    s.run();
    let failures = (0..senders).flat_map(|i| s.client(i).failures.clone()).collect();
    FanInPoint { senders, samples: s.server(0).meter().rates(), failures }
}
