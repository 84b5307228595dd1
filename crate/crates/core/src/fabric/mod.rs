//! Deterministic in-process network fabric.
//!
//! Hosts sit either on the public network or inside a private subnet behind
//! a [`NatGateway`]. Every link has the same one-way delay; segments between
//! processes on one host arrive with zero delay. TCP is modelled at
//! handshake granularity: a connection is established at both ends at the
//! instant the SYN-ACK reaches the connector, so a request/response over a
//! fresh connection costs `SYN + SYN-ACK + DATA = 3 * delay`.
//!
//! All events run on one thread in `(time, seq)` order, so identical
//! configuration and inputs produce an identical trace.

mod nat;
mod segment;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

pub use nat::{
    DropReason, FilteringBehavior, InboundVerdict, MappingBehavior, NatError, NatGateway, NatMapping,
    NatPolicy, PortAllocation,
};
pub use segment::{Segment, SegmentKind};

use segment::Flow;

use crate::proto::Endpoint;
use crate::transport::{ConnId, ConnectError, NetEvent, NetIo, Process, TransportError};

const EPHEMERAL_FIRST: u16 = 49152;

/// An IPv4 prefix such as `10.0.0.0/24`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Subnet {
    base: Ipv4Addr,
    prefix: u8,
}

impl Subnet {
    pub fn new(base: Ipv4Addr, prefix: u8) -> Self {
        assert!(prefix <= 32, "prefix length {prefix} out of range");
        let masked = u32::from(base) & Self::mask(prefix);
        Subnet { base: Ipv4Addr::from(masked), prefix }
    }

    fn mask(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - prefix)
        }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask(self.prefix) == u32::from(self.base)
    }

    /// The `n`th address in the subnet.
    pub fn host(&self, n: u32) -> Ipv4Addr {
        Ipv4Addr::from(u32::from(self.base) + n)
    }
}

impl fmt::Display for Subnet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.prefix)
    }
}

impl FromStr for Subnet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ip, prefix) = s.split_once('/').ok_or_else(|| format!("missing prefix length in {s:?}"))?;
        let ip: Ipv4Addr = ip.parse().map_err(|e| format!("{s:?}: {e}"))?;
        let prefix: u8 = prefix.parse().map_err(|e| format!("{s:?}: {e}"))?;
        if prefix > 32 {
            return Err(format!("{s:?}: prefix length out of range"));
        }
        Ok(Subnet::new(ip, prefix))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatewaySpec {
    pub public_ip: Ipv4Addr,
    pub policy: NatPolicy,
}

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub rng_seed: u64,
    /// One-way delay of every link.
    pub link_delay: Duration,
    pub gateways: BTreeMap<Subnet, GatewaySpec>,
    pub mapping_idle_timeout: Option<Duration>,
    /// How long a SYN may go unanswered before `TimedOut`.
    pub connect_timeout: Duration,
    pub record_trace: bool,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            rng_seed: 0,
            link_delay: Duration::from_micros(100),
            gateways: BTreeMap::new(),
            mapping_idle_timeout: None,
            connect_timeout: Duration::from_secs(1),
            record_trace: true,
        }
    }
}

impl FabricConfig {
    pub fn with_gateway(mut self, subnet: Subnet, public_ip: Ipv4Addr, policy: NatPolicy) -> Self {
        self.gateways.insert(subnet, GatewaySpec { public_ip, policy });
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct HostId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ProcId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Delivered,
    Dropped(DropReason),
    /// Source gateway could not allocate an external port.
    PortExhausted,
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Verdict::Delivered => s.serialize_str("delivered"),
            Verdict::PortExhausted => s.serialize_str("dropped:port-exhausted"),
            Verdict::Dropped(r) => {
                let name = serde_json::to_value(r).map_err(serde::ser::Error::custom)?;
                s.collect_str(&format_args!("dropped:{}", name.as_str().unwrap_or("unknown")))
            }
        }
    }
}

fn ser_ns<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_nanos() as u64)
}

/// One segment's fate. `src`/`dst` are the on-wire addresses after
/// source NAT; `to` is the internal endpoint it was handed to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    #[serde(serialize_with = "ser_ns")]
    pub time: Duration,
    pub seq: u64,
    pub kind: SegmentKind,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub verdict: Verdict,
    pub to: Option<Endpoint>,
    pub len: usize,
    #[serde(serialize_with = "ser_ns")]
    pub sent: Duration,
    /// Scheduler step that emitted the segment.
    pub sent_step: u64,
    /// Scheduler step that resolved it.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FabricEvent {
    Segment(TraceRecord),
    Process { pid: ProcId, time: Duration },
    Idle { time: Duration },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Event(FabricEvent),
    Exhausted,
}

#[derive(Debug)]
struct Listener {
    owner: ProcId,
    shared: bool,
}

#[derive(Debug)]
struct Host {
    ip: Ipv4Addr,
    gateway: Option<usize>,
    listeners: BTreeMap<u16, Listener>,
    local_listeners: BTreeMap<String, ProcId>,
    reserved: BTreeSet<u16>,
    next_ephemeral: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConnState {
    Connecting,
    /// Acceptor half waiting for its SYN-ACK to land.
    HalfOpen,
    Established,
}

#[derive(Debug)]
struct Conn {
    host: HostId,
    owner: ProcId,
    local: Endpoint,
    /// Remote address as seen by this host.
    remote: Endpoint,
    peer: Option<u64>,
    state: ConnState,
    is_connector: bool,
    local_ipc: bool,
    release_port: bool,
}

#[derive(Debug)]
enum Pending {
    Arrive { seg: Segment, origin: HostId, sent: Duration, sent_step: u64 },
    Deliver { pid: ProcId, event: NetEvent },
    ConnectTimeout { conn: u64 },
}

struct Net {
    config: FabricConfig,
    now: Duration,
    seq: u64,
    step: u64,
    queue: BTreeMap<(Duration, u64), Pending>,
    hosts: Vec<Host>,
    proc_host: Vec<HostId>,
    gateways: Vec<NatGateway>,
    conns: BTreeMap<u64, Conn>,
    next_conn: u64,
    trace: Vec<TraceRecord>,
    segments_total: u64,
}

struct ProcSlot {
    process: Box<dyn Process>,
}

/// The simulated network plus the processes running on it.
pub struct Fabric {
    net: Net,
    procs: Vec<ProcSlot>,
}

impl Fabric {
    pub fn new(config: FabricConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let gateways = config
            .gateways
            .iter()
            .map(|(subnet, spec)| {
                let base = rng.gen_range(1024..32768u16);
                let mut g = NatGateway::with_port_base(spec.public_ip, *subnet, spec.policy, base);
                g.set_idle_timeout(config.mapping_idle_timeout);
                g
            })
            .collect();
        Fabric {
            net: Net {
                config,
                now: Duration::ZERO,
                seq: 0,
                step: 0,
                queue: BTreeMap::new(),
                hosts: Vec::new(),
                proc_host: Vec::new(),
                gateways,
                conns: BTreeMap::new(),
                next_conn: 1,
                trace: Vec::new(),
                segments_total: 0,
            },
            procs: Vec::new(),
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.net.config
    }

    /// Adds a host; it sits behind the gateway whose subnet contains `ip`,
    /// or on the public network otherwise.
    pub fn add_host(&mut self, ip: Ipv4Addr) -> HostId {
        assert!(
            !self.net.gateways.iter().any(|g| g.public_ip() == ip),
            "{ip} is a gateway address"
        );
        let gateway = self.net.gateways.iter().position(|g| g.subnet().contains(ip));
        let seed_offset = self.net.config.rng_seed.wrapping_mul(0x9e37_79b9) ^ self.net.hosts.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed_offset);
        self.net.hosts.push(Host {
            ip,
            gateway,
            listeners: BTreeMap::new(),
            local_listeners: BTreeMap::new(),
            reserved: BTreeSet::new(),
            next_ephemeral: rng.gen_range(EPHEMERAL_FIRST..60000),
        });
        HostId(self.net.hosts.len() - 1)
    }

    /// Adds a second sandbox sharing `with`'s private address and gateway,
    /// as when two function instances land on one machine.
    pub fn add_colocated_host(&mut self, with: HostId) -> HostId {
        let ip = self.net.hosts[with.0].ip;
        self.add_host(ip)
    }

    pub fn host_ip(&self, host: HostId) -> Ipv4Addr {
        self.net.hosts[host.0].ip
    }

    /// Gateway in front of `host`, if it is behind one.
    pub fn gateway_of(&self, host: HostId) -> Option<&NatGateway> {
        self.net.hosts[host.0].gateway.map(|g| &self.net.gateways[g])
    }

    pub fn gateways(&self) -> &[NatGateway] {
        &self.net.gateways
    }

    /// Starts a process on `host`; it receives `Started` at the current time.
    pub fn spawn(&mut self, host: HostId, process: Box<dyn Process>) -> ProcId {
        let pid = ProcId(self.procs.len());
        self.procs.push(ProcSlot { process });
        self.net.proc_host.push(host);
        self.net.schedule(Duration::ZERO, Pending::Deliver { pid, event: NetEvent::Started });
        pid
    }

    pub fn host_of(&self, pid: ProcId) -> HostId {
        self.net.proc_host[pid.0]
    }

    pub fn process<T: Process>(&self, pid: ProcId) -> Option<&T> {
        self.procs.get(pid.0)?.process.as_any().downcast_ref()
    }

    pub fn process_mut<T: Process>(&mut self, pid: ProcId) -> Option<&mut T> {
        self.procs.get_mut(pid.0)?.process.as_any_mut().downcast_mut()
    }

    pub fn now(&self) -> Duration {
        self.net.now
    }

    pub fn pending(&self) -> usize {
        self.net.queue.len()
    }

    /// Time of the next queued event.
    pub fn next_event_time(&self) -> Option<Duration> {
        self.net.queue.keys().next().map(|(t, _)| *t)
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.net.trace
    }

    /// Segments resolved so far, whether or not tracing is on.
    pub fn segments_total(&self) -> u64 {
        self.net.segments_total
    }

    /// The trace as JSON lines, one object per segment.
    pub fn trace_json(&self) -> String {
        let mut out = String::new();
        for r in &self.net.trace {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn clear_trace(&mut self) {
        self.net.trace.clear();
    }

    /// Processes the next event in `(time, seq)` order.
    pub fn step(&mut self) -> Step {
        let Some(((time, seq), item)) = self.net.queue.pop_first() else {
            return Step::Exhausted;
        };
        self.net.now = time;
        self.net.step += 1;
        match item {
            Pending::Arrive { mut seg, origin, sent, sent_step } => {
                seg.seq = seq;
                let record = self.net.arrive(seg, origin, sent, sent_step);
                Step::Event(FabricEvent::Segment(record))
            }
            Pending::Deliver { pid, event } => {
                self.dispatch(pid, event);
                Step::Event(FabricEvent::Process { pid, time })
            }
            Pending::ConnectTimeout { conn } => {
                let expired = matches!(self.net.conns.get(&conn), Some(c) if c.state == ConnState::Connecting);
                if expired {
                    let c = self.net.remove_conn(conn).expect("checked above");
                    let pid = c.owner;
                    self.dispatch(
                        pid,
                        NetEvent::ConnectFailed { conn: ConnId(conn), error: ConnectError::TimedOut },
                    );
                    Step::Event(FabricEvent::Process { pid, time })
                } else {
                    Step::Event(FabricEvent::Idle { time })
                }
            }
        }
    }

    fn dispatch(&mut self, pid: ProcId, event: NetEvent) {
        let host = self.net.proc_host[pid.0];
        let slot = &mut self.procs[pid.0];
        let mut io = SimIo { net: &mut self.net, pid, host };
        slot.process.on_event(&mut io, event);
    }

    /// Runs until the queue is empty. Returns the number of steps taken.
    pub fn run(&mut self) -> u64 {
        let mut n = 0;
        while let Step::Event(_) = self.step() {
            n += 1;
        }
        n
    }

    /// Runs every event scheduled at or before `deadline`, then advances
    /// the clock to `deadline`.
    pub fn run_until(&mut self, deadline: Duration) {
        while self.next_event_time().is_some_and(|t| t <= deadline) {
            self.step();
        }
        if self.net.now < deadline {
            self.net.now = deadline;
        }
    }

    /// Steps until `done` holds or the queue empties or simulated time
    /// passes `deadline`. Returns whether `done` held.
    pub fn run_while_pending(&mut self, deadline: Duration, mut done: impl FnMut(&Fabric) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            match self.next_event_time() {
                Some(t) if t <= deadline => {
                    self.step();
                }
                _ => return done(self),
            }
        }
    }
}

impl Net {
    fn schedule(&mut self, delay: Duration, item: Pending) -> u64 {
        self.seq += 1;
        let seq = self.seq;
        self.queue.insert((self.now + delay, seq), item);
        seq
    }

    fn deliver(&mut self, pid: ProcId, event: NetEvent) {
        self.schedule(Duration::ZERO, Pending::Deliver { pid, event });
    }

    fn gateway_by_public(&self, ip: Ipv4Addr) -> Option<usize> {
        self.gateways.iter().position(|g| g.public_ip() == ip)
    }

    fn same_site(&self, a: HostId, ip: Ipv4Addr) -> bool {
        match self.hosts[a.0].gateway {
            Some(g) => self.gateways[g].subnet().contains(ip),
            None => false,
        }
    }

    /// Sends a segment from `host`, applying source NAT when it leaves a
    /// private subnet.
    fn emit(&mut self, host: HostId, mut seg: Segment) {
        let h = &self.hosts[host.0];
        let same_host = seg.dst.ip() == h.ip;
        let crosses_gateway = h.gateway.is_some() && !same_host && !self.same_site(host, seg.dst.ip());
        let sent = self.now;
        let sent_step = self.step;
        if crosses_gateway {
            let g = h.gateway.expect("checked");
            match self.gateways[g].translate_outbound(seg.clone(), self.now) {
                Ok(translated) => seg = translated,
                Err(err) => {
                    log::warn!("fabric: outbound translation failed: {err}");
                    self.seq += 1;
                    self.segments_total += 1;
                    self.record(TraceRecord {
                        time: self.now,
                        seq: self.seq,
                        kind: seg.kind,
                        src: seg.src,
                        dst: seg.dst,
                        verdict: Verdict::PortExhausted,
                        to: None,
                        len: seg.payload.len(),
                        sent,
                        sent_step,
                        step: self.step,
                    });
                    return;
                }
            }
        }
        let delay = if same_host { Duration::ZERO } else { self.config.link_delay };
        self.schedule(delay, Pending::Arrive { seg, origin: host, sent, sent_step });
    }

    fn record(&mut self, r: TraceRecord) {
        if self.config.record_trace {
            self.trace.push(r);
        }
    }

    fn arrive(&mut self, seg: Segment, origin: HostId, sent: Duration, sent_step: u64) -> TraceRecord {
        self.segments_total += 1;
        let (verdict, to) = match self.route(&seg, origin) {
            Ok((hosts, target)) => match self.handle_at_host(&seg, &hosts, target) {
                Ok(()) => (Verdict::Delivered, Some(target)),
                Err(reason) => (Verdict::Dropped(reason), Some(target)),
            },
            Err(reason) => (Verdict::Dropped(reason), None),
        };
        if let Verdict::Dropped(_) = verdict {
            self.on_drop(&seg);
        }
        let record = TraceRecord {
            time: self.now,
            seq: seg.seq,
            kind: seg.kind,
            src: seg.src,
            dst: seg.dst,
            verdict,
            to,
            len: seg.payload.len(),
            sent,
            sent_step,
            step: self.step,
        };
        self.record(record.clone());
        record
    }

    /// Resolves the hosts that may own the segment's destination and the
    /// internal destination endpoint.
    fn route(&mut self, seg: &Segment, origin: HostId) -> Result<(Vec<HostId>, Endpoint), DropReason> {
        let dst_ip = seg.dst.ip();
        if let Some(g) = self.gateway_by_public(dst_ip) {
            let target = match self.gateways[g].filter_inbound(seg, self.now) {
                InboundVerdict::Deliver(internal) => internal,
                InboundVerdict::Drop(reason) => return Err(reason),
            };
            let hosts = self.hosts_with_ip(target.ip());
            if hosts.is_empty() {
                return Err(DropReason::NoSocket);
            }
            return Ok((hosts, target));
        }
        let hosts = self.hosts_with_ip(dst_ip);
        let Some(&first) = hosts.first() else {
            return Err(DropReason::Unroutable);
        };
        let private = self.hosts[first.0].gateway.is_some();
        if private && self.hosts[origin.0].ip != dst_ip && !self.same_site(origin, dst_ip) {
            return Err(DropReason::Unroutable);
        }
        Ok((hosts, seg.dst))
    }

    fn hosts_with_ip(&self, ip: Ipv4Addr) -> Vec<HostId> {
        self.hosts.iter().enumerate().filter(|(_, h)| h.ip == ip).map(|(i, _)| HostId(i)).collect()
    }

    fn handle_at_host(&mut self, seg: &Segment, hosts: &[HostId], target: Endpoint) -> Result<(), DropReason> {
        match (seg.kind, seg.flow) {
            (SegmentKind::Punch, _) => Ok(()),
            (SegmentKind::Syn, Flow::Open(cid)) => {
                let listener = hosts.iter().find_map(|h| {
                    self.hosts[h.0].listeners.get(&target.port()).map(|l| (*h, l.owner))
                });
                match listener {
                    Some((host, owner)) => {
                        let acc = self.alloc_conn_id();
                        self.conns.insert(
                            acc,
                            Conn {
                                host,
                                owner,
                                local: target,
                                remote: seg.src,
                                peer: Some(cid),
                                state: ConnState::HalfOpen,
                                is_connector: false,
                                local_ipc: false,
                                release_port: false,
                            },
                        );
                        if let Some(c) = self.conns.get_mut(&cid) {
                            c.peer = Some(acc);
                        }
                        let mut reply = Segment::new(SegmentKind::SynAck, target, seg.src);
                        reply.flow = Flow::ToConnector(cid);
                        self.emit(host, reply);
                    }
                    None => {
                        let mut reply = Segment::new(SegmentKind::Rst, target, seg.src);
                        reply.flow = Flow::ToConnector(cid);
                        self.emit(hosts[0], reply);
                    }
                }
                Ok(())
            }
            (SegmentKind::SynAck, Flow::ToConnector(cid)) => {
                let ok = matches!(self.conns.get(&cid), Some(c)
                    if c.state == ConnState::Connecting && hosts.contains(&c.host)
                        && c.local == target && c.remote == seg.src);
                if !ok {
                    return Err(DropReason::NoSocket);
                }
                let c = self.conns.get_mut(&cid).expect("checked");
                c.state = ConnState::Established;
                let connector_owner = c.owner;
                let acc = c.peer.expect("SYN registered the acceptor half");
                self.deliver(connector_owner, NetEvent::Connected { conn: ConnId(cid) });
                if let Some(a) = self.conns.get_mut(&acc) {
                    a.state = ConnState::Established;
                    let (owner, local, peer) = (a.owner, a.local, a.remote);
                    self.deliver(owner, NetEvent::Accepted { conn: ConnId(acc), local, peer });
                }
                Ok(())
            }
            (SegmentKind::Rst, Flow::ToConnector(cid)) => {
                let ok = matches!(self.conns.get(&cid), Some(c)
                    if c.state == ConnState::Connecting && hosts.contains(&c.host));
                if !ok {
                    return Err(DropReason::NoSocket);
                }
                let c = self.remove_conn(cid).expect("checked");
                self.deliver(c.owner, NetEvent::ConnectFailed { conn: ConnId(cid), error: ConnectError::Refused });
                Ok(())
            }
            (SegmentKind::Data, Flow::ToConnector(id) | Flow::ToAcceptor(id)) => {
                let owner = match self.conns.get(&id) {
                    Some(c) if c.state == ConnState::Established
                        && hosts.contains(&c.host)
                        && c.local == target
                        && c.remote == seg.src =>
                    {
                        c.owner
                    }
                    _ => return Err(DropReason::NoSocket),
                };
                self.deliver(owner, NetEvent::Data { conn: ConnId(id), bytes: seg.payload.clone() });
                Ok(())
            }
            (SegmentKind::Fin, Flow::ToConnector(id) | Flow::ToAcceptor(id)) => {
                if !matches!(self.conns.get(&id), Some(c) if hosts.contains(&c.host)) {
                    return Err(DropReason::NoSocket);
                }
                let c = self.remove_conn(id).expect("checked");
                self.deliver(c.owner, NetEvent::Closed { conn: ConnId(id) });
                Ok(())
            }
            _ => Err(DropReason::NoSocket),
        }
    }

    /// A dropped SYN-ACK leaves a half-open acceptor behind; discard it.
    fn on_drop(&mut self, seg: &Segment) {
        if let (SegmentKind::SynAck, Flow::ToConnector(cid)) = (seg.kind, seg.flow) {
            let acc = self.conns.get(&cid).and_then(|c| c.peer);
            if let Some(acc) = acc {
                if matches!(self.conns.get(&acc), Some(a) if a.state == ConnState::HalfOpen) {
                    self.remove_conn(acc);
                }
            }
        }
    }

    fn alloc_conn_id(&mut self) -> u64 {
        let id = self.next_conn;
        self.next_conn += 1;
        id
    }

    fn remove_conn(&mut self, id: u64) -> Option<Conn> {
        let c = self.conns.remove(&id)?;
        if c.release_port {
            let still_used = self.conns.values().any(|o| o.host == c.host && o.local == c.local);
            if !still_used {
                self.hosts[c.host.0].reserved.remove(&c.local.port());
            }
        }
        Some(c)
    }

    fn allocate_ephemeral(&mut self, host: HostId) -> Result<u16, TransportError> {
        let h = &mut self.hosts[host.0];
        let span = (u16::MAX - EPHEMERAL_FIRST) as u32 + 1;
        for _ in 0..span {
            let candidate = h.next_ephemeral;
            h.next_ephemeral = if candidate == u16::MAX { EPHEMERAL_FIRST } else { candidate + 1 };
            if !h.reserved.contains(&candidate) && !h.listeners.contains_key(&candidate) {
                h.reserved.insert(candidate);
                return Ok(candidate);
            }
        }
        Err(TransportError::Io("ephemeral ports exhausted".into()))
    }

    /// Checks that `local` can be bound for outbound traffic on `host`.
    fn check_bind(&self, host: HostId, local: Endpoint) -> Result<Endpoint, TransportError> {
        let h = &self.hosts[host.0];
        let local = if local.is_unspecified() { local.with_ip(h.ip) } else { local };
        if local.ip() != h.ip {
            return Err(TransportError::AddrNotAvailable(local));
        }
        match h.listeners.get(&local.port()) {
            Some(l) if !l.shared => Err(TransportError::AddrInUse(local)),
            _ => Ok(local),
        }
    }
}

struct SimIo<'a> {
    net: &'a mut Net,
    pid: ProcId,
    host: HostId,
}

impl NetIo for SimIo<'_> {
    fn now(&self) -> Duration {
        self.net.now
    }

    fn local_ip(&self) -> Ipv4Addr {
        self.net.hosts[self.host.0].ip
    }

    fn listen(&mut self, ip: Ipv4Addr, port: u16, shared: bool) -> Result<Endpoint, TransportError> {
        let host_ip = self.local_ip();
        if !ip.is_unspecified() && ip != host_ip {
            return Err(TransportError::AddrNotAvailable(Endpoint::new(ip, port.max(1)).expect("nonzero")));
        }
        let port = if port == 0 {
            let p = self.net.allocate_ephemeral(self.host)?;
            self.net.hosts[self.host.0].reserved.remove(&p);
            p
        } else {
            port
        };
        let ep = Endpoint::new(host_ip, port).expect("nonzero port");
        let h = &mut self.net.hosts[self.host.0];
        if h.listeners.contains_key(&port) {
            return Err(TransportError::AddrInUse(ep));
        }
        h.listeners.insert(port, Listener { owner: self.pid, shared });
        Ok(ep)
    }

    fn unlisten(&mut self, local: Endpoint) {
        let h = &mut self.net.hosts[self.host.0];
        if h.listeners.get(&local.port()).is_some_and(|l| l.owner == self.pid) {
            h.listeners.remove(&local.port());
        }
    }

    fn listen_local(&mut self, path: &str) -> Result<(), TransportError> {
        let h = &mut self.net.hosts[self.host.0];
        if h.local_listeners.contains_key(path) {
            return Err(TransportError::LocalPathInUse(path.to_string()));
        }
        h.local_listeners.insert(path.to_string(), self.pid);
        Ok(())
    }

    fn bind_ephemeral(&mut self) -> Result<Endpoint, TransportError> {
        let port = self.net.allocate_ephemeral(self.host)?;
        Ok(Endpoint::new(self.local_ip(), port).expect("nonzero"))
    }

    fn connect(&mut self, local: Option<Endpoint>, remote: Endpoint) -> ConnId {
        let id = self.net.alloc_conn_id();
        let (local, release_port) = match local {
            Some(ep) => match self.net.check_bind(self.host, ep) {
                Ok(ep) => {
                    let reserved = self.net.hosts[self.host.0].reserved.contains(&ep.port());
                    (ep, reserved)
                }
                Err(_) => {
                    self.net.deliver(
                        self.pid,
                        NetEvent::ConnectFailed { conn: ConnId(id), error: ConnectError::AddrInUse },
                    );
                    return ConnId(id);
                }
            },
            None => match self.net.allocate_ephemeral(self.host) {
                Ok(p) => (Endpoint::new(self.local_ip(), p).expect("nonzero"), true),
                Err(_) => {
                    self.net.deliver(
                        self.pid,
                        NetEvent::ConnectFailed { conn: ConnId(id), error: ConnectError::AddrInUse },
                    );
                    return ConnId(id);
                }
            },
        };
        self.net.conns.insert(
            id,
            Conn {
                host: self.host,
                owner: self.pid,
                local,
                remote,
                peer: None,
                state: ConnState::Connecting,
                is_connector: true,
                local_ipc: false,
                release_port,
            },
        );
        let mut syn = Segment::new(SegmentKind::Syn, local, remote);
        syn.flow = Flow::Open(id);
        self.net.emit(self.host, syn);
        let timeout = self.net.config.connect_timeout;
        self.net.schedule(timeout, Pending::ConnectTimeout { conn: id });
        ConnId(id)
    }

    fn connect_local(&mut self, path: &str) -> ConnId {
        let id = self.net.alloc_conn_id();
        let server = self.net.hosts[self.host.0].local_listeners.get(path).copied();
        let Some(server) = server else {
            self.net.deliver(self.pid, NetEvent::ConnectFailed { conn: ConnId(id), error: ConnectError::Refused });
            return ConnId(id);
        };
        let acc = self.net.alloc_conn_id();
        let placeholder = Endpoint::new(self.local_ip(), 1).expect("nonzero");
        for (cid, owner, peer, is_connector) in [(id, self.pid, acc, true), (acc, server, id, false)] {
            self.net.conns.insert(
                cid,
                Conn {
                    host: self.host,
                    owner,
                    local: placeholder,
                    remote: placeholder,
                    peer: Some(peer),
                    state: ConnState::Established,
                    is_connector,
                    local_ipc: true,
                    release_port: false,
                },
            );
        }
        self.net.deliver(self.pid, NetEvent::Connected { conn: ConnId(id) });
        self.net.deliver(server, NetEvent::LocalAccepted { conn: ConnId(acc), path: path.to_string() });
        ConnId(id)
    }

    fn punch(&mut self, local: Endpoint, remote: Endpoint) -> Result<(), TransportError> {
        let local = self.net.check_bind(self.host, local)?;
        self.net.emit(self.host, Segment::new(SegmentKind::Punch, local, remote));
        Ok(())
    }

    fn send(&mut self, conn: ConnId, bytes: &[u8]) {
        let Some(c) = self.net.conns.get(&conn.0) else {
            log::debug!("fabric: send on unknown {conn}");
            return;
        };
        if c.state != ConnState::Established || c.owner != self.pid {
            log::debug!("fabric: send on {conn} in state {:?}", c.state);
            return;
        }
        let peer = c.peer.expect("established connections have a peer");
        if c.local_ipc {
            let owner = self.net.conns.get(&peer).map(|p| p.owner);
            if let Some(owner) = owner {
                self.net.deliver(owner, NetEvent::Data { conn: ConnId(peer), bytes: bytes.to_vec() });
            }
            return;
        }
        let flow = if c.is_connector { Flow::ToAcceptor(peer) } else { Flow::ToConnector(peer) };
        let mut seg = Segment::new(SegmentKind::Data, c.local, c.remote).with_payload(bytes.to_vec());
        seg.flow = flow;
        self.net.emit(self.host, seg);
    }

    fn close(&mut self, conn: ConnId) {
        let Some(c) = self.net.conns.get(&conn.0) else {
            return;
        };
        if c.owner != self.pid {
            return;
        }
        let c = self.net.remove_conn(conn.0).expect("present");
        if c.state != ConnState::Established {
            return;
        }
        let peer = c.peer.expect("established connections have a peer");
        if c.local_ipc {
            if let Some(p) = self.net.remove_conn(peer) {
                self.net.deliver(p.owner, NetEvent::Closed { conn: ConnId(peer) });
            }
            return;
        }
        let flow = if c.is_connector { Flow::ToAcceptor(peer) } else { Flow::ToConnector(peer) };
        let mut fin = Segment::new(SegmentKind::Fin, c.local, c.remote);
        fin.flow = flow;
        self.net.emit(self.host, fin);
    }

    fn set_timer(&mut self, after: Duration, token: u64) {
        self.net.schedule(after, Pending::Deliver { pid: self.pid, event: NetEvent::Timer { token } });
    }
}
