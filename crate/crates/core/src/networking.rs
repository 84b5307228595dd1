//! The per-node agent: joins through the seed, streams membership, keeps a
//! control link to every other member and brokers NAT setup for local
//! applications.
//!
//! Setup follows a four-step exchange. The requester's agent forwards
//! `NatSetupReq` over the control link to the agent owning the destination.
//! That agent punches from the listener's endpoint toward the requester's
//! predicted external endpoint, which opens its gateway. It then replies
//! `NatSetupAck`, after which the requester connects directly. The agent
//! never carries application bytes.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::Duration;

use crate::coordination::{JoinStatus, MembershipHandle, ViewError};
use crate::proto::{
    encode, ControlMessage, Endpoint, FrameReader, MemberRecord, NodeId, SetupErrorCode, PROTOCOL_VERSION,
};
use crate::transport::{ConnId, NetEvent, NetIo, Process};

const TIMER_RETRY: u64 = 1 << 48;
const TIMER_SETUP: u64 = 2 << 48;
const TIMER_MASK: u64 = (1 << 48) - 1;

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub seed: Endpoint,
    /// Port for the control listener and all control-link traffic; 0
    /// picks one.
    pub control_port: u16,
    /// Path of the local IPC listener, if applications are served.
    pub ipc_path: Option<String>,
    /// Member to take updates from instead of the seed.
    pub parent: Option<NodeId>,
    /// How long an application's setup request may stay unanswered.
    pub setup_timeout: Duration,
    pub connect_attempts: u32,
    /// First retry delay; doubles per attempt.
    pub retry_base: Duration,
}

impl AgentConfig {
    pub fn new(seed: Endpoint) -> Self {
        AgentConfig {
            seed,
            control_port: 0,
            ipc_path: None,
            parent: None,
            setup_timeout: Duration::from_secs(5),
            connect_attempts: 3,
            retry_base: Duration::from_millis(100),
        }
    }
}

/// Local endpoints with an accepting socket, keyed to the IPC connection
/// that registered them.
#[derive(Debug, Default, Clone)]
pub struct ListenerRegistry {
    listening: BTreeMap<Endpoint, ConnId>,
}

impl ListenerRegistry {
    pub fn register(&mut self, ep: Endpoint, owner: ConnId) {
        self.listening.insert(ep, owner);
    }

    pub fn unregister(&mut self, ep: Endpoint) -> bool {
        self.listening.remove(&ep).is_some()
    }

    pub fn remove_owner(&mut self, owner: ConnId) {
        self.listening.retain(|_, o| *o != owner);
    }

    /// The registered listener that would accept on `ip:port`: an exact
    /// bind first, then a wildcard one.
    pub fn lookup(&self, ip: Ipv4Addr, port: u16) -> Option<Endpoint> {
        let exact = Endpoint::new(ip, port).ok()?;
        let wild = exact.with_ip(Ipv4Addr::UNSPECIFIED);
        [exact, wild].into_iter().find(|ep| self.listening.contains_key(ep))
    }

    pub fn endpoints(&self) -> impl Iterator<Item = Endpoint> + '_ {
        self.listening.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.listening.len()
    }

    pub fn is_empty(&self) -> bool {
        self.listening.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkState {
    /// This side dials; `attempt` counts from 1.
    Connecting { attempt: u32 },
    /// The peer dials; we have punched and wait for it.
    Awaiting,
    Up,
    Unreachable,
}

#[derive(Debug, Clone, Copy)]
struct Link {
    state: LinkState,
    conn: Option<ConnId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Seed,
    /// Dialled by us; becomes `Peer` when the reply CtrlHello arrives.
    Outgoing(NodeId),
    /// Accepted on the control port; the id is known after CtrlHello.
    Peer(Option<NodeId>),
    Ipc,
}

#[derive(Debug)]
struct Conn {
    role: Role,
    reader: FrameReader,
}

#[derive(Debug, Clone, Copy)]
struct Request {
    ipc: ConnId,
    client_req: u64,
    peer: NodeId,
    src: Endpoint,
    dst: Endpoint,
    sent: bool,
}

pub struct NodeAgent {
    config: AgentConfig,
    handle: MembershipHandle,
    me: Option<MemberRecord>,
    control: Option<Endpoint>,
    seed_conn: Option<ConnId>,
    parent_conn: Option<ConnId>,
    conns: BTreeMap<ConnId, Conn>,
    links: BTreeMap<NodeId, Link>,
    children: BTreeSet<ConnId>,
    registry: ListenerRegistry,
    requests: BTreeMap<u64, Request>,
    next_req: u64,
    update_log: Vec<Vec<u8>>,
    punches: u64,
    setups_served: u64,
}

impl NodeAgent {
    pub fn new(config: AgentConfig) -> Self {
        NodeAgent::with_handle(config, MembershipHandle::new())
    }

    pub fn with_handle(config: AgentConfig, handle: MembershipHandle) -> Self {
        NodeAgent {
            config,
            handle,
            me: None,
            control: None,
            seed_conn: None,
            parent_conn: None,
            conns: BTreeMap::new(),
            links: BTreeMap::new(),
            children: BTreeSet::new(),
            registry: ListenerRegistry::default(),
            requests: BTreeMap::new(),
            next_req: 1,
            update_log: Vec::new(),
            punches: 0,
            setups_served: 0,
        }
    }

    pub fn handle(&self) -> &MembershipHandle {
        &self.handle
    }

    pub fn id(&self) -> Option<NodeId> {
        self.me.map(|m| m.id)
    }

    /// External control endpoint as reflected by the seed.
    pub fn external(&self) -> Option<Endpoint> {
        self.me.map(|m| m.external)
    }

    pub fn control_endpoint(&self) -> Option<Endpoint> {
        self.control
    }

    pub fn link_state(&self, peer: NodeId) -> Option<LinkState> {
        self.links.get(&peer).map(|l| l.state)
    }

    /// Peers with an established control link.
    pub fn linked_peers(&self) -> Vec<NodeId> {
        self.links.iter().filter(|(_, l)| l.state == LinkState::Up).map(|(id, _)| *id).collect()
    }

    pub fn registry(&self) -> &ListenerRegistry {
        &self.registry
    }

    /// Raw MemberUpdate frames received from the parent, in order.
    pub fn update_log(&self) -> &[Vec<u8>] {
        &self.update_log
    }

    pub fn children(&self) -> usize {
        self.children.len()
    }

    pub fn punches(&self) -> u64 {
        self.punches
    }

    pub fn setups_served(&self) -> u64 {
        self.setups_served
    }

    fn on_started(&mut self, io: &mut dyn NetIo) {
        let ip = io.local_ip();
        let control = match io.listen(ip, self.config.control_port, true) {
            Ok(ep) => ep,
            Err(e) => {
                log::error!("agent: cannot listen for control links: {e}");
                self.handle.set_status(JoinStatus::Failed);
                return;
            }
        };
        self.control = Some(control);
        if let Some(path) = self.config.ipc_path.clone() {
            if let Err(e) = io.listen_local(&path) {
                log::error!("agent: cannot serve IPC at {path}: {e}");
            }
        }
        // Join from the control endpoint so the seed reflects the external
        // endpoint peers will dial.
        let conn = io.connect(Some(control), self.config.seed);
        self.seed_conn = Some(conn);
        self.conns.insert(conn, Conn { role: Role::Seed, reader: FrameReader::new() });
    }

    fn on_seed_message(&mut self, io: &mut dyn NetIo, conn: ConnId, msg: ControlMessage, raw: Vec<u8>) {
        match msg {
            ControlMessage::AddressReply { observed, assigned } => {
                let me = MemberRecord { id: assigned, external: observed };
                self.me = Some(me);
                if let Err(e) = self.handle.apply(me) {
                    log::warn!("agent: own record: {e}");
                }
            }
            ControlMessage::MemberList { members } => {
                for m in &members {
                    if let Err(e) = self.handle.apply(*m) {
                        log::warn!("agent: member list entry {}: {e}", m.id);
                    }
                }
                // Joined only once the initial view is complete, so a
                // barrier never sees a view without the seed.
                if let Some(me) = self.me {
                    self.handle.set_status(JoinStatus::Joined { id: me.id, external: me.external });
                    log::info!("agent: joined as {} at {}", me.id, me.external);
                }
                for m in members {
                    self.on_member(io, m);
                }
                if self.config.parent.is_none() {
                    io.send(conn, &encode(&ControlMessage::SubscribeTree));
                    self.parent_conn = Some(conn);
                }
            }
            ControlMessage::Reject { reason } => {
                log::warn!("agent: join rejected: {reason}");
                self.handle.set_status(JoinStatus::Rejected(reason));
                io.close(conn);
                self.conns.remove(&conn);
                self.seed_conn = None;
            }
            ControlMessage::MemberUpdate { member } => self.on_update(io, conn, member, raw),
            other => log::warn!("agent: unexpected {other:?} from seed"),
        }
    }

    fn on_update(&mut self, io: &mut dyn NetIo, from: ConnId, member: MemberRecord, raw: Vec<u8>) {
        if Some(from) != self.parent_conn {
            log::warn!("agent: update for {} from non-parent {from}", member.id);
            return;
        }
        self.update_log.push(raw.clone());
        match self.handle.apply(member) {
            Ok(()) => {
                for child in &self.children {
                    io.send(*child, &raw);
                }
                self.on_member(io, member);
            }
            Err(e @ ViewError::DuplicateId(_)) | Err(e @ ViewError::DuplicateEndpoint(_)) => {
                log::warn!("agent: dropping update: {e}");
            }
        }
    }

    /// Ensures a control link to a newly learned member. The lower id
    /// dials; the higher id punches so the dial traverses its gateway.
    fn on_member(&mut self, io: &mut dyn NetIo, member: MemberRecord) {
        let Some(me) = self.me else { return };
        if member.id == me.id || member.id.is_seed() || self.links.contains_key(&member.id) {
            return;
        }
        if me.id < member.id {
            self.dial(io, member.id, 1);
        } else {
            let control = self.control.expect("listening before joining");
            match io.punch(control, member.external) {
                Ok(()) => self.punches += 1,
                Err(e) => log::warn!("agent: punch toward {} failed: {e}", member.id),
            }
            self.links.insert(member.id, Link { state: LinkState::Awaiting, conn: None });
        }
    }

    fn dial(&mut self, io: &mut dyn NetIo, peer: NodeId, attempt: u32) {
        let Some(external) = self.handle.with_view(|v| v.get(peer).map(|r| r.external)) else {
            return;
        };
        let conn = io.connect(self.control, external);
        self.conns.insert(conn, Conn { role: Role::Outgoing(peer), reader: FrameReader::new() });
        self.links.insert(peer, Link { state: LinkState::Connecting { attempt }, conn: Some(conn) });
    }

    fn dial_failed(&mut self, io: &mut dyn NetIo, peer: NodeId, conn: ConnId) {
        let Some(link) = self.links.get_mut(&peer) else { return };
        if link.conn != Some(conn) {
            return;
        }
        let LinkState::Connecting { attempt } = link.state else { return };
        link.conn = None;
        if attempt < self.config.connect_attempts {
            let backoff = self.config.retry_base * 2u32.pow(attempt - 1);
            log::debug!("agent: link to {peer} attempt {attempt} failed; retrying in {backoff:?}");
            io.set_timer(backoff, TIMER_RETRY | peer.0 as u64);
        } else {
            log::warn!("agent: {peer} unreachable after {attempt} attempts");
            self.mark_unreachable(io, peer);
        }
    }

    fn mark_unreachable(&mut self, io: &mut dyn NetIo, peer: NodeId) {
        if let Some(link) = self.links.get_mut(&peer) {
            link.state = LinkState::Unreachable;
            link.conn = None;
        }
        let failed: Vec<u64> = self.requests.iter().filter(|(_, r)| r.peer == peer).map(|(id, _)| *id).collect();
        for id in failed {
            let r = self.requests.remove(&id).expect("listed");
            self.reply_err(io, r.ipc, r.client_req, SetupErrorCode::RemoteUnreachable);
        }
    }

    fn link_up(&mut self, io: &mut dyn NetIo, peer: NodeId, conn: ConnId) {
        self.links.insert(peer, Link { state: LinkState::Up, conn: Some(conn) });
        if let Some(c) = self.conns.get_mut(&conn) {
            c.role = Role::Peer(Some(peer));
        }
        if self.config.parent == Some(peer) && self.parent_conn.is_none() {
            io.send(conn, &encode(&ControlMessage::SubscribeTree));
            self.parent_conn = Some(conn);
        }
        let queued: Vec<u64> =
            self.requests.iter().filter(|(_, r)| r.peer == peer && !r.sent).map(|(id, _)| *id).collect();
        for id in queued {
            self.forward(io, id);
        }
    }

    fn on_peer_message(&mut self, io: &mut dyn NetIo, conn: ConnId, role: Role, msg: ControlMessage, raw: Vec<u8>) {
        let me = self.me.expect("control links exist only after joining");
        match (role, msg) {
            (Role::Outgoing(peer), ControlMessage::CtrlHello { id }) => {
                if id == peer {
                    self.link_up(io, peer, conn);
                } else {
                    log::warn!("agent: dialled {peer} but {id} answered");
                    io.close(conn);
                    self.conns.remove(&conn);
                    self.dial_failed(io, peer, conn);
                }
            }
            (Role::Peer(None), ControlMessage::CtrlHello { id }) => {
                if self.links.get(&id).is_some_and(|l| l.state == LinkState::Up) {
                    log::debug!("agent: duplicate control link from {id}; closing");
                    io.close(conn);
                    self.conns.remove(&conn);
                    return;
                }
                io.send(conn, &encode(&ControlMessage::CtrlHello { id: me.id }));
                self.link_up(io, id, conn);
            }
            (Role::Peer(Some(_)), ControlMessage::NatSetupReq { req_id, src, dst }) => {
                let reply = match self.handle_setup(io, src, dst) {
                    Ok(()) => ControlMessage::NatSetupAck { req_id },
                    Err(code) => ControlMessage::NatSetupErr { req_id, code },
                };
                io.send(conn, &encode(&reply));
            }
            (Role::Peer(Some(_)), ControlMessage::NatSetupAck { req_id }) => {
                if let Some(r) = self.requests.remove(&req_id) {
                    io.send(r.ipc, &encode(&ControlMessage::NatSetupAck { req_id: r.client_req }));
                }
            }
            (Role::Peer(Some(_)), ControlMessage::NatSetupErr { req_id, code }) => {
                if let Some(r) = self.requests.remove(&req_id) {
                    self.reply_err(io, r.ipc, r.client_req, code);
                }
            }
            (Role::Peer(Some(child)), ControlMessage::SubscribeTree) => {
                let missed: Vec<MemberRecord> =
                    self.handle.with_view(|v| v.records().iter().filter(|r| r.id > child).copied().collect());
                for m in missed {
                    io.send(conn, &encode(&ControlMessage::MemberUpdate { member: m }));
                }
                self.children.insert(conn);
            }
            (Role::Peer(Some(_)), ControlMessage::MemberUpdate { member }) => self.on_update(io, conn, member, raw),
            (role, msg) => log::warn!("agent: unexpected {msg:?} on {role:?} link"),
        }
    }

    fn publish_listeners(&self) {
        self.handle.set_listeners(self.registry.endpoints().collect());
    }

    fn on_ipc_message(&mut self, io: &mut dyn NetIo, conn: ConnId, msg: ControlMessage) {
        match msg {
            ControlMessage::RegisterListener { endpoint } => {
                self.registry.register(endpoint, conn);
                self.publish_listeners();
            }
            ControlMessage::UnregisterListener { endpoint } => {
                self.registry.unregister(endpoint);
                self.publish_listeners();
            }
            ControlMessage::NatSetupReq { req_id, src, dst } => self.request_setup(io, conn, req_id, src, dst),
            other => log::warn!("agent: unexpected {other:?} on IPC"),
        }
    }

    /// An application asks to reach `dst` from its bound `src`.
    fn request_setup(&mut self, io: &mut dyn NetIo, ipc: ConnId, client_req: u64, src: Endpoint, dst: Endpoint) {
        let Some(me) = self.me else {
            self.reply_err(io, ipc, client_req, SetupErrorCode::RemoteUnreachable);
            return;
        };
        let Some(owner) = self.handle.with_view(|v| v.owner_of(dst).copied()) else {
            self.reply_err(io, ipc, client_req, SetupErrorCode::UnknownDestination);
            return;
        };
        // The gateway preserves ports, so the external form of a local bind
        // is our external address with the same port.
        let src = src.with_ip(me.external.ip());
        if owner.id == me.id {
            match self.handle_setup(io, src, dst) {
                Ok(()) => io.send(ipc, &encode(&ControlMessage::NatSetupAck { req_id: client_req })),
                Err(code) => self.reply_err(io, ipc, client_req, code),
            }
            return;
        }
        let state = self.links.get(&owner.id).map(|l| l.state);
        match state {
            Some(LinkState::Unreachable) | None => {
                self.reply_err(io, ipc, client_req, SetupErrorCode::RemoteUnreachable);
            }
            Some(state) => {
                let id = self.next_req;
                self.next_req += 1;
                self.requests.insert(id, Request { ipc, client_req, peer: owner.id, src, dst, sent: false });
                io.set_timer(self.config.setup_timeout, TIMER_SETUP | id);
                if state == LinkState::Up {
                    self.forward(io, id);
                }
            }
        }
    }

    fn forward(&mut self, io: &mut dyn NetIo, id: u64) {
        let Some(r) = self.requests.get_mut(&id) else { return };
        let Some(conn) = self.links.get(&r.peer).and_then(|l| l.conn) else { return };
        r.sent = true;
        io.send(conn, &encode(&ControlMessage::NatSetupReq { req_id: id, src: r.src, dst: r.dst }));
    }

    /// Opens our gateway for `src` toward the listener `dst` names.
    fn handle_setup(&mut self, io: &mut dyn NetIo, src: Endpoint, dst: Endpoint) -> Result<(), SetupErrorCode> {
        let local_ip = io.local_ip();
        let listener = self.registry.lookup(local_ip, dst.port()).ok_or(SetupErrorCode::NoListener)?;
        let local = if listener.is_unspecified() { listener.with_ip(local_ip) } else { listener };
        io.punch(local, src).map_err(|e| {
            log::warn!("agent: punch from {local} failed: {e}");
            SetupErrorCode::BindFailed
        })?;
        self.punches += 1;
        self.setups_served += 1;
        Ok(())
    }

    fn reply_err(&mut self, io: &mut dyn NetIo, ipc: ConnId, req_id: u64, code: SetupErrorCode) {
        io.send(ipc, &encode(&ControlMessage::NatSetupErr { req_id, code }));
    }

    fn on_closed(&mut self, io: &mut dyn NetIo, conn: ConnId) {
        let Some(c) = self.conns.remove(&conn) else { return };
        self.children.remove(&conn);
        match c.role {
            Role::Seed => {
                self.seed_conn = None;
                if self.handle.status() == JoinStatus::Joining {
                    self.handle.set_status(JoinStatus::Failed);
                } else {
                    log::warn!("agent: lost the seed connection");
                }
            }
            Role::Outgoing(peer) => self.dial_failed(io, peer, conn),
            Role::Peer(Some(peer)) => {
                if self.links.get(&peer).is_some_and(|l| l.conn == Some(conn)) {
                    log::warn!("agent: control link to {peer} closed");
                    self.mark_unreachable(io, peer);
                }
                if self.parent_conn == Some(conn) {
                    self.parent_conn = None;
                }
            }
            Role::Peer(None) => {}
            Role::Ipc => {
                self.registry.remove_owner(conn);
                self.publish_listeners();
                self.requests.retain(|_, r| r.ipc != conn);
            }
        }
    }

    fn on_timer(&mut self, io: &mut dyn NetIo, token: u64) {
        let value = token & TIMER_MASK;
        match token & !TIMER_MASK {
            TIMER_RETRY => {
                let peer = NodeId(value as u32);
                if let Some(Link { state: LinkState::Connecting { attempt }, conn: None }) = self.links.get(&peer).copied() {
                    self.dial(io, peer, attempt + 1);
                }
            }
            TIMER_SETUP => {
                if let Some(r) = self.requests.remove(&value) {
                    self.reply_err(io, r.ipc, r.client_req, SetupErrorCode::Timeout);
                }
            }
            _ => log::warn!("agent: unknown timer {token:#x}"),
        }
    }
}

impl Process for NodeAgent {
    fn on_event(&mut self, io: &mut dyn NetIo, event: NetEvent) {
        match event {
            NetEvent::Started => self.on_started(io),
            NetEvent::Connected { conn } => match self.conns.get(&conn).map(|c| c.role) {
                Some(Role::Seed) => io.send(conn, &encode(&ControlMessage::Hello { version: PROTOCOL_VERSION })),
                Some(Role::Outgoing(_)) => {
                    let me = self.me.expect("dialling after join");
                    io.send(conn, &encode(&ControlMessage::CtrlHello { id: me.id }));
                }
                _ => {}
            },
            NetEvent::ConnectFailed { conn, error } => match self.conns.remove(&conn).map(|c| c.role) {
                Some(Role::Seed) => {
                    log::error!("agent: cannot reach seed {}: {error}", self.config.seed);
                    self.seed_conn = None;
                    self.handle.set_status(JoinStatus::Failed);
                }
                Some(Role::Outgoing(peer)) => self.dial_failed(io, peer, conn),
                _ => {}
            },
            NetEvent::Accepted { conn, .. } => {
                self.conns.insert(conn, Conn { role: Role::Peer(None), reader: FrameReader::new() });
            }
            NetEvent::LocalAccepted { conn, .. } => {
                self.conns.insert(conn, Conn { role: Role::Ipc, reader: FrameReader::new() });
            }
            NetEvent::Data { conn, bytes } => {
                let Some(c) = self.conns.get_mut(&conn) else { return };
                c.reader.push(&bytes);
                loop {
                    let Some(c) = self.conns.get_mut(&conn) else { return };
                    let role = c.role;
                    match c.reader.next_frame() {
                        Ok(Some((msg, raw))) => match role {
                            Role::Seed => self.on_seed_message(io, conn, msg, raw),
                            Role::Ipc => self.on_ipc_message(io, conn, msg),
                            Role::Outgoing(_) | Role::Peer(_) => self.on_peer_message(io, conn, role, msg, raw),
                        },
                        Ok(None) => break,
                        Err(e) => {
                            log::warn!("agent: dropping {conn}: {e}");
                            io.close(conn);
                            self.on_closed(io, conn);
                            break;
                        }
                    }
                }
            }
            NetEvent::Closed { conn } => self.on_closed(io, conn),
            NetEvent::Timer { token } => self.on_timer(io, token),
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
