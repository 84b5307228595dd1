//! The rendezvous process: reflects observed addresses, assigns ids and
//! roots membership propagation.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::Ipv4Addr;
use std::sync::mpsc::Sender;

use serde::Serialize;

use crate::proto::{
    encode, ControlMessage, Endpoint, FrameReader, MemberRecord, NodeId, RejectReason, PROTOCOL_VERSION,
};
use crate::transport::{ConnId, NetEvent, NetIo, Process};

pub const DEFAULT_PORT: u16 = 7077;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HelloOutcome {
    Accepted { record: MemberRecord, members: Vec<MemberRecord> },
    Rejected(RejectReason),
}

/// Join bookkeeping, independent of any transport.
#[derive(Debug, Clone)]
pub struct SeedState {
    members: BTreeMap<NodeId, MemberRecord>,
    next_id: u32,
}

impl SeedState {
    pub fn new(seed: Endpoint) -> Self {
        let mut members = BTreeMap::new();
        members.insert(NodeId::SEED, MemberRecord { id: NodeId::SEED, external: seed });
        SeedState { members, next_id: 1 }
    }

    /// Admits a joiner seen at `observed`. On success the joiner gets a
    /// fresh id and the list of everyone else, seed included.
    pub fn handle_hello(&mut self, version: u8, observed: Endpoint) -> HelloOutcome {
        if version != PROTOCOL_VERSION {
            return HelloOutcome::Rejected(RejectReason::VersionMismatch);
        }
        if self.members.values().any(|m| m.external == observed) {
            return HelloOutcome::Rejected(RejectReason::DuplicateAddress);
        }
        let members = self.members.values().copied().collect();
        let record = MemberRecord { id: NodeId(self.next_id), external: observed };
        self.next_id += 1;
        self.members.insert(record.id, record);
        HelloOutcome::Accepted { record, members }
    }

    /// Forgets a member whose seed connection closed. Nobody is told.
    pub fn handle_disconnect(&mut self, id: NodeId) -> Option<MemberRecord> {
        if id.is_seed() {
            return None;
        }
        self.members.remove(&id)
    }

    pub fn members(&self) -> impl Iterator<Item = &MemberRecord> {
        self.members.values()
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.next_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum SeedEvent {
    Joined { id: NodeId, observed: Endpoint },
    Rejected { observed: Endpoint, reason: String },
    Left { id: NodeId },
}

#[derive(Debug)]
struct Peer {
    observed: Endpoint,
    member: Option<NodeId>,
    reader: FrameReader,
}

/// Seed service as a transport-hosted process.
pub struct SeedProcess {
    listen_ip: Ipv4Addr,
    listen_port: u16,
    advertise: Option<Endpoint>,
    state: Option<SeedState>,
    local: Option<Endpoint>,
    peers: BTreeMap<ConnId, Peer>,
    subscribers: BTreeSet<ConnId>,
    events: Vec<SeedEvent>,
    journal: Option<Box<dyn Write + Send>>,
    on_listening: Option<Sender<Result<Endpoint, String>>>,
}

impl SeedProcess {
    pub fn new(listen_ip: Ipv4Addr, listen_port: u16) -> Self {
        SeedProcess {
            listen_ip,
            listen_port,
            advertise: None,
            state: None,
            local: None,
            peers: BTreeMap::new(),
            subscribers: BTreeSet::new(),
            events: Vec::new(),
            journal: None,
            on_listening: None,
        }
    }

    /// Publishes `ep` as the seed's own record instead of the listening
    /// address (useful behind port forwarding).
    pub fn advertise(mut self, ep: Endpoint) -> Self {
        self.advertise = Some(ep);
        self
    }

    /// Writes each join/leave as a JSON line.
    pub fn journal(mut self, out: Box<dyn Write + Send>) -> Self {
        self.journal = Some(out);
        self
    }

    /// Reports the bound endpoint (or the bind error) once listening.
    pub fn notify_listening(mut self, tx: Sender<Result<Endpoint, String>>) -> Self {
        self.on_listening = Some(tx);
        self
    }

    pub fn state(&self) -> Option<&SeedState> {
        self.state.as_ref()
    }

    pub fn local_endpoint(&self) -> Option<Endpoint> {
        self.local
    }

    pub fn events(&self) -> &[SeedEvent] {
        &self.events
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.len()
    }

    fn log(&mut self, event: SeedEvent) {
        if let Some(out) = self.journal.as_mut() {
            let line = serde_json::to_string(&event).expect("seed events serialize");
            if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
                log::warn!("seed: journal write failed: {e}");
            }
        }
        self.events.push(event);
    }

    fn on_message(&mut self, io: &mut dyn NetIo, conn: ConnId, msg: ControlMessage) {
        let Some(peer) = self.peers.get_mut(&conn) else { return };
        let Some(state) = self.state.as_mut() else { return };
        match msg {
            ControlMessage::Hello { version } if peer.member.is_none() => {
                let observed = peer.observed;
                match state.handle_hello(version, observed) {
                    HelloOutcome::Accepted { record, members } => {
                        peer.member = Some(record.id);
                        io.send(conn, &encode(&ControlMessage::AddressReply { observed, assigned: record.id }));
                        io.send(conn, &encode(&ControlMessage::MemberList { members }));
                        let update = encode(&ControlMessage::MemberUpdate { member: record });
                        for sub in &self.subscribers {
                            io.send(*sub, &update);
                        }
                        log::info!("seed: {} joined from {observed}", record.id);
                        self.log(SeedEvent::Joined { id: record.id, observed });
                    }
                    HelloOutcome::Rejected(reason) => {
                        io.send(conn, &encode(&ControlMessage::Reject { reason }));
                        io.close(conn);
                        self.peers.remove(&conn);
                        log::info!("seed: rejected joiner at {observed}: {reason}");
                        self.log(SeedEvent::Rejected { observed, reason: reason.to_string() });
                    }
                }
            }
            ControlMessage::SubscribeTree => {
                let Some(child) = peer.member else {
                    log::warn!("seed: subscription from {conn} before join");
                    return;
                };
                // Catch the child up on joins it missed since its MemberList.
                for m in state.members().filter(|m| m.id > child) {
                    io.send(conn, &encode(&ControlMessage::MemberUpdate { member: *m }));
                }
                self.subscribers.insert(conn);
            }
            other => log::warn!("seed: unexpected {other:?} on {conn}"),
        }
    }

    fn drop_peer(&mut self, conn: ConnId) {
        self.subscribers.remove(&conn);
        if let Some(Peer { member: Some(id), .. }) = self.peers.remove(&conn) {
            if let Some(state) = self.state.as_mut() {
                state.handle_disconnect(id);
            }
            log::info!("seed: {id} left");
            self.log(SeedEvent::Left { id });
        }
    }
}

impl Process for SeedProcess {
    fn on_event(&mut self, io: &mut dyn NetIo, event: NetEvent) {
        match event {
            NetEvent::Started => match io.listen(self.listen_ip, self.listen_port, false) {
                Ok(local) => {
                    let ip = if local.is_unspecified() { io.local_ip() } else { local.ip() };
                    let published = self.advertise.unwrap_or(local.with_ip(ip));
                    self.local = Some(local);
                    self.state = Some(SeedState::new(published));
                    log::info!("seed: listening on {local}, advertising {published}");
                    if let Some(tx) = self.on_listening.take() {
                        let _ = tx.send(Ok(local.with_ip(ip)));
                    }
                }
                Err(e) => {
                    log::error!("seed: cannot listen: {e}");
                    if let Some(tx) = self.on_listening.take() {
                        let _ = tx.send(Err(e.to_string()));
                    }
                }
            },
            NetEvent::Accepted { conn, peer, .. } => {
                self.peers.insert(conn, Peer { observed: peer, member: None, reader: FrameReader::new() });
            }
            NetEvent::Data { conn, bytes } => {
                let Some(peer) = self.peers.get_mut(&conn) else { return };
                peer.reader.push(&bytes);
                loop {
                    let Some(peer) = self.peers.get_mut(&conn) else { return };
                    match peer.reader.next_frame() {
                        Ok(Some((msg, _))) => self.on_message(io, conn, msg),
                        Ok(None) => break,
                        Err(e) => {
                            log::warn!("seed: dropping {conn}: {e}");
                            io.close(conn);
                            self.drop_peer(conn);
                            break;
                        }
                    }
                }
            }
            NetEvent::Closed { conn } => self.drop_peer(conn),
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
