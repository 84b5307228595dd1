//! Transport abstraction shared by the simulated fabric and real sockets.
//!
//! Protocol logic is written as [`Process`] implementations that react to
//! [`NetEvent`]s and act through a [`NetIo`] handle. The fabric drives
//! processes from a deterministic event queue; the socket runtime drives
//! them from OS threads. Both surface the same error taxonomy.

use std::any::Any;
use std::fmt;
use std::net::Ipv4Addr;
use std::time::Duration;

use thiserror::Error;

use crate::proto::Endpoint;

/// Handle for one end of a stream (TCP or local IPC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnId(pub u64);

impl fmt::Display for ConnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conn#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum ConnectError {
    #[error("connection refused")]
    Refused,
    #[error("connection timed out")]
    TimedOut,
    #[error("local address in use")]
    AddrInUse,
    #[error("network unreachable")]
    Unreachable,
    #[error("connect failed: {0:?}")]
    Other(std::io::ErrorKind),
}

impl ConnectError {
    pub fn from_io(err: &std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match err.kind() {
            ConnectionRefused | ConnectionReset => ConnectError::Refused,
            TimedOut | WouldBlock => ConnectError::TimedOut,
            AddrInUse | AddrNotAvailable => ConnectError::AddrInUse,
            NetworkUnreachable | HostUnreachable => ConnectError::Unreachable,
            kind => ConnectError::Other(kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("address {0} already in use")]
    AddrInUse(Endpoint),
    #[error("address {0} is not local to this host")]
    AddrNotAvailable(Endpoint),
    #[error("local socket {0:?} already in use")]
    LocalPathInUse(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl TransportError {
    pub fn from_io(ep: Endpoint, err: &std::io::Error) -> Self {
        match err.kind() {
            std::io::ErrorKind::AddrInUse => TransportError::AddrInUse(ep),
            std::io::ErrorKind::AddrNotAvailable => TransportError::AddrNotAvailable(ep),
            _ => TransportError::Io(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEvent {
    /// Delivered once, before any other event.
    Started,
    /// A listener accepted a TCP stream. `peer` is the remote address as
    /// observed by this host (after any NAT rewriting).
    Accepted { conn: ConnId, local: Endpoint, peer: Endpoint },
    /// A local IPC client connected.
    LocalAccepted { conn: ConnId, path: String },
    Connected { conn: ConnId },
    ConnectFailed { conn: ConnId, error: ConnectError },
    Data { conn: ConnId, bytes: Vec<u8> },
    /// The peer closed the stream (or it broke).
    Closed { conn: ConnId },
    Timer { token: u64 },
}

/// Operations a process may perform on its host.
pub trait NetIo {
    /// Time since the transport started.
    fn now(&self) -> Duration;

    /// Primary IPv4 address of the host.
    fn local_ip(&self) -> Ipv4Addr;

    /// Starts accepting on `ip:port`; port 0 picks an ephemeral port.
    /// `shared` enables port sharing so other sockets may bind the same
    /// local endpoint for outbound traffic.
    fn listen(&mut self, ip: Ipv4Addr, port: u16, shared: bool) -> Result<Endpoint, TransportError>;

    fn unlisten(&mut self, local: Endpoint);

    /// Starts accepting local IPC connections at `path`.
    fn listen_local(&mut self, path: &str) -> Result<(), TransportError>;

    /// Reserves an ephemeral local endpoint for a later [`NetIo::connect`].
    fn bind_ephemeral(&mut self) -> Result<Endpoint, TransportError>;

    /// Opens a stream. Completion is reported with `Connected` or
    /// `ConnectFailed` for the returned id.
    fn connect(&mut self, local: Option<Endpoint>, remote: Endpoint) -> ConnId;

    fn connect_local(&mut self, path: &str) -> ConnId;

    /// Emits a single connection attempt from `local` to `remote` and
    /// abandons it, leaving outbound NAT state behind. Fails only when
    /// `local` cannot be bound (no port sharing on an existing socket).
    fn punch(&mut self, local: Endpoint, remote: Endpoint) -> Result<(), TransportError>;

    fn send(&mut self, conn: ConnId, bytes: &[u8]);

    fn close(&mut self, conn: ConnId);

    fn set_timer(&mut self, after: Duration, token: u64);
}

/// An event-driven participant hosted by a transport.
pub trait Process: Any {
    fn on_event(&mut self, io: &mut dyn NetIo, event: NetEvent);

    fn as_any(&self) -> &dyn Any;

    fn as_any_mut(&mut self) -> &mut dyn Any;
}
