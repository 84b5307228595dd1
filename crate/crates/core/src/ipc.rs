//! Blocking client for the agent's local IPC channel, plus connect/listen
//! helpers that route setup through it the way an interposed socket call
//! would.

use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::UnixStream;
use std::time::Duration;

use thiserror::Error;

use crate::proto::{encode, ControlMessage, DecodeError, Endpoint, FrameReader, SetupErrorCode};
use crate::socket::shared_socket;

/// Environment variable naming the agent's IPC socket.
pub const IPC_ENV: &str = "BOXER_IPC";

#[derive(Debug, Error)]
pub enum IpcError {
    #[error("IPC I/O: {0}")]
    Io(#[from] io::Error),
    #[error("IPC decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("setup failed: {0}")]
    Setup(SetupErrorCode),
    #[error("unexpected reply {0:?}")]
    Unexpected(ControlMessage),
    #[error("agent closed the IPC channel")]
    Closed,
}

impl IpcError {
    /// The socket error an application would see for this failure.
    pub fn to_io(&self) -> io::Error {
        let kind = match self {
            IpcError::Setup(SetupErrorCode::NoListener) => io::ErrorKind::ConnectionRefused,
            IpcError::Setup(SetupErrorCode::BindFailed) => io::ErrorKind::AddrInUse,
            IpcError::Setup(SetupErrorCode::RemoteUnreachable) => io::ErrorKind::HostUnreachable,
            IpcError::Setup(SetupErrorCode::Timeout) => io::ErrorKind::TimedOut,
            IpcError::Io(e) => e.kind(),
            _ => io::ErrorKind::Other,
        };
        io::Error::new(kind, self.to_string())
    }
}

pub struct BrokerClient {
    stream: UnixStream,
    reader: FrameReader,
    next_req: u64,
}

impl BrokerClient {
    pub fn connect(path: &str) -> io::Result<Self> {
        Ok(BrokerClient { stream: UnixStream::connect(path)?, reader: FrameReader::new(), next_req: 1 })
    }

    /// Connects to the agent named by `BOXER_IPC`, if set.
    pub fn from_env() -> Option<io::Result<Self>> {
        std::env::var(IPC_ENV).ok().filter(|p| !p.is_empty()).map(|p| BrokerClient::connect(&p))
    }

    pub fn register_listener(&mut self, endpoint: Endpoint) -> io::Result<()> {
        self.stream.write_all(&encode(&ControlMessage::RegisterListener { endpoint }))
    }

    pub fn unregister_listener(&mut self, endpoint: Endpoint) -> io::Result<()> {
        self.stream.write_all(&encode(&ControlMessage::UnregisterListener { endpoint }))
    }

    /// Asks the agent to open the path from local `src` to `dst`.
    pub fn request_setup(&mut self, src: Endpoint, dst: Endpoint) -> Result<(), IpcError> {
        let req_id = self.next_req;
        self.next_req += 1;
        self.stream.write_all(&encode(&ControlMessage::NatSetupReq { req_id, src, dst }))?;
        // Requests on one stream are strictly one at a time, so the next
        // frame is the reply.
        match self.read_message()? {
            ControlMessage::NatSetupAck { req_id: r } if r == req_id => Ok(()),
            ControlMessage::NatSetupErr { req_id: r, code } if r == req_id => Err(IpcError::Setup(code)),
            other => Err(IpcError::Unexpected(other)),
        }
    }

    fn read_message(&mut self) -> Result<ControlMessage, IpcError> {
        let mut buf = [0u8; 256];
        loop {
            if let Some((msg, _)) = self.reader.next_frame()? {
                return Ok(msg);
            }
            let n = self.stream.read(&mut buf)?;
            if n == 0 {
                return Err(IpcError::Closed);
            }
            self.reader.push(&buf[..n]);
        }
    }
}

/// Binds a port-shared listener and registers it with the agent.
pub fn listen(broker: Option<&mut BrokerClient>, ip: Ipv4Addr, port: u16) -> io::Result<TcpListener> {
    let s = shared_socket(true)?;
    s.bind(&SocketAddr::from((ip, port)).into())?;
    s.listen(1024)?;
    let listener: TcpListener = s.into();
    if let Some(b) = broker {
        let local = Endpoint::try_from(listener.local_addr()?).map_err(|e| io::Error::other(e.to_string()))?;
        b.register_listener(local)?;
    }
    Ok(listener)
}

/// Connects to `dst` from an ephemeral port on `ip`, asking the agent to
/// open the remote gateway first. Destinations outside the overlay get a
/// plain connect.
pub fn connect(broker: &mut BrokerClient, ip: Ipv4Addr, dst: Endpoint, timeout: Duration) -> io::Result<TcpStream> {
    let s = shared_socket(true)?;
    s.bind(&SocketAddr::from((ip, 0)).into())?;
    let local = s.local_addr()?.as_socket().ok_or_else(|| io::Error::other("non-IP local address"))?;
    let src = Endpoint::try_from(local).map_err(|e| io::Error::other(e.to_string()))?;
    match broker.request_setup(src, dst) {
        Ok(()) | Err(IpcError::Setup(SetupErrorCode::UnknownDestination)) => {}
        Err(e) => return Err(e.to_io()),
    }
    s.connect_timeout(&SocketAddr::from(dst).into(), timeout)?;
    let stream: TcpStream = s.into();
    stream.set_nodelay(true)?;
    Ok(stream)
}
