//! Domain types and the binary control protocol.
//!
//! The same framing is used on seed connections, peer control connections
//! and the local IPC channel between applications and their node agent.
//!
//! ```text
//! +----------------------+---------+--------------------------+
//! | length (u32, BE)     | tag (u8)| body (fields, in order)  |
//! +----------------------+---------+--------------------------+
//! ```
//!
//! `length` counts the tag byte plus the body. Integers are big-endian,
//! endpoints are 4 address bytes followed by 2 port bytes, lists are a
//! `u16` count followed by the elements. The tag table lives in
//! `docs/wire.md`.

use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Protocol version carried in `Hello`.
pub const PROTOCOL_VERSION: u8 = 1;

/// Frames larger than this are rejected as malformed.
pub const MAX_FRAME_LEN: usize = 1 << 20;

const LEN_PREFIX: usize = 4;
const ENDPOINT_LEN: usize = 6;

pub mod tag {
    pub const HELLO: u8 = 0x01;
    pub const ADDRESS_REPLY: u8 = 0x02;
    pub const REJECT: u8 = 0x03;
    pub const MEMBER_LIST: u8 = 0x04;
    pub const MEMBER_UPDATE: u8 = 0x05;
    pub const CTRL_HELLO: u8 = 0x06;
    pub const NAT_SETUP_REQ: u8 = 0x07;
    pub const NAT_SETUP_ACK: u8 = 0x08;
    pub const NAT_SETUP_ERR: u8 = 0x09;
    pub const SUBSCRIBE_TREE: u8 = 0x0A;
    /// Local IPC only.
    pub const REGISTER_LISTENER: u8 = 0x10;
    /// Local IPC only.
    pub const UNREGISTER_LISTENER: u8 = 0x11;

    /// Every assigned tag, in ascending order.
    pub const ALL: [u8; 12] = [
        HELLO,
        ADDRESS_REPLY,
        REJECT,
        MEMBER_LIST,
        MEMBER_UPDATE,
        CTRL_HELLO,
        NAT_SETUP_REQ,
        NAT_SETUP_ACK,
        NAT_SETUP_ERR,
        SUBSCRIBE_TREE,
        REGISTER_LISTENER,
        UNREGISTER_LISTENER,
    ];
}

/// An IPv4 transport address with a nonzero port.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    ip: Ipv4Addr,
    port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndpointError {
    #[error("port must be nonzero")]
    ZeroPort,
    #[error("invalid endpoint syntax: {0:?}")]
    Syntax(String),
    #[error("IPv6 endpoints are not supported: {0}")]
    NotIpv4(SocketAddr),
}

impl Endpoint {
    pub fn new(ip: Ipv4Addr, port: u16) -> Result<Self, EndpointError> {
        if port == 0 {
            return Err(EndpointError::ZeroPort);
        }
        Ok(Endpoint { ip, port })
    }

    pub fn ip(&self) -> Ipv4Addr {
        self.ip
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Same port on another address.
    pub fn with_ip(&self, ip: Ipv4Addr) -> Endpoint {
        Endpoint { ip, port: self.port }
    }

    pub fn is_unspecified(&self) -> bool {
        self.ip.is_unspecified()
    }

    fn to_bytes(self) -> [u8; ENDPOINT_LEN] {
        let o = self.ip.octets();
        let p = self.port.to_be_bytes();
        [o[0], o[1], o[2], o[3], p[0], p[1]]
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Endpoint {
    type Err = EndpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let addr: SocketAddrV4 = s.parse().map_err(|_| EndpointError::Syntax(s.to_string()))?;
        Endpoint::new(*addr.ip(), addr.port())
    }
}

impl From<Endpoint> for SocketAddr {
    fn from(ep: Endpoint) -> SocketAddr {
        SocketAddr::V4(SocketAddrV4::new(ep.ip, ep.port))
    }
}

impl TryFrom<SocketAddr> for Endpoint {
    type Error = EndpointError;

    fn try_from(addr: SocketAddr) -> Result<Self, Self::Error> {
        match addr {
            SocketAddr::V4(v4) => Endpoint::new(*v4.ip(), v4.port()),
            SocketAddr::V6(_) => Err(EndpointError::NotIpv4(addr)),
        }
    }
}

impl Serialize for Endpoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Overlay node identifier. Zero is the seed; joiners get increasing ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const SEED: NodeId = NodeId(0);

    pub fn is_seed(self) -> bool {
        self == NodeId::SEED
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A member of the overlay: its id and the externally visible address of
/// its control service.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemberRecord {
    pub id: NodeId,
    pub external: Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RejectReason {
    DuplicateAddress = 1,
    VersionMismatch = 2,
}

impl RejectReason {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(RejectReason::DuplicateAddress),
            2 => Some(RejectReason::VersionMismatch),
            _ => None,
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::DuplicateAddress => "duplicate-address",
            RejectReason::VersionMismatch => "version-mismatch",
        })
    }
}

/// Failure codes carried by `NatSetupErr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SetupErrorCode {
    NoListener = 1,
    BindFailed = 2,
    /// IPC only: the destination is not an overlay member.
    UnknownDestination = 3,
    /// IPC only: no control link to the owning member.
    RemoteUnreachable = 4,
    /// IPC only: no reply within the setup deadline.
    Timeout = 5,
}

impl SetupErrorCode {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => SetupErrorCode::NoListener,
            2 => SetupErrorCode::BindFailed,
            3 => SetupErrorCode::UnknownDestination,
            4 => SetupErrorCode::RemoteUnreachable,
            5 => SetupErrorCode::Timeout,
            _ => return None,
        })
    }
}

impl fmt::Display for SetupErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetupErrorCode::NoListener => "no-listener",
            SetupErrorCode::BindFailed => "bind-failed",
            SetupErrorCode::UnknownDestination => "unknown-destination",
            SetupErrorCode::RemoteUnreachable => "remote-unreachable",
            SetupErrorCode::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    Hello { version: u8 },
    AddressReply { observed: Endpoint, assigned: NodeId },
    Reject { reason: RejectReason },
    MemberList { members: Vec<MemberRecord> },
    MemberUpdate { member: MemberRecord },
    CtrlHello { id: NodeId },
    NatSetupReq { req_id: u64, src: Endpoint, dst: Endpoint },
    NatSetupAck { req_id: u64 },
    NatSetupErr { req_id: u64, code: SetupErrorCode },
    SubscribeTree,
    RegisterListener { endpoint: Endpoint },
    UnregisterListener { endpoint: Endpoint },
}

impl ControlMessage {
    pub fn tag(&self) -> u8 {
        match self {
            ControlMessage::Hello { .. } => tag::HELLO,
            ControlMessage::AddressReply { .. } => tag::ADDRESS_REPLY,
            ControlMessage::Reject { .. } => tag::REJECT,
            ControlMessage::MemberList { .. } => tag::MEMBER_LIST,
            ControlMessage::MemberUpdate { .. } => tag::MEMBER_UPDATE,
            ControlMessage::CtrlHello { .. } => tag::CTRL_HELLO,
            ControlMessage::NatSetupReq { .. } => tag::NAT_SETUP_REQ,
            ControlMessage::NatSetupAck { .. } => tag::NAT_SETUP_ACK,
            ControlMessage::NatSetupErr { .. } => tag::NAT_SETUP_ERR,
            ControlMessage::SubscribeTree => tag::SUBSCRIBE_TREE,
            ControlMessage::RegisterListener { .. } => tag::REGISTER_LISTENER,
            ControlMessage::UnregisterListener { .. } => tag::UNREGISTER_LISTENER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated frame: need at least {needed} bytes, have {available}")]
    TruncatedFrame { needed: usize, available: usize },
    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("malformed payload for tag 0x{tag:02x}: {detail}")]
    MalformedPayload { tag: u8, detail: &'static str },
}

/// Encodes a message into one length-prefixed frame.
pub fn encode(msg: &ControlMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(32);
    out.extend_from_slice(&[0; LEN_PREFIX]);
    out.push(msg.tag());
    match msg {
        ControlMessage::Hello { version } => out.push(*version),
        ControlMessage::AddressReply { observed, assigned } => {
            out.extend_from_slice(&observed.to_bytes());
            out.extend_from_slice(&assigned.0.to_be_bytes());
        }
        ControlMessage::Reject { reason } => out.push(*reason as u8),
        ControlMessage::MemberList { members } => {
            let count = u16::try_from(members.len()).expect("member list exceeds u16::MAX entries");
            out.extend_from_slice(&count.to_be_bytes());
            for m in members {
                put_member(&mut out, m);
            }
        }
        ControlMessage::MemberUpdate { member } => put_member(&mut out, member),
        ControlMessage::CtrlHello { id } => out.extend_from_slice(&id.0.to_be_bytes()),
        ControlMessage::NatSetupReq { req_id, src, dst } => {
            out.extend_from_slice(&req_id.to_be_bytes());
            out.extend_from_slice(&src.to_bytes());
            out.extend_from_slice(&dst.to_bytes());
        }
        ControlMessage::NatSetupAck { req_id } => out.extend_from_slice(&req_id.to_be_bytes()),
        ControlMessage::NatSetupErr { req_id, code } => {
            out.extend_from_slice(&req_id.to_be_bytes());
            out.push(*code as u8);
        }
        ControlMessage::SubscribeTree => {}
        ControlMessage::RegisterListener { endpoint }
        | ControlMessage::UnregisterListener { endpoint } => {
            out.extend_from_slice(&endpoint.to_bytes())
        }
    }
    let len = (out.len() - LEN_PREFIX) as u32;
    out[..LEN_PREFIX].copy_from_slice(&len.to_be_bytes());
    out
}

fn put_member(out: &mut Vec<u8>, m: &MemberRecord) {
    out.extend_from_slice(&m.id.0.to_be_bytes());
    out.extend_from_slice(&m.external.to_bytes());
}

/// Decodes one frame from the start of `bytes`.
///
/// Returns the message and the number of bytes consumed; anything after the
/// declared frame length is left untouched.
pub fn decode(bytes: &[u8]) -> Result<(ControlMessage, usize), DecodeError> {
    if bytes.len() < LEN_PREFIX {
        return Err(DecodeError::TruncatedFrame { needed: LEN_PREFIX, available: bytes.len() });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len == 0 {
        return Err(DecodeError::MalformedPayload { tag: 0, detail: "empty frame" });
    }
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::MalformedPayload { tag: 0, detail: "frame exceeds maximum length" });
    }
    let total = LEN_PREFIX + len;
    if bytes.len() < total {
        return Err(DecodeError::TruncatedFrame { needed: total, available: bytes.len() });
    }
    let tag = bytes[LEN_PREFIX];
    let mut body = Body { tag, buf: &bytes[LEN_PREFIX + 1..total] };
    let msg = match tag {
        tag::HELLO => ControlMessage::Hello { version: body.u8()? },
        tag::ADDRESS_REPLY => {
            ControlMessage::AddressReply { observed: body.endpoint()?, assigned: NodeId(body.u32()?) }
        }
        tag::REJECT => {
            let code = body.u8()?;
            let reason = RejectReason::from_code(code).ok_or(body.malformed("unknown reject reason"))?;
            ControlMessage::Reject { reason }
        }
        tag::MEMBER_LIST => {
            let count = body.u16()? as usize;
            let mut members = Vec::with_capacity(count.min(body.buf.len() / 10));
            for _ in 0..count {
                members.push(body.member()?);
            }
            ControlMessage::MemberList { members }
        }
        tag::MEMBER_UPDATE => ControlMessage::MemberUpdate { member: body.member()? },
        tag::CTRL_HELLO => ControlMessage::CtrlHello { id: NodeId(body.u32()?) },
        tag::NAT_SETUP_REQ => ControlMessage::NatSetupReq {
            req_id: body.u64()?,
            src: body.endpoint()?,
            dst: body.endpoint()?,
        },
        tag::NAT_SETUP_ACK => ControlMessage::NatSetupAck { req_id: body.u64()? },
        tag::NAT_SETUP_ERR => {
            let req_id = body.u64()?;
            let code = body.u8()?;
            let code = SetupErrorCode::from_code(code).ok_or(body.malformed("unknown setup error code"))?;
            ControlMessage::NatSetupErr { req_id, code }
        }
        tag::SUBSCRIBE_TREE => ControlMessage::SubscribeTree,
        tag::REGISTER_LISTENER => ControlMessage::RegisterListener { endpoint: body.endpoint()? },
        tag::UNREGISTER_LISTENER => {
            ControlMessage::UnregisterListener { endpoint: body.endpoint()? }
        }
        other => return Err(DecodeError::UnknownTag(other)),
    };
    if !body.buf.is_empty() {
        return Err(body.malformed("trailing bytes inside frame"));
    }
    Ok((msg, total))
}

struct Body<'a> {
    tag: u8,
    buf: &'a [u8],
}

impl<'a> Body<'a> {
    fn malformed(&self, detail: &'static str) -> DecodeError {
        DecodeError::MalformedPayload { tag: self.tag, detail }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(self.malformed("payload shorter than its fields"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    fn endpoint(&mut self) -> Result<Endpoint, DecodeError> {
        let b = self.take(ENDPOINT_LEN)?;
        let ip = Ipv4Addr::new(b[0], b[1], b[2], b[3]);
        let port = u16::from_be_bytes([b[4], b[5]]);
        Endpoint::new(ip, port).map_err(|_| self.malformed("endpoint with port 0"))
    }

    fn member(&mut self) -> Result<MemberRecord, DecodeError> {
        let id = NodeId(self.u32()?);
        Ok(MemberRecord { id, external: self.endpoint()? })
    }
}

/// Reassembles frames from a byte stream.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        FrameReader::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame as `(message, raw frame bytes)`, or `None` when
    /// more input is needed. A decode error poisons the stream; callers
    /// should drop the connection.
    pub fn next_frame(&mut self) -> Result<Option<(ControlMessage, Vec<u8>)>, DecodeError> {
        match decode(&self.buf) {
            Ok((msg, used)) => {
                let raw: Vec<u8> = self.buf.drain(..used).collect();
                Ok(Some((msg, raw)))
            }
            Err(DecodeError::TruncatedFrame { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
