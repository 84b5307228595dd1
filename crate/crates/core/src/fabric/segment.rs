use std::fmt;

use serde::Serialize;

use crate::proto::Endpoint;

/// Handshake-granularity TCP segment kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING-KEBAB-CASE")]
pub enum SegmentKind {
    Syn,
    SynAck,
    Data,
    Fin,
    /// A SYN whose sender never completes the handshake.
    Punch,
    /// Reply to a SYN that found no listener.
    Rst,
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SegmentKind::Syn => "SYN",
            SegmentKind::SynAck => "SYN-ACK",
            SegmentKind::Data => "DATA",
            SegmentKind::Fin => "FIN",
            SegmentKind::Punch => "PUNCH",
            SegmentKind::Rst => "RST",
        })
    }
}

/// Which connection half a segment belongs to. The fabric uses this to
/// find the socket after the NAT verdict, which is computed from addresses
/// alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Flow {
    None,
    /// Addressed to the connector half with this id.
    ToConnector(u64),
    /// Addressed to the acceptor half with this id.
    ToAcceptor(u64),
    /// SYN from the connector half with this id.
    Open(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub kind: SegmentKind,
    pub payload: Vec<u8>,
    /// Emission ordinal; totally orders segments within a run.
    pub seq: u64,
    pub(crate) flow: Flow,
}

impl Segment {
    pub fn new(kind: SegmentKind, src: Endpoint, dst: Endpoint) -> Self {
        Segment { src, dst, kind, payload: Vec::new(), seq: 0, flow: Flow::None }
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }
}
