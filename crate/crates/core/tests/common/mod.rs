#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use boxer::fabric::{Fabric, SegmentKind, TraceRecord, Verdict};
use boxer::proto::{ControlMessage, Endpoint, MemberRecord, NodeId, RejectReason, SetupErrorCode};
use proptest::prelude::*;

pub fn ep(s: &str) -> Endpoint {
    s.parse().unwrap()
}

pub fn arb_endpoint() -> impl Strategy<Value = Endpoint> {
    (any::<u32>(), 1..=u16::MAX).prop_map(|(ip, port)| Endpoint::new(Ipv4Addr::from(ip), port).unwrap())
}

pub fn arb_member() -> impl Strategy<Value = MemberRecord> {
    (any::<u32>(), arb_endpoint()).prop_map(|(id, external)| MemberRecord { id: NodeId(id), external })
}

pub fn arb_message() -> impl Strategy<Value = ControlMessage> {
    let reason = prop_oneof![Just(RejectReason::DuplicateAddress), Just(RejectReason::VersionMismatch)];
    let code = prop_oneof![
        Just(SetupErrorCode::NoListener),
        Just(SetupErrorCode::BindFailed),
        Just(SetupErrorCode::UnknownDestination),
        Just(SetupErrorCode::RemoteUnreachable),
        Just(SetupErrorCode::Timeout),
    ];
    prop_oneof![
        any::<u8>().prop_map(|version| ControlMessage::Hello { version }),
        (arb_endpoint(), any::<u32>())
            .prop_map(|(observed, id)| ControlMessage::AddressReply { observed, assigned: NodeId(id) }),
        reason.prop_map(|reason| ControlMessage::Reject { reason }),
        prop::collection::vec(arb_member(), 0..40).prop_map(|members| ControlMessage::MemberList { members }),
        arb_member().prop_map(|member| ControlMessage::MemberUpdate { member }),
        any::<u32>().prop_map(|id| ControlMessage::CtrlHello { id: NodeId(id) }),
        (any::<u64>(), arb_endpoint(), arb_endpoint())
            .prop_map(|(req_id, src, dst)| ControlMessage::NatSetupReq { req_id, src, dst }),
        any::<u64>().prop_map(|req_id| ControlMessage::NatSetupAck { req_id }),
        (any::<u64>(), code).prop_map(|(req_id, code)| ControlMessage::NatSetupErr { req_id, code }),
        Just(ControlMessage::SubscribeTree),
        arb_endpoint().prop_map(|endpoint| ControlMessage::RegisterListener { endpoint }),
        arb_endpoint().prop_map(|endpoint| ControlMessage::UnregisterListener { endpoint }),
    ]
}

/// Replays a trace against the gateways' public addresses and checks that
/// every inbound delivery through a gateway was preceded by outbound
/// traffic from the same external endpoint to that exact source.
///
/// Returns the offending records. Only valid for address-and-port
/// dependent filtering, the default profile.
pub fn unsolicited_deliveries(fabric: &Fabric) -> Vec<TraceRecord> {
    let publics: BTreeSet<Ipv4Addr> = fabric.gateways().iter().map(|g| g.public_ip()).collect();
    let trace = fabric.trace();
    let mut bad = Vec::new();
    for r in trace {
        if r.verdict != Verdict::Delivered || !publics.contains(&r.dst.ip()) || r.src.ip() == r.dst.ip() {
            continue;
        }
        let permitted = trace.iter().any(|o| o.src == r.dst && o.dst == r.src && o.sent_step < r.step);
        if !permitted {
            bad.push(r.clone());
        }
    }
    bad
}

/// DATA segments whose destination is one of `endpoints`, either on the
/// wire or after translation.
pub fn data_to<'a>(fabric: &'a Fabric, endpoints: &'a BTreeSet<Endpoint>) -> impl Iterator<Item = &'a TraceRecord> {
    fabric.trace().iter().filter(move |r| {
        r.kind == SegmentKind::Data && (endpoints.contains(&r.dst) || r.to.is_some_and(|t| endpoints.contains(&t)))
    })
}
