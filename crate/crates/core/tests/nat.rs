mod common;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use boxer::fabric::{InboundVerdict, NatGateway, NatPolicy, Segment, SegmentKind, Subnet};
use boxer::proto::Endpoint;
use proptest::prelude::*;

fn gateway(policy: NatPolicy, base: u16) -> NatGateway {
    let subnet: Subnet = "10.0.0.0/24".parse().unwrap();
    NatGateway::with_port_base(Ipv4Addr::new(54, 0, 0, 1), subnet, policy, base)
}

#[derive(Debug, Clone)]
enum Op {
    Out { host: u8, port: u16, remote: Endpoint },
    In { remote: Endpoint, port: u16 },
}

fn arb_op() -> impl Strategy<Value = Op> {
    let remote = (0u8..4, 1u16..6).prop_map(|(h, p)| Endpoint::new(Ipv4Addr::new(8, 8, 8, h), 1000 + p).unwrap());
    prop_oneof![
        3 => (2u8..6, 5000u16..5004, remote.clone()).prop_map(|(host, port, remote)| Op::Out { host, port, remote }),
        2 => (remote, 1024u16..1040).prop_map(|(remote, port)| Op::In { remote, port }),
    ]
}

proptest! {
    #[test]
    fn endpoint_independent_mapping_is_stable(ops in prop::collection::vec(arb_op(), 1..200), base in 1024u16..30000) {
        let mut g = gateway(NatPolicy::default(), base);
        let mut internals = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            let now = Duration::from_millis(i as u64);
            if let Op::Out { host, port, remote } = op {
                let src = Endpoint::new(Ipv4Addr::new(10, 0, 0, *host), *port).unwrap();
                g.translate_outbound(Segment::new(SegmentKind::Syn, src, *remote), now).unwrap();
                internals.push(src);
            }
        }
        for src in internals {
            prop_assert!(g.external_history(src).len() <= 1);
        }
    }

    /// Inbound is delivered exactly when an earlier outbound from the same
    /// mapping went to that source.
    #[test]
    fn inbound_requires_prior_outbound(ops in prop::collection::vec(arb_op(), 1..200)) {
        let mut g = gateway(NatPolicy::default(), 1024);
        let public = Ipv4Addr::new(54, 0, 0, 1);
        // external port -> (internal, remotes contacted)
        let mut model: BTreeMap<u16, (Endpoint, Vec<Endpoint>)> = BTreeMap::new();
        for (i, op) in ops.into_iter().enumerate() {
            let now = Duration::from_millis(i as u64);
            match op {
                Op::Out { host, port, remote } => {
                    let src = Endpoint::new(Ipv4Addr::new(10, 0, 0, host), port).unwrap();
                    let out = g.translate_outbound(Segment::new(SegmentKind::Syn, src, remote), now).unwrap();
                    let entry = model.entry(out.src.port()).or_insert((src, Vec::new()));
                    prop_assert_eq!(entry.0, src);
                    entry.1.push(remote);
                }
                Op::In { remote, port } => {
                    let dst = Endpoint::new(public, port).unwrap();
                    let verdict = g.filter_inbound(&Segment::new(SegmentKind::Syn, remote, dst), now);
                    let expected = model.get(&port).filter(|(_, rs)| rs.contains(&remote)).map(|(int, _)| *int);
                    match expected {
                        Some(int) => prop_assert_eq!(verdict, InboundVerdict::Deliver(int)),
                        None => prop_assert!(matches!(verdict, InboundVerdict::Drop(_))),
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_mapping_never_reuses_across_destinations(ops in prop::collection::vec(arb_op(), 1..100)) {
        let mut g = gateway(NatPolicy::symmetric(), 1024);
        let mut seen: BTreeMap<(Endpoint, Endpoint), Endpoint> = BTreeMap::new();
        for (i, op) in ops.into_iter().enumerate() {
            if let Op::Out { host, port, remote } = op {
                let src = Endpoint::new(Ipv4Addr::new(10, 0, 0, host), port).unwrap();
                let out = g.translate_outbound(Segment::new(SegmentKind::Syn, src, remote), Duration::from_millis(i as u64)).unwrap();
                let prev = *seen.entry((src, remote)).or_insert(out.src);
                prop_assert_eq!(prev, out.src);
            }
        }
        let externals: Vec<_> = seen.values().collect();
        let mut dedup = externals.clone();
        dedup.sort();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), externals.len());
    }
}
