//! NAT gateway model: mapping table, inbound filtering, port allocation.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use super::segment::Segment;
use super::Subnet;
use crate::proto::Endpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingBehavior {
    /// One external endpoint per internal endpoint, whatever the destination.
    EndpointIndependent,
    /// A fresh external endpoint per (internal, destination) pair.
    EndpointDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilteringBehavior {
    AddressAndPortDependent,
    AddressDependent,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PortAllocation {
    /// Reuse the internal port when free, otherwise fall back to sequential.
    Preserving,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct NatPolicy {
    pub mapping: MappingBehavior,
    pub filtering: FilteringBehavior,
    pub port_allocation: PortAllocation,
}

impl Default for NatPolicy {
    fn default() -> Self {
        NatPolicy {
            mapping: MappingBehavior::EndpointIndependent,
            filtering: FilteringBehavior::AddressAndPortDependent,
            port_allocation: PortAllocation::Preserving,
        }
    }
}

impl NatPolicy {
    /// Endpoint-dependent mapping with sequential ports: punching cannot
    /// predict the external endpoint behind this profile.
    pub fn symmetric() -> Self {
        NatPolicy {
            mapping: MappingBehavior::EndpointDependent,
            filtering: FilteringBehavior::AddressAndPortDependent,
            port_allocation: PortAllocation::Sequential,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NatMapping {
    pub internal: Endpoint,
    pub external: Endpoint,
    /// Destination this mapping is bound to (endpoint-dependent only).
    pub bound_remote: Option<Endpoint>,
    pub permitted_remotes: BTreeSet<Endpoint>,
    #[serde(serialize_with = "ser_duration_ns")]
    pub created_at: Duration,
    #[serde(serialize_with = "ser_duration_ns")]
    pub last_used: Duration,
}

fn ser_duration_ns<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_nanos() as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NatError {
    #[error("gateway {0} ran out of external ports")]
    PortExhausted(Ipv4Addr),
    #[error("source {0} is not inside the gateway subnet")]
    NotInternal(Endpoint),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropReason {
    /// No mapping owns the destination port.
    NoMapping,
    /// A mapping exists but the source is not permitted.
    Filtered,
    /// The mapping idled out.
    Expired,
    /// Private destination not reachable from the sender.
    Unroutable,
    /// Delivered to a host with no matching socket.
    NoSocket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InboundVerdict {
    Deliver(Endpoint),
    Drop(DropReason),
}

const FIRST_DYNAMIC_PORT: u32 = 1024;

/// A NAT gateway in front of one private subnet.
#[derive(Debug, Clone)]
pub struct NatGateway {
    public_ip: Ipv4Addr,
    subnet: Subnet,
    policy: NatPolicy,
    idle_timeout: Option<Duration>,
    /// External port -> mapping.
    mappings: BTreeMap<u16, NatMapping>,
    /// (internal, bound remote) -> external port.
    index: BTreeMap<(Endpoint, Option<Endpoint>), u16>,
    next_port: u32,
    /// Every external endpoint each internal endpoint was ever mapped to.
    history: BTreeMap<Endpoint, BTreeSet<Endpoint>>,
}

impl NatGateway {
    pub fn new(public_ip: Ipv4Addr, subnet: Subnet, policy: NatPolicy) -> Self {
        Self::with_port_base(public_ip, subnet, policy, FIRST_DYNAMIC_PORT as u16)
    }

    /// Sequential allocation starts at `base`.
    pub fn with_port_base(public_ip: Ipv4Addr, subnet: Subnet, policy: NatPolicy, base: u16) -> Self {
        NatGateway {
            public_ip,
            subnet,
            policy,
            idle_timeout: None,
            mappings: BTreeMap::new(),
            index: BTreeMap::new(),
            next_port: base.max(1) as u32,
            history: BTreeMap::new(),
        }
    }

    pub fn set_idle_timeout(&mut self, timeout: Option<Duration>) {
        self.idle_timeout = timeout;
    }

    pub fn public_ip(&self) -> Ipv4Addr {
        self.public_ip
    }

    pub fn subnet(&self) -> Subnet {
        self.subnet
    }

    pub fn policy(&self) -> NatPolicy {
        self.policy
    }

    pub fn mappings(&self) -> impl Iterator<Item = &NatMapping> {
        self.mappings.values()
    }

    /// All external endpoints ever assigned to `internal` during the run.
    pub fn external_history(&self, internal: Endpoint) -> BTreeSet<Endpoint> {
        self.history.get(&internal).cloned().unwrap_or_default()
    }

    /// Rewrites the source of an outbound segment, creating the mapping on
    /// first use and permitting the destination for inbound replies.
    pub fn translate_outbound(&mut self, mut seg: Segment, now: Duration) -> Result<Segment, NatError> {
        if !self.subnet.contains(seg.src.ip()) {
            return Err(NatError::NotInternal(seg.src));
        }
        let key = match self.policy.mapping {
            MappingBehavior::EndpointIndependent => (seg.src, None),
            MappingBehavior::EndpointDependent => (seg.src, Some(seg.dst)),
        };
        if let Some(&port) = self.index.get(&key) {
            if self.expired(port, now) {
                self.remove(port);
            }
        }
        let port = match self.index.get(&key) {
            Some(&port) => port,
            None => {
                let port = self.allocate(seg.src.port())?;
                let external = Endpoint::new(self.public_ip, port).expect("allocated port is nonzero");
                self.mappings.insert(
                    port,
                    NatMapping {
                        internal: seg.src,
                        external,
                        bound_remote: key.1,
                        permitted_remotes: BTreeSet::new(),
                        created_at: now,
                        last_used: now,
                    },
                );
                self.index.insert(key, port);
                self.history.entry(seg.src).or_default().insert(external);
                port
            }
        };
        let mapping = self.mappings.get_mut(&port).expect("indexed mapping exists");
        mapping.permitted_remotes.insert(seg.dst);
        mapping.last_used = now;
        seg.src = mapping.external;
        Ok(seg)
    }

    /// Decides whether an inbound segment addressed to this gateway reaches
    /// an internal endpoint. On delivery the returned endpoint is the
    /// rewritten destination.
    pub fn filter_inbound(&mut self, seg: &Segment, now: Duration) -> InboundVerdict {
        if seg.dst.ip() != self.public_ip {
            return InboundVerdict::Drop(DropReason::NoMapping);
        }
        let port = seg.dst.port();
        if !self.mappings.contains_key(&port) {
            return InboundVerdict::Drop(DropReason::NoMapping);
        }
        if self.expired(port, now) {
            self.remove(port);
            return InboundVerdict::Drop(DropReason::Expired);
        }
        let mapping = self.mappings.get_mut(&port).expect("checked above");
        let permitted = match self.policy.filtering {
            FilteringBehavior::Open => true,
            FilteringBehavior::AddressDependent => {
                mapping.permitted_remotes.iter().any(|r| r.ip() == seg.src.ip())
            }
            FilteringBehavior::AddressAndPortDependent => mapping.permitted_remotes.contains(&seg.src),
        };
        if !permitted {
            return InboundVerdict::Drop(DropReason::Filtered);
        }
        mapping.last_used = now;
        InboundVerdict::Deliver(mapping.internal)
    }

    fn expired(&self, port: u16, now: Duration) -> bool {
        match (self.idle_timeout, self.mappings.get(&port)) {
            (Some(timeout), Some(m)) => now.saturating_sub(m.last_used) >= timeout,
            _ => false,
        }
    }

    fn remove(&mut self, port: u16) {
        if let Some(m) = self.mappings.remove(&port) {
            self.index.remove(&(m.internal, m.bound_remote));
        }
    }

    fn allocate(&mut self, internal_port: u16) -> Result<u16, NatError> {
        if self.policy.port_allocation == PortAllocation::Preserving
            && !self.mappings.contains_key(&internal_port)
        {
            return Ok(internal_port);
        }
        while self.next_port <= u16::MAX as u32 {
            let candidate = self.next_port as u16;
            self.next_port += 1;
            if !self.mappings.contains_key(&candidate) {
                return Ok(candidate);
            }
        }
        Err(NatError::PortExhausted(self.public_ip))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::segment::SegmentKind;

    fn ep(s: &str) -> Endpoint {
        s.parse().unwrap()
    }

    fn gw(policy: NatPolicy) -> NatGateway {
        NatGateway::new("54.1.2.3".parse().unwrap(), "10.0.0.0/24".parse().unwrap(), policy)
    }

    fn syn(src: &str, dst: &str) -> Segment {
        Segment::new(SegmentKind::Syn, ep(src), ep(dst))
    }

    const T0: Duration = Duration::ZERO;

    #[test]
    fn preserving_port_on_first_outbound() {
        let mut g = gw(NatPolicy::default());
        let out = g.translate_outbound(syn("10.0.0.2:5000", "8.8.8.8:53"), T0).unwrap();
        assert_eq!(out.src, ep("54.1.2.3:5000"));
        assert_eq!(out.dst, ep("8.8.8.8:53"));
    }

    #[test]
    fn endpoint_independent_reuses_mapping() {
        let mut g = gw(NatPolicy::default());
        let a = g.translate_outbound(syn("10.0.0.2:5000", "8.8.8.8:53"), T0).unwrap();
        let b = g.translate_outbound(syn("10.0.0.2:5000", "9.9.9.9:80"), T0).unwrap();
        assert_eq!(a.src, b.src);
        assert_eq!(g.external_history(ep("10.0.0.2:5000")).len(), 1);
    }

    #[test]
    fn endpoint_dependent_allocates_per_destination() {
        // Replay: two sends, then enumerate the table.
        let mut g = gw(NatPolicy::symmetric());
        let a = g.translate_outbound(syn("10.0.0.2:5000", "8.8.8.8:53"), T0).unwrap();
        let b = g.translate_outbound(syn("10.0.0.2:5000", "9.9.9.9:80"), T0).unwrap();
        assert_ne!(a.src, b.src);
        let table: Vec<_> = g.mappings().map(|m| (m.external.port(), m.bound_remote)).collect();
        assert_eq!(table, vec![(1024, Some(ep("8.8.8.8:53"))), (1025, Some(ep("9.9.9.9:80")))]);
    }

    #[test]
    fn preserving_falls_back_on_collision() {
        let mut g = gw(NatPolicy::default());
        let a = g.translate_outbound(syn("10.0.0.2:7000", "8.8.8.8:53"), T0).unwrap();
        let b = g.translate_outbound(syn("10.0.0.3:7000", "8.8.8.8:53"), T0).unwrap();
        assert_eq!(a.src.port(), 7000);
        assert_eq!(b.src.port(), 1024);
    }

    #[test]
    fn sequential_exhaustion() {
        let mut g = NatGateway::with_port_base(
            "54.1.2.3".parse().unwrap(),
            "10.0.0.0/24".parse().unwrap(),
            NatPolicy::symmetric(),
            65535,
        );
        g.translate_outbound(syn("10.0.0.2:1", "8.8.8.8:53"), T0).unwrap();
        let err = g.translate_outbound(syn("10.0.0.2:2", "8.8.8.8:53"), T0).unwrap_err();
        assert_eq!(err, NatError::PortExhausted("54.1.2.3".parse().unwrap()));
    }

    #[test]
    fn outside_source_is_rejected() {
        let mut g = gw(NatPolicy::default());
        assert!(matches!(
            g.translate_outbound(syn("10.0.1.2:5000", "8.8.8.8:53"), T0),
            Err(NatError::NotInternal(_))
        ));
    }

    #[test]
    fn unsolicited_inbound_is_dropped() {
        let mut g = gw(NatPolicy::default());
        assert_eq!(
            g.filter_inbound(&syn("8.8.8.8:4000", "54.1.2.3:5000"), T0),
            InboundVerdict::Drop(DropReason::NoMapping)
        );
    }

    #[test]
    fn reply_from_contacted_endpoint_is_delivered() {
        let mut g = gw(NatPolicy::default());
        g.translate_outbound(syn("10.0.0.2:5000", "8.8.8.8:4000"), T0).unwrap();
        assert_eq!(
            g.filter_inbound(&syn("8.8.8.8:4000", "54.1.2.3:5000"), T0),
            InboundVerdict::Deliver(ep("10.0.0.2:5000"))
        );
    }

    #[test]
    fn filtering_policies_over_same_trace() {
        // Same outbound history, probe from permitted IP on another port.
        let probe = syn("8.8.8.8:4001", "54.1.2.3:5000");
        let expected = [
            (FilteringBehavior::AddressDependent, InboundVerdict::Deliver(ep("10.0.0.2:5000"))),
            (FilteringBehavior::AddressAndPortDependent, InboundVerdict::Drop(DropReason::Filtered)),
            (FilteringBehavior::Open, InboundVerdict::Deliver(ep("10.0.0.2:5000"))),
        ];
        for (filtering, verdict) in expected {
            let mut g = gw(NatPolicy { filtering, ..NatPolicy::default() });
            g.translate_outbound(syn("10.0.0.2:5000", "8.8.8.8:4000"), T0).unwrap();
            assert_eq!(g.filter_inbound(&probe, T0), verdict, "{filtering:?}");
        }
    }

    #[test]
    fn idle_mapping_expires() {
        let mut g = gw(NatPolicy::default());
        g.set_idle_timeout(Some(Duration::from_secs(30)));
        g.translate_outbound(syn("10.0.0.2:5000", "8.8.8.8:4000"), T0).unwrap();
        let reply = syn("8.8.8.8:4000", "54.1.2.3:5000");
        assert!(matches!(g.filter_inbound(&reply, Duration::from_secs(10)), InboundVerdict::Deliver(_)));
        assert_eq!(
            g.filter_inbound(&reply, Duration::from_secs(40)),
            InboundVerdict::Drop(DropReason::Expired)
        );
        assert_eq!(g.mappings().count(), 0);
    }
}
