//! Ready-made overlays on the fabric: a public seed plus nodes placed either
//! as functions (each behind its own gateway) or as public VMs.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use crate::fabric::{Fabric, FabricConfig, HostId, NatPolicy, ProcId, Subnet};
use crate::networking::{AgentConfig, NodeAgent};
use crate::proto::{Endpoint, NodeId};
use crate::seed::{SeedProcess, DEFAULT_PORT};

pub const SEED_IP: Ipv4Addr = Ipv4Addr::new(3, 0, 0, 1);
pub const CONTROL_PORT: u16 = 5000;
pub const IPC_PATH: &str = "/run/boxer/ipc.sock";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Private address behind a dedicated gateway.
    Function,
    /// Public address, no gateway.
    Vm,
}

#[derive(Debug, Clone)]
pub struct OverlayConfig {
    pub fabric: FabricConfig,
    /// Policy of every function gateway.
    pub policy: NatPolicy,
    pub control_port: u16,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        OverlayConfig { fabric: FabricConfig::default(), policy: NatPolicy::default(), control_port: CONTROL_PORT }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimNode {
    pub host: HostId,
    pub placement: Placement,
    pub agent: Option<ProcId>,
}

pub struct SimOverlay {
    pub fabric: Fabric,
    pub seed: ProcId,
    pub seed_endpoint: Endpoint,
    pub nodes: Vec<SimNode>,
    control_port: u16,
}

fn function_subnet(i: usize) -> Subnet {
    Subnet::new(Ipv4Addr::new(10, (i >> 8) as u8, (i & 0xff) as u8, 0), 24)
}

fn indexed(first: u8, i: usize) -> Ipv4Addr {
    let n = i as u32 + 1;
    Ipv4Addr::new(first, (n >> 16) as u8, (n >> 8) as u8, n as u8)
}

impl SimOverlay {
    /// Builds hosts for `placements` and starts the seed. Agents start with
    /// [`SimOverlay::start`].
    pub fn new(config: OverlayConfig, placements: &[Placement]) -> Self {
        assert!(placements.len() < 1 << 16, "too many nodes");
        let mut fabric_config = config.fabric;
        for (i, p) in placements.iter().enumerate() {
            if *p == Placement::Function {
                fabric_config = fabric_config.with_gateway(function_subnet(i), indexed(54, i), config.policy);
            }
        }
        let mut fabric = Fabric::new(fabric_config);
        let seed_host = fabric.add_host(SEED_IP);
        let seed = fabric.spawn(seed_host, Box::new(SeedProcess::new(SEED_IP, DEFAULT_PORT)));
        let nodes = placements
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let ip = match p {
                    Placement::Function => function_subnet(i).host(2),
                    Placement::Vm => indexed(52, i),
                };
                SimNode { host: fabric.add_host(ip), placement: *p, agent: None }
            })
            .collect();
        SimOverlay {
            fabric,
            seed,
            seed_endpoint: Endpoint::new(SEED_IP, DEFAULT_PORT).expect("nonzero"),
            nodes,
            control_port: config.control_port,
        }
    }

    pub fn functions(config: OverlayConfig, n: usize) -> Self {
        SimOverlay::new(config, &vec![Placement::Function; n])
    }

    pub fn agent_config(&self) -> AgentConfig {
        let mut c = AgentConfig::new(self.seed_endpoint);
        c.control_port = self.control_port;
        c.ipc_path = Some(IPC_PATH.to_string());
        c
    }

    /// Starts node `i`'s agent now.
    pub fn start(&mut self, i: usize) -> ProcId {
        let config = self.agent_config();
        self.start_with(i, config)
    }

    pub fn start_with(&mut self, i: usize, config: AgentConfig) -> ProcId {
        assert!(self.nodes[i].agent.is_none(), "node {i} already started");
        let pid = self.fabric.spawn(self.nodes[i].host, Box::new(NodeAgent::new(config)));
        self.nodes[i].agent = Some(pid);
        pid
    }

    pub fn start_all(&mut self) {
        for i in 0..self.nodes.len() {
            if self.nodes[i].agent.is_none() {
                self.start(i);
            }
        }
    }

    /// A second sandbox on node `i`'s machine, sharing its private address.
    pub fn add_colocated(&mut self, i: usize) -> usize {
        let host = self.fabric.add_colocated_host(self.nodes[i].host);
        self.nodes.push(SimNode { host, placement: self.nodes[i].placement, agent: None });
        self.nodes.len() - 1
    }

    pub fn agent(&self, i: usize) -> &NodeAgent {
        let pid = self.nodes[i].agent.expect("node not started");
        self.fabric.process::<NodeAgent>(pid).expect("agent process")
    }

    pub fn seed(&self) -> &SeedProcess {
        self.fabric.process::<SeedProcess>(self.seed).expect("seed process")
    }

    pub fn node_id(&self, i: usize) -> Option<NodeId> {
        self.agent(i).id()
    }

    pub fn host_ip(&self, i: usize) -> Ipv4Addr {
        self.fabric.host_ip(self.nodes[i].host)
    }

    /// Address under which other members reach node `i`.
    pub fn external_ip(&self, i: usize) -> Ipv4Addr {
        match self.fabric.gateway_of(self.nodes[i].host) {
            Some(g) => g.public_ip(),
            None => self.host_ip(i),
        }
    }

    pub fn drain(&mut self) -> u64 {
        self.fabric.run()
    }

    /// Unordered pairs of node ids with an established control link,
    /// counted once per pair and only when both ends agree.
    pub fn control_links(&self) -> BTreeSet<(NodeId, NodeId)> {
        let mut seen = BTreeSet::new();
        let mut agreed = BTreeSet::new();
        for n in self.nodes.iter().filter_map(|n| n.agent) {
            let agent = self.fabric.process::<NodeAgent>(n).expect("agent");
            let Some(me) = agent.id() else { continue };
            for peer in agent.linked_peers() {
                let pair = (me.min(peer), me.max(peer));
                if !seen.insert(pair) {
                    agreed.insert(pair);
                }
            }
        }
        agreed
    }
}
