mod common;

use std::any::Any;
use std::net::Ipv4Addr;
use std::time::Duration;

use boxer::fabric::{DropReason, Fabric, FabricConfig, NatPolicy, ProcId, SegmentKind, Subnet, Verdict};
use boxer::proto::Endpoint;
use boxer::transport::{ConnectError, NetEvent, NetIo, Process, TransportError};
use common::{ep, unsolicited_deliveries};

type Script = Box<dyn FnMut(&mut dyn NetIo, &NetEvent)>;

/// Records every event it sees and lets a closure react.
struct Probe {
    script: Script,
    log: Vec<(Duration, NetEvent)>,
}

impl Probe {
    fn new(script: impl FnMut(&mut dyn NetIo, &NetEvent) + 'static) -> Box<Self> {
        Box::new(Probe { script: Box::new(script), log: Vec::new() })
    }
}

impl Process for Probe {
    fn on_event(&mut self, io: &mut dyn NetIo, event: NetEvent) {
        (self.script)(io, &event);
        self.log.push((io.now(), event));
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

fn log(f: &Fabric, pid: ProcId) -> &[(Duration, NetEvent)] {
    &f.process::<Probe>(pid).unwrap().log
}

const D: Duration = Duration::from_micros(100);

fn natted() -> FabricConfig {
    FabricConfig::default()
        .with_gateway("10.0.1.0/24".parse::<Subnet>().unwrap(), Ipv4Addr::new(54, 0, 0, 1), NatPolicy::default())
        .with_gateway("10.0.2.0/24".parse::<Subnet>().unwrap(), Ipv4Addr::new(54, 0, 0, 2), NatPolicy::default())
}

fn listener(port: u16, reply: &'static [u8]) -> Box<Probe> {
    Probe::new(move |io, ev| match ev {
        NetEvent::Started => {
            io.listen(io.local_ip(), port, true).unwrap();
        }
        NetEvent::Accepted { conn, .. } if !reply.is_empty() => io.send(*conn, reply),
        _ => {}
    })
}

fn dialer(target: &'static str) -> Box<Probe> {
    Probe::new(move |io, ev| {
        if let NetEvent::Started = ev {
            io.connect(None, target.parse().unwrap());
        }
    })
}

#[test]
fn request_over_fresh_connection_costs_three_delays() {
    let mut f = Fabric::new(FabricConfig::default());
    let a = f.add_host(Ipv4Addr::new(1, 0, 0, 1));
    let b = f.add_host(Ipv4Addr::new(1, 0, 0, 2));
    let server = f.spawn(b, listener(80, b"x"));
    f.run();
    let client = f.spawn(a, dialer("1.0.0.2:80"));
    f.run();
    let events = log(&f, client);
    assert!(matches!(events[1], (t, NetEvent::Connected { .. }) if t == 2 * D));
    assert!(matches!(&events[2], (t, NetEvent::Data { bytes, .. }) if *t == 3 * D && bytes == b"x"));
    let accepted = log(&f, server).iter().find(|(_, e)| matches!(e, NetEvent::Accepted { .. })).unwrap();
    assert_eq!(accepted.0, 2 * D);
    let kinds: Vec<_> = f.trace().iter().map(|r| r.kind).collect();
    assert_eq!(kinds, vec![SegmentKind::Syn, SegmentKind::SynAck, SegmentKind::Data]);
}

#[test]
fn no_listener_is_refused() {
    let mut f = Fabric::new(FabricConfig::default());
    let a = f.add_host(Ipv4Addr::new(1, 0, 0, 1));
    f.add_host(Ipv4Addr::new(1, 0, 0, 2));
    let client = f.spawn(a, dialer("1.0.0.2:80"));
    f.run();
    assert!(matches!(
        log(&f, client)[1],
        (t, NetEvent::ConnectFailed { error: ConnectError::Refused, .. }) if t == 2 * D
    ));
}

#[test]
fn unsolicited_inbound_times_out_behind_nat() {
    let mut f = Fabric::new(natted());
    let a = f.add_host(Ipv4Addr::new(10, 0, 1, 2));
    let b = f.add_host(Ipv4Addr::new(10, 0, 2, 2));
    f.spawn(b, listener(80, b""));
    f.run();
    let client = f.spawn(a, dialer("54.0.0.2:80"));
    f.run();
    let timeout = f.config().connect_timeout;
    assert!(matches!(
        log(&f, client)[1],
        (t, NetEvent::ConnectFailed { error: ConnectError::TimedOut, .. }) if t == timeout
    ));
    assert_eq!(f.trace()[0].verdict, Verdict::Dropped(DropReason::NoMapping));
}

#[test]
fn punch_opens_the_path_for_one_source() {
    let mut f = Fabric::new(natted());
    let a = f.add_host(Ipv4Addr::new(10, 0, 1, 2));
    let b = f.add_host(Ipv4Addr::new(10, 0, 2, 2));
    let c = f.add_host(Ipv4Addr::new(10, 0, 2, 3));
    // Client a binds a known port so the server side can punch toward it.
    let client = f.spawn(
        a,
        Probe::new(|io, ev| {
            if let NetEvent::Timer { .. } = ev {
                io.connect(Some(ep("10.0.1.2:6000")), ep("54.0.0.2:80"));
            }
            if let NetEvent::Started = ev {
                io.set_timer(Duration::from_millis(1), 0);
            }
        }),
    );
    f.spawn(
        b,
        Probe::new(|io, ev| {
            if let NetEvent::Started = ev {
                let local = io.listen(io.local_ip(), 80, true).unwrap();
                io.punch(local, ep("54.0.0.1:6000")).unwrap();
            }
        }),
    );
    // A second host on b's subnet that nobody punched for.
    let stranger = f.spawn(c, dialer("54.0.0.1:6000"));
    f.run();
    assert!(log(&f, client).iter().any(|(_, e)| matches!(e, NetEvent::Connected { .. })));
    assert!(log(&f, stranger).iter().any(|(_, e)| matches!(e, NetEvent::ConnectFailed { .. })));
    assert!(unsolicited_deliveries(&f).is_empty());
    let punch = f.trace().iter().find(|r| r.kind == SegmentKind::Punch).unwrap();
    assert_eq!(punch.src, ep("54.0.0.2:80"));
}

#[test]
fn punch_from_bound_endpoint_needs_sharing() {
    let mut f = Fabric::new(FabricConfig::default());
    let a = f.add_host(Ipv4Addr::new(1, 0, 0, 1));
    let result = std::rc::Rc::new(std::cell::RefCell::new(None));
    let out = result.clone();
    f.spawn(
        a,
        Probe::new(move |io, ev| {
            if let NetEvent::Started = ev {
                let local = io.listen(io.local_ip(), 80, false).unwrap();
                *out.borrow_mut() = Some(io.punch(local, ep("1.0.0.9:1")));
            }
        }),
    );
    f.run();
    assert!(matches!(result.borrow().clone(), Some(Err(TransportError::AddrInUse(_)))));
}

#[test]
fn colocated_hosts_share_address_but_not_sockets() {
    let mut f = Fabric::new(natted());
    let a = f.add_host(Ipv4Addr::new(10, 0, 1, 2));
    let a2 = f.add_colocated_host(a);
    assert_eq!(f.host_ip(a), f.host_ip(a2));
    f.spawn(a, listener(80, b""));
    f.run();
    let p = f.spawn(
        a2,
        Probe::new(|io, ev| {
            if let NetEvent::Started = ev {
                io.listen(io.local_ip(), 80, false).unwrap();
            }
        }),
    );
    f.run();
    assert_eq!(log(&f, p).len(), 1);
}

#[test]
fn identical_inputs_give_identical_traces() {
    let run = |seed| {
        let mut cfg = natted();
        cfg.rng_seed = seed;
        let mut f = Fabric::new(cfg);
        let a = f.add_host(Ipv4Addr::new(10, 0, 1, 2));
        let b = f.add_host(Ipv4Addr::new(1, 0, 0, 2));
        f.spawn(b, listener(80, b"hello"));
        f.spawn(a, dialer("1.0.0.2:80"));
        f.run();
        f.trace_json()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8), "gateway port base should depend on the seed");
}

#[test]
fn trace_json_fields() {
    let mut f = Fabric::new(FabricConfig::default());
    let a = f.add_host(Ipv4Addr::new(1, 0, 0, 1));
    f.add_host(Ipv4Addr::new(1, 0, 0, 2));
    f.spawn(a, dialer("1.0.0.2:80"));
    f.run();
    let json = f.trace_json();
    let lines: Vec<serde_json::Value> = json.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let first = &lines[0];
    assert_eq!(first["kind"], "SYN");
    assert_eq!(first["verdict"], "delivered");
    assert_eq!(lines[1]["kind"], "RST");
    assert_eq!(first["time"], 100_000);
    assert_eq!(first["dst"], "1.0.0.2:80");
}

#[test]
fn local_processes_talk_without_delay() {
    let mut f = Fabric::new(FabricConfig::default());
    let a = f.add_host(Ipv4Addr::new(1, 0, 0, 1));
    f.spawn(
        a,
        Probe::new(|io, ev| {
            if let NetEvent::Started = ev {
                io.listen_local("/tmp/x.sock").unwrap();
            }
        }),
    );
    f.run();
    let c = f.spawn(
        a,
        Probe::new(|io, ev| {
            if let NetEvent::Started = ev {
                io.connect_local("/tmp/x.sock");
            }
        }),
    );
    f.run();
    assert!(matches!(log(&f, c)[1], (t, NetEvent::Connected { .. }) if t == Duration::ZERO));
    let missing = f.spawn(
        a,
        Probe::new(|io, ev| {
            if let NetEvent::Started = ev {
                io.connect_local("/tmp/none.sock");
            }
        }),
    );
    f.run();
    assert!(matches!(log(&f, missing)[1].1, NetEvent::ConnectFailed { error: ConnectError::Refused, .. }));
}

#[test]
fn endpoint_rejects_port_zero() {
    assert!(Endpoint::new(Ipv4Addr::LOCALHOST, 0).is_err());
}
