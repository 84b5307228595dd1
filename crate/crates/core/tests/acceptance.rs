//! One line per acceptance criterion. Runs without the libtest harness so
//! the lines are always printed; exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use boxer::bench::sim::{self, build, stream_workload, SimBenchConfig, SimClient, Workload, APP_PORT};
use boxer::bench::socket::{self as lb, LoopbackOverlay};
use boxer::bench::{ConnectionType, Direction};
use boxer::execution::{launch_on_fabric, LaunchError, LaunchSpec};
use boxer::fabric::{FabricConfig, NatPolicy, SegmentKind};
use boxer::overlay::{OverlayConfig, Placement, SimOverlay, CONTROL_PORT};
use boxer::proto::{decode, encode, DecodeError, Endpoint, FrameReader};
use common::{arb_message, data_to, unsolicited_deliveries};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn join_correctness() -> Outcome {
    let mut notes = Vec::new();
    for n in [1usize, 2, 8, 32, 64] {
        let started = Instant::now();
        let mut ov = SimOverlay::functions(OverlayConfig::default(), n);
        ov.start_all();
        ov.drain();
        let views: Vec<_> = (0..n).map(|i| ov.agent(i).handle().view().records().to_vec()).collect();
        ensure!(views.iter().all(|v| *v == views[0]), "N={n}: views differ");
        ensure!(views[0].len() == n + 1, "N={n}: {} records", views[0].len());
        let links = ov.control_links().len();
        ensure!(links == n * (n - 1) / 2, "N={n}: {links} links, want {}", n * (n - 1) / 2);
        let elapsed = started.elapsed();
        ensure!(elapsed < Duration::from_secs(5), "N={n}: took {elapsed:?}");
        notes.push(format!("N={n} {}ms", elapsed.as_millis()));
    }
    Ok(notes.join(", "))
}

fn duplicate_rejection() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut ov = SimOverlay::functions(OverlayConfig::default(), 1);
    let twin = ov.add_colocated(0);
    ov.start(0);
    ov.drain();
    let agent = ov.start(twin);
    let spec = LaunchSpec::new(ov.seed_endpoint, vec!["true".into()], dir.path());
    match launch_on_fabric(&mut ov.fabric, agent, &spec, Duration::from_secs(10)) {
        Err(e @ LaunchError::JoinRejected(_)) if e.exit_code() == 64 => Ok(format!("second joiner: {e}, exit 64")),
        Err(e) => Err(format!("wrong failure: {e} (exit {})", e.exit_code())),
        Ok(run) => Err(format!("launched with exit {}", run.exit_code)),
    }
}

fn connection_success() -> Outcome {
    let config = SimBenchConfig { connection_type: ConnectionType::FunctionToFunction, pairs: 10, ..SimBenchConfig::default() };
    let r = sim::ttfb(&config, 100);
    ensure!(r.failures.is_empty(), "{} failures, first: {:?}", r.failures.len(), r.failures.first());
    ensure!(r.samples.len() == 1000, "{} connections completed", r.samples.len());
    Ok("1000/1000 function-to-function connections".into())
}

/// Critical-path segment kinds of one TTFB rep, and the measured TTFB.
fn one_rep(t: ConnectionType, d: Duration) -> (Vec<SegmentKind>, Duration) {
    let config = SimBenchConfig { connection_type: t, delay: d, record_trace: true, ..SimBenchConfig::default() };
    let w = Workload::Ttfb { reps: 1 };
    let mut s = build(&config, 1, 1, w, w);
    s.overlay.fabric.clear_trace();
    let pid = s.clients[0];
    s.overlay.fabric.run_while_pending(Duration::from_secs(60), |f| f.process::<SimClient>(pid).unwrap().done());
    let mut kinds: Vec<SegmentKind> = s.overlay.fabric.trace().iter().map(|r| r.kind).collect();
    kinds.sort();
    (kinds, s.client(0).ttfb.first().copied().unwrap_or_default())
}

fn establishment_overhead() -> Outcome {
    use SegmentKind::*;
    let mut notes = Vec::new();
    for d in [Duration::from_micros(100), Duration::from_micros(250), Duration::from_millis(1)] {
        let (native_kinds, native) = one_rep(ConnectionType::VmToVmNative, d);
        for t in [ConnectionType::VmToVm, ConnectionType::FunctionToFunction] {
            let (kinds, broker) = one_rep(t, d);
            ensure!(broker == native + 2 * d, "{t} at d={d:?}: broker {broker:?} vs native {native:?}");
            ensure!(native == 3 * d, "native {native:?} != 3d");
            ensure!(native_kinds == vec![Syn, SynAck, Data], "native segments {native_kinds:?}");
            ensure!(kinds == vec![Syn, SynAck, Data, Data, Data, Punch], "{t} segments {kinds:?}");
        }
        notes.push(format!("d={}us: {}us vs {}us", d.as_micros(), native.as_micros() + 2 * d.as_micros(), native.as_micros()));
    }
    Ok(format!("broker = native + 2d exactly ({}); +2 control frames +1 punch", notes.join("; ")))
}

fn fabric_transparency() -> Result<u64, String> {
    let config = SimBenchConfig {
        connection_type: ConnectionType::FunctionToFunction,
        pairs: 4,
        record_trace: true,
        ..SimBenchConfig::default()
    };
    let w = stream_workload(Duration::from_millis(50), Duration::from_millis(10), true, 64 * 1024);
    let mut s = build(&config, 4, 4, w, w);
    let agents: BTreeSet<Endpoint> = (0..8)
        .flat_map(|i| {
            [
                Endpoint::new(s.overlay.external_ip(i), CONTROL_PORT).unwrap(),
                Endpoint::new(s.overlay.host_ip(i), CONTROL_PORT).unwrap(),
            ]
        })
        .collect();
    s.run();
    let f = &s.overlay.fabric;
    let app_bytes: u64 = f
        .trace()
        .iter()
        .filter(|r| r.kind == SegmentKind::Data && r.dst.port() == APP_PORT)
        .map(|r| r.len as u64)
        .sum();
    ensure!(app_bytes > 0, "no application data moved");
    let stream_start = f
        .trace()
        .iter()
        .find(|r| r.kind == SegmentKind::Data && r.dst.port() == APP_PORT)
        .map(|r| r.sent)
        .unwrap();
    let late = data_to(f, &agents).filter(|r| r.sent >= stream_start).count();
    ensure!(late == 0, "{late} DATA segments to agents during the stream");
    let setup = data_to(f, &agents).filter(|r| r.sent >= s.clients_started).count();
    ensure!(setup == 8, "{setup} control frames for 4 setups, want 8");
    ensure!(unsolicited_deliveries(f).is_empty(), "unsolicited inbound delivery");
    Ok(app_bytes)
}

fn data_plane_transparency() -> Outcome {
    let app_bytes = fabric_transparency()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ov = LoopbackOverlay::start(2, dir.path(), Duration::from_secs(10)).map_err(|e| e.to_string())?;
    // Alternate the paths so drift in machine load hits both equally.
    let rounds = 5;
    let slice = Duration::from_secs(2);
    let (mut native, mut broker) = (0u64, 0u64);
    for _ in 0..rounds {
        for brokered in [false, true] {
            let (_, bytes) = lb::throughput(&ov, brokered, slice, Duration::from_secs(1), Direction::Forward)
                .map_err(|e| e.to_string())?;
            if brokered {
                broker += bytes;
            } else {
                native += bytes;
            }
        }
    }
    let secs = slice.as_secs_f64() * rounds as f64;
    let (n, b) = (native as f64 * 8.0 / secs / 1e6, broker as f64 * 8.0 / secs / 1e6);
    let ratio = b / n;
    ensure!((ratio - 1.0).abs() <= 0.05, "loopback broker {b:.0} Mbit/s vs native {n:.0} Mbit/s (ratio {ratio:.3})");
    Ok(format!(
        "fabric: 0 stream DATA to agents ({app_bytes} app bytes direct); loopback {secs:.0}s each: broker {b:.0} vs native {n:.0} Mbit/s (ratio {ratio:.3})"
    ))
}

fn negative_nat() -> Outcome {
    let config = SimBenchConfig {
        connection_type: ConnectionType::VmToFunction,
        policy: NatPolicy::symmetric(),
        ..SimBenchConfig::default()
    };
    let reps = 20;
    let w = Workload::Ttfb { reps };
    let mut s = build(&config, 1, 1, w, w);
    let pid = s.clients[0];
    let bound = s.clients_started + reps as u32 * (config.connect_timeout + 10 * config.delay);
    let done = s.overlay.fabric.run_while_pending(bound, |f| f.process::<SimClient>(pid).unwrap().done());
    ensure!(done, "client still waiting at {bound:?}");
    let c = s.client(0);
    ensure!(c.ttfb.is_empty(), "{} connections succeeded", c.ttfb.len());
    let timed_out = c.failures.iter().filter(|f| *f == "connection timed out").count();
    ensure!(timed_out == reps, "{timed_out}/{reps} TimedOut: {:?}", c.failures);
    let per = (s.overlay.fabric.now() - s.clients_started) / reps as u32;
    Ok(format!("{reps}/{reps} TimedOut, {per:?} per attempt (timeout {:?})", config.connect_timeout))
}

fn barrier_exactness() -> Outcome {
    for k in [1usize, 5, 16] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut ov = SimOverlay::functions(OverlayConfig::default(), 24);
        ov.start_all();
        let agent = ov.nodes[0].agent.unwrap();
        let out = dir.path().join("seen");
        let cmd = vec!["/bin/sh".into(), "-c".into(), format!("cp \"$BOXER_PEERS_FILE\" '{}'", out.display())];
        let mut spec = LaunchSpec::new(ov.seed_endpoint, cmd, dir.path().join("state"));
        spec.barrier_n = Some(k);
        let run = launch_on_fabric(&mut ov.fabric, agent, &spec, Duration::from_secs(30)).map_err(|e| e.to_string())?;
        ensure!(run.exit_code == 0, "k={k}: command exited {}", run.exit_code);
        let me = ov.agent(0).id().unwrap().0.to_string();
        let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
        let ids: Vec<&str> = text.lines().filter_map(|l| l.split(' ').next()).collect();
        let workers = ids.iter().filter(|id| **id != "0").count();
        ensure!(ids.contains(&"0"), "k={k}: seed missing");
        ensure!(!ids.contains(&me.as_str()), "k={k}: self listed");
        ensure!(workers == k - 1, "k={k}: {workers} worker peers");
    }
    Ok("k=1,5,16: k-1 worker peers plus the seed".into())
}

/// Everything the protocol does, on one fabric: mixed placements,
/// staggered joins, a rejected duplicate, brokered and native traffic,
/// refusals and streams.
fn full_suite_trace(rng_seed: u64) -> String {
    let config = OverlayConfig { fabric: FabricConfig { rng_seed, ..FabricConfig::default() }, ..OverlayConfig::default() };
    let placements = [Placement::Function, Placement::Vm, Placement::Function, Placement::Vm, Placement::Function];
    let mut ov = SimOverlay::new(config, &placements);
    let twin = ov.add_colocated(0);
    for i in 0..placements.len() {
        ov.start(i);
        let t = ov.fabric.now() + Duration::from_micros(37 * i as u64);
        ov.fabric.run_until(t);
    }
    ov.start(twin);
    ov.drain();
    let mut trace = ov.fabric.trace_json();
    for t in [ConnectionType::FunctionToFunction, ConnectionType::VmToVmNative, ConnectionType::VmToFunction] {
        let c = SimBenchConfig { connection_type: t, rng_seed, record_trace: true, pairs: 2, ..SimBenchConfig::default() };
        let w = Workload::PingPong { msg_size: 512, rounds: 4, reps: 3 };
        let mut s = build(&c, 2, 2, w, w);
        s.run();
        trace.push_str(&s.overlay.fabric.trace_json());
        let w = stream_workload(Duration::from_millis(20), Duration::from_millis(5), false, 32 * 1024);
        let mut s = build(&c, 2, 2, w, w);
        s.run();
        trace.push_str(&s.overlay.fabric.trace_json());
    }
    let c = SimBenchConfig { policy: NatPolicy::symmetric(), rng_seed, record_trace: true, ..SimBenchConfig::default() };
    let w = Workload::Ttfb { reps: 2 };
    let mut s = build(&c, 1, 1, w, w);
    s.run();
    trace.push_str(&s.overlay.fabric.trace_json());
    trace
}

fn determinism() -> Outcome {
    let a = full_suite_trace(42);
    let b = full_suite_trace(42);
    ensure!(!a.is_empty(), "empty trace");
    ensure!(a == b, "traces differ");
    let c = full_suite_trace(43);
    ensure!(a != c, "rng_seed has no effect on the trace");
    Ok(format!("{} trace lines, {} bytes, identical across runs", a.lines().count(), a.len()))
}

fn codec() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 10_000, failure_persistence: None, ..Config::default() });
    runner
        .run(&arb_message(), |m| {
            let bytes = encode(&m);
            let (back, used) = decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back, m);
            prop_assert_eq!(used, bytes.len());
            Ok(())
        })
        .map_err(|e| format!("round trip: {e}"))?;
    let mut runner = TestRunner::new(Config { cases: 10_000, failure_persistence: None, ..Config::default() });
    let fuzz = (arb_message(), any::<usize>(), prop::collection::vec(any::<u8>(), 0..64), any::<u8>());
    runner
        .run(&fuzz, |(m, cut, junk, tag)| {
            let bytes = encode(&m);
            let cut = cut % bytes.len();
            let truncated = matches!(decode(&bytes[..cut]), Err(DecodeError::TruncatedFrame { .. }));
            prop_assert!(truncated);
            let _ = decode(&junk);
            let mut r = FrameReader::new();
            r.push(&junk);
            while let Ok(Some(_)) = r.next_frame() {}
            let mut odd = bytes.clone();
            odd[4] = tag;
            let _ = decode(&odd);
            Ok(())
        })
        .map_err(|e| format!("fuzz: {e}"))?;
    Ok("10000 round trips, 10000 truncation/garbage/tag fuzz cases, no panic".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("join-correctness", join_correctness),
        ("duplicate-rejection", duplicate_rejection),
        ("connection-success", connection_success),
        ("establishment-overhead", establishment_overhead),
        ("data-plane-transparency", data_plane_transparency),
        ("negative-nat", negative_nat),
        ("barrier-exactness", barrier_exactness),
        ("determinism", determinism),
        ("codec", codec),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
