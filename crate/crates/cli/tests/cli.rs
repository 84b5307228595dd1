use std::fs;
use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};

fn bin(name: &str) -> Command {
    let path = match name {
        "boxer" => env!("CARGO_BIN_EXE_boxer"),
        "boxer-seed" => env!("CARGO_BIN_EXE_boxer-seed"),
        "boxer-bench" => env!("CARGO_BIN_EXE_boxer-bench"),
        _ => unreachable!(),
    };
    let mut c = Command::new(path);
    c.env("RUST_LOG", "error");
    c
}

#[test]
fn sim_ttfb_table_and_raw_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ttfb.csv");
    let ecdf = dir.path().join("ecdf.csv");
    let status = bin("boxer-bench")
        .args(["ttfb", "--pairs", "2", "--reps", "3", "--delay", "250"])
        .args(["--type", "Function-to-Function", "--type", "VM-to-VM-native"])
        .arg("--out")
        .arg(&out)
        .arg("--ecdf")
        .arg(&ecdf)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
    let table = fs::read_to_string(&out).unwrap();
    assert_eq!(
        table,
        "connection_type,metric,mean,median,std,min,max\n\
         Function-to-Function,ttfb,1250,1250,0,1250,1250\n\
         VM-to-VM-native,ttfb,750,750,0,750,750\n"
    );
    let raw = fs::read_to_string(dir.path().join("ttfb.csv.raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 2 * 6);
    let ecdf = fs::read_to_string(&ecdf).unwrap();
    assert_eq!(ecdf.lines().count(), 1 + 6);
    assert_eq!(ecdf.lines().last(), Some("1250,1"));
}

#[test]
fn socket_bench_rejects_gateway_types() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin("boxer-bench")
        .args(["ttfb", "--transport", "socket", "--pairs", "1", "--reps", "1", "--type", "Function-to-Function"])
        .arg("--out")
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--transport sim"));
}

#[test]
fn sim_run_passes_exit_status_and_peers() {
    let dir = tempfile::tempdir().unwrap();
    let seen = dir.path().join("seen");
    let status = bin("boxer")
        .args(["run", "--transport", "sim", "-n", "3", "--state-dir"])
        .arg(dir.path().join("state"))
        .args(["--", "/bin/sh", "-c"])
        .arg(format!("cp \"$BOXER_PEERS_FILE\" {}; exit 9", seen.display()))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(9));
    let peers = fs::read_to_string(seen).unwrap();
    assert_eq!(peers.lines().count(), 3, "{peers}");
}

#[test]
fn run_without_command_is_a_usage_error() {
    let status = bin("boxer").args(["run", "--transport", "sim"]).stderr(Stdio::null()).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn seed_journals_socket_joins() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("seed.jsonl");
    let mut seed = bin("boxer-seed")
        .args(["--listen", "127.0.0.1:0", "--trace"])
        .arg(&trace)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(seed.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = line.trim().strip_prefix("listening on ").unwrap().to_string();

    let run = |ip: &str, code: u8| {
        let mut c = bin("boxer");
        c.args(["run", "-s", &endpoint, "-n", "2", "--deadline", "20", "--bind", ip, "--state-dir"])
            .arg(dir.path().join(ip))
            .args(["--", "/bin/sh", "-c", &format!("exit {code}")]);
        c.spawn().unwrap()
    };
    let mut a = run("127.0.0.61", 0);
    let mut b = run("127.0.0.62", 4);
    assert_eq!(a.wait().unwrap().code(), Some(0));
    assert_eq!(b.wait().unwrap().code(), Some(4));
    seed.kill().unwrap();
    seed.wait().unwrap();

    let events: Vec<serde_json::Value> =
        fs::read_to_string(&trace).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let joined: Vec<_> = events.iter().filter(|e| e["event"] == "joined").map(|e| e["id"].as_u64().unwrap()).collect();
    assert_eq!(joined.len(), 2);
    assert!(joined.contains(&1) && joined.contains(&2));
}
