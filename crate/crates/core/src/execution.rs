//! Launcher: join, optionally wait for a membership barrier, publish the
//! peer list and run the user's command.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::coordination::{JoinStatus, MembershipHandle, MembershipView, WaitError};
use crate::fabric::{Fabric, ProcId};
use crate::networking::{AgentConfig, NodeAgent};
use crate::proto::{Endpoint, MemberRecord, NodeId, RejectReason};
use crate::socket::{self, RuntimeConfig};

pub const ENV_NODE_ID: &str = "BOXER_NODE_ID";
pub const ENV_NODE_ADDR: &str = "BOXER_NODE_ADDR";
pub const ENV_PEERS_FILE: &str = "BOXER_PEERS_FILE";
pub const ENV_IPC: &str = crate::ipc::IPC_ENV;

/// Exit status of a launcher whose join was rejected.
pub const EXIT_REJECTED: i32 = 64;

#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub seed: Endpoint,
    /// Start the command once this many non-seed members have joined.
    pub barrier_n: Option<usize>,
    pub command: Vec<String>,
    pub env_extra: Vec<(String, String)>,
    pub workdir: Option<PathBuf>,
    /// Bound on join plus barrier wait.
    pub deadline: Option<Duration>,
    /// Interposition library to preload into the command.
    pub preload: Option<PathBuf>,
    /// Where the peers file and IPC socket live.
    pub state_dir: PathBuf,
}

impl LaunchSpec {
    pub fn new(seed: Endpoint, command: Vec<String>, state_dir: impl Into<PathBuf>) -> Self {
        LaunchSpec {
            seed,
            barrier_n: None,
            command,
            env_extra: Vec::new(),
            workdir: None,
            deadline: None,
            preload: None,
            state_dir: state_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<(), LaunchError> {
        if self.command.is_empty() {
            return Err(LaunchError::InvalidSpec("command must not be empty".into()));
        }
        if self.barrier_n == Some(0) {
            return Err(LaunchError::InvalidSpec("barrier count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn peers_path(&self) -> PathBuf {
        self.state_dir.join("peers")
    }

    pub fn ipc_path(&self) -> PathBuf {
        self.state_dir.join("ipc.sock")
    }
}

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("invalid launch spec: {0}")]
    InvalidSpec(String),
    #[error("join rejected by seed: {0}")]
    JoinRejected(RejectReason),
    #[error("could not join through the seed")]
    JoinFailed,
    #[error("barrier not reached before the deadline ({have} of {want} members)")]
    BarrierTimeout { have: usize, want: usize },
    #[error("cannot start command: {0}")]
    SpawnFailed(io::Error),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl LaunchError {
    /// Status the launcher process exits with.
    pub fn exit_code(&self) -> i32 {
        match self {
            LaunchError::InvalidSpec(_) => 2,
            LaunchError::JoinRejected(_) => EXIT_REJECTED,
            LaunchError::JoinFailed => 69,
            LaunchError::BarrierTimeout { .. } => 75,
            LaunchError::SpawnFailed(_) => 127,
            LaunchError::Io(_) => 74,
        }
    }
}

impl From<WaitError> for LaunchError {
    fn from(e: WaitError) -> Self {
        match e {
            WaitError::Rejected(r) => LaunchError::JoinRejected(r),
            WaitError::JoinFailed => LaunchError::JoinFailed,
            WaitError::Timeout { have, want } => LaunchError::BarrierTimeout { have, want },
        }
    }
}

/// Maps a child's status to a shell-style exit code (signals become
/// `128 + signo`).
pub fn exit_code(status: ExitStatus) -> i32 {
    match (status.code(), status.signal()) {
        (Some(code), _) => code,
        (None, Some(sig)) => 128 + sig,
        (None, None) => 1,
    }
}

/// Renders the peers file body: every member but `me`, by id.
pub fn render_peers(members: &[MemberRecord], me: NodeId) -> String {
    let sorted: BTreeMap<NodeId, Endpoint> =
        members.iter().filter(|m| m.id != me).map(|m| (m.id, m.external)).collect();
    sorted.iter().map(|(id, ep)| format!("{} {}\n", id.0, ep)).collect()
}

/// Atomically replaces `path` with the peer list.
pub fn write_peers_file(members: &[MemberRecord], me: NodeId, path: &Path) -> io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "peers path has no file name"))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(render_peers(members, me).as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// The members the command starts with: the barrier's first `n` workers
/// plus the seed, or the whole view without a barrier.
pub fn startup_members(view: &MembershipView, barrier: Option<usize>) -> Option<Vec<MemberRecord>> {
    match barrier {
        None => Some(view.records().to_vec()),
        Some(n) => {
            let mut members = view.first_members(n)?;
            members.extend(view.get(NodeId::SEED).copied());
            members.sort_by_key(|m| m.id);
            Some(members)
        }
    }
}

fn command_for(spec: &LaunchSpec, id: NodeId, external: Endpoint, ipc: &Path) -> Command {
    let mut cmd = Command::new(&spec.command[0]);
    cmd.args(&spec.command[1..])
        .env(ENV_NODE_ID, id.0.to_string())
        .env(ENV_NODE_ADDR, external.to_string())
        .env(ENV_PEERS_FILE, spec.peers_path())
        .env(ENV_IPC, ipc);
    if let Some(lib) = &spec.preload {
        cmd.env("LD_PRELOAD", lib);
    }
    for (k, v) in &spec.env_extra {
        cmd.env(k, v);
    }
    if let Some(dir) = &spec.workdir {
        cmd.current_dir(dir);
    }
    cmd
}

fn run_child(mut cmd: Command) -> Result<i32, LaunchError> {
    let status = cmd.spawn().map_err(LaunchError::SpawnFailed)?.wait()?;
    Ok(exit_code(status))
}

/// Joins over real sockets from `ip`, then runs the command. Returns the
/// command's exit code.
pub fn launch(spec: &LaunchSpec, ip: Ipv4Addr, control_port: u16) -> Result<i32, LaunchError> {
    spec.validate()?;
    fs::create_dir_all(&spec.state_dir)?;
    let ipc = spec.ipc_path();
    let deadline = spec.deadline.map(|d| Instant::now() + d);

    let handle = MembershipHandle::new();
    let mut config = AgentConfig::new(spec.seed);
    config.control_port = control_port;
    config.ipc_path = Some(ipc.to_string_lossy().into_owned());
    let agent = NodeAgent::with_handle(config, handle.clone());
    let runtime = socket::spawn(RuntimeConfig::new(ip), Box::new(agent));

    let (id, external) = handle.wait_joined(deadline)?;
    // Subscribe before snapshotting so no update slips between the two.
    let updates = handle.subscribe();
    let members = match spec.barrier_n {
        Some(n) => {
            handle.await_members(n, deadline)?;
            startup_members(&handle.view(), Some(n)).expect("barrier reached")
        }
        None => handle.view().records().to_vec(),
    };
    write_peers_file(&members, id, &spec.peers_path())?;
    log::info!("launch: {} starting {:?} with {} peers", id, spec.command, members.len().saturating_sub(1));

    let stop = Arc::new(AtomicBool::new(false));
    let refresher = spec.barrier_n.is_none().then(|| {
        let (handle, path, stop) = (handle.clone(), spec.peers_path(), stop.clone());
        thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match updates.recv_timeout(Duration::from_millis(100)) {
                    Ok(_) => {
                        let view = handle.view();
                        if let Err(e) = write_peers_file(view.records(), id, &path) {
                            log::warn!("launch: cannot refresh peers file: {e}");
                        }
                    }
                    Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {}
                    Err(_) => return,
                }
            }
        })
    });

    let result = run_child(command_for(spec, id, external, &ipc));
    stop.store(true, Ordering::SeqCst);
    if let Some(t) = refresher {
        let _ = t.join();
    }
    drop(runtime.shutdown());
    result
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimLaunch {
    /// Simulated time at which the command was started.
    pub started_at: Duration,
    pub members: Vec<MemberRecord>,
    pub exit_code: i32,
}

/// Drives the fabric until `agent` has joined and met the barrier, then
/// runs the command for real with the same environment contract. The IPC
/// path is exported but not served.
pub fn launch_on_fabric(
    fabric: &mut Fabric,
    agent: ProcId,
    spec: &LaunchSpec,
    deadline: Duration,
) -> Result<SimLaunch, LaunchError> {
    spec.validate()?;
    let handle = fabric.process::<NodeAgent>(agent).expect("agent process").handle().clone();
    let ready = |_: &Fabric| -> bool {
        match handle.status() {
            JoinStatus::Joined { .. } => handle.with_view(|v| startup_members(v, spec.barrier_n).is_some()),
            JoinStatus::Rejected(_) | JoinStatus::Failed => true,
            JoinStatus::Joining => false,
        }
    };
    fabric.run_while_pending(deadline, ready);
    let (id, external) = match handle.status() {
        JoinStatus::Joined { id, external } => (id, external),
        JoinStatus::Rejected(r) => return Err(LaunchError::JoinRejected(r)),
        JoinStatus::Failed => return Err(LaunchError::JoinFailed),
        JoinStatus::Joining => return Err(LaunchError::JoinFailed),
    };
    let members = handle.with_view(|v| startup_members(v, spec.barrier_n)).ok_or_else(|| {
        let have = handle.with_view(|v| v.worker_count());
        LaunchError::BarrierTimeout { have, want: spec.barrier_n.unwrap_or(1) }
    })?;
    let started_at = fabric.now();
    fs::create_dir_all(&spec.state_dir)?;
    write_peers_file(&members, id, &spec.peers_path())?;
    let exit_code = run_child(command_for(spec, id, external, &spec.ipc_path()))?;
    Ok(SimLaunch { started_at, members, exit_code })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u32, ep: &str) -> MemberRecord {
        MemberRecord { id: NodeId(id), external: ep.parse().unwrap() }
    }

    #[test]
    fn peers_exclude_self_sorted() {
        let members = [rec(2, "54.1.2.3:5000"), rec(0, "3.0.0.1:7077"), rec(1, "54.9.9.9:5000")];
        assert_eq!(render_peers(&members, NodeId(1)), "0 3.0.0.1:7077\n2 54.1.2.3:5000\n");
    }

    #[test]
    fn peers_file_created_even_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("peers");
        write_peers_file(&[rec(1, "54.0.0.1:5000")], NodeId(1), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1, "temp file left behind");
    }

    #[test]
    fn signals_map_above_128() {
        assert_eq!(exit_code(ExitStatus::from_raw(9)), 137);
        assert_eq!(exit_code(ExitStatus::from_raw(3 << 8)), 3);
    }

    #[test]
    fn spec_validation() {
        let seed: Endpoint = "3.0.0.1:7077".parse().unwrap();
        assert!(LaunchSpec::new(seed, vec![], "/tmp").validate().is_err());
        let mut s = LaunchSpec::new(seed, vec!["true".into()], "/tmp");
        s.barrier_n = Some(0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejection_exits_64() {
        assert_eq!(LaunchError::JoinRejected(RejectReason::DuplicateAddress).exit_code(), 64);
    }
}
