//! Real-socket driver for [`Process`] implementations.
//!
//! One event-loop thread owns the process and all stream handles. Blocking
//! work (accepting, connecting, reading) happens on helper threads that
//! report back over a channel, so the process sees the same event sequence
//! shape as on the fabric.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use socket2::{Domain, Protocol, Socket, Type};

use crate::proto::Endpoint;
use crate::transport::{ConnId, ConnectError, NetEvent, NetIo, Process, TransportError};

const READ_CHUNK: usize = 64 * 1024;

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    /// Address this host binds and reports as its own.
    pub ip: Ipv4Addr,
    pub connect_timeout: Duration,
}

impl RuntimeConfig {
    pub fn new(ip: Ipv4Addr) -> Self {
        RuntimeConfig { ip, connect_timeout: Duration::from_secs(3) }
    }
}

/// A TCP socket with address (and optionally port) sharing enabled.
pub fn shared_socket(shared: bool) -> io::Result<Socket> {
    let s = Socket::new(Domain::IPV4, Type::STREAM, Some(Protocol::TCP))?;
    s.set_reuse_address(true)?;
    if shared {
        s.set_reuse_port(true)?;
    }
    Ok(s)
}

enum Stream {
    Tcp(TcpStream),
    Unix(UnixStream),
}

impl Stream {
    fn try_clone(&self) -> io::Result<Stream> {
        Ok(match self {
            Stream::Tcp(s) => Stream::Tcp(s.try_clone()?),
            Stream::Unix(s) => Stream::Unix(s.try_clone()?),
        })
    }

    fn write_all(&mut self, bytes: &[u8]) -> io::Result<()> {
        match self {
            Stream::Tcp(s) => s.write_all(bytes),
            Stream::Unix(s) => s.write_all(bytes),
        }
    }

    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Tcp(s) => s.read(buf),
            Stream::Unix(s) => s.read(buf),
        }
    }

    fn shutdown(&self) {
        let _ = match self {
            Stream::Tcp(s) => s.shutdown(Shutdown::Both),
            Stream::Unix(s) => s.shutdown(Shutdown::Both),
        };
    }
}

enum Input {
    Accepted { stream: TcpStream, local: Endpoint, peer: Endpoint },
    LocalAccepted { stream: UnixStream, path: String },
    Connected { conn: u64, stream: TcpStream },
    ConnectFailed { conn: u64, error: ConnectError },
    Data { conn: u64, bytes: Vec<u8> },
    Closed { conn: u64 },
    Shutdown,
}

struct ListenerCtl {
    stop: Arc<AtomicBool>,
    wake: SocketAddr,
}

struct LocalListenerCtl {
    stop: Arc<AtomicBool>,
}

struct SocketIo {
    config: RuntimeConfig,
    start: Instant,
    tx: Sender<Input>,
    conns: HashMap<u64, Stream>,
    listeners: HashMap<u16, ListenerCtl>,
    local_listeners: HashMap<String, LocalListenerCtl>,
    timers: BinaryHeap<Reverse<(Instant, u64, u64)>>,
    timer_seq: u64,
    next_conn: u64,
    pending: VecDeque<NetEvent>,
}

impl SocketIo {
    fn alloc(&mut self) -> u64 {
        self.next_conn += 1;
        self.next_conn
    }

    fn register(&mut self, conn: u64, stream: Stream) {
        match stream.try_clone() {
            Ok(mut reader) => {
                let tx = self.tx.clone();
                thread::spawn(move || {
                    let mut buf = vec![0u8; READ_CHUNK];
                    loop {
                        match reader.read(&mut buf) {
                            Ok(0) | Err(_) => {
                                let _ = tx.send(Input::Closed { conn });
                                return;
                            }
                            Ok(n) => {
                                if tx.send(Input::Data { conn, bytes: buf[..n].to_vec() }).is_err() {
                                    return;
                                }
                            }
                        }
                    }
                });
                self.conns.insert(conn, stream);
            }
            Err(e) => {
                log::warn!("socket: cannot clone stream: {e}");
                self.pending.push_back(NetEvent::Closed { conn: ConnId(conn) });
            }
        }
    }

    fn resolve(&self, ep: Endpoint) -> Endpoint {
        if ep.is_unspecified() {
            ep.with_ip(self.config.ip)
        } else {
            ep
        }
    }

    fn bound_socket(&self, local: Endpoint) -> Result<Socket, TransportError> {
        let s = shared_socket(true).map_err(|e| TransportError::from_io(local, &e))?;
        s.bind(&SocketAddr::from(local).into()).map_err(|e| TransportError::from_io(local, &e))?;
        Ok(s)
    }

    fn shutdown_all(&mut self) {
        for (_, ctl) in self.listeners.drain() {
            ctl.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect_timeout(&ctl.wake, Duration::from_millis(200));
        }
        for (path, ctl) in self.local_listeners.drain() {
            ctl.stop.store(true, Ordering::SeqCst);
            let _ = UnixStream::connect(&path);
            let _ = std::fs::remove_file(&path);
        }
        for (_, s) in self.conns.drain() {
            s.shutdown();
        }
    }
}

impl NetIo for SocketIo {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn local_ip(&self) -> Ipv4Addr {
        self.config.ip
    }

    fn listen(&mut self, ip: Ipv4Addr, port: u16, shared: bool) -> Result<Endpoint, TransportError> {
        let probe = Endpoint::new(ip, port.max(1)).expect("nonzero");
        let err = |e: io::Error| TransportError::from_io(probe, &e);
        let s = shared_socket(shared).map_err(err)?;
        s.bind(&SocketAddr::from((ip, port)).into()).map_err(err)?;
        s.listen(1024).map_err(err)?;
        let listener: TcpListener = s.into();
        let bound = listener.local_addr().map_err(err)?;
        let local = Endpoint::try_from(bound).map_err(|e| TransportError::Io(e.to_string()))?;
        let wake = SocketAddr::from((if ip.is_unspecified() { Ipv4Addr::LOCALHOST } else { ip }, local.port()));
        let stop = Arc::new(AtomicBool::new(false));
        let tx = self.tx.clone();
        let flag = stop.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    return;
                }
                let Ok(stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let (Ok(l), Ok(p)) = (stream.local_addr(), stream.peer_addr()) else { continue };
                let (Ok(local), Ok(peer)) = (Endpoint::try_from(l), Endpoint::try_from(p)) else { continue };
                if tx.send(Input::Accepted { stream, local, peer }).is_err() {
                    return;
                }
            }
        });
        self.listeners.insert(local.port(), ListenerCtl { stop, wake });
        Ok(self.resolve(local))
    }

    fn unlisten(&mut self, local: Endpoint) {
        if let Some(ctl) = self.listeners.remove(&local.port()) {
            ctl.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect_timeout(&ctl.wake, Duration::from_millis(200));
        }
    }

    fn listen_local(&mut self, path: &str) -> Result<(), TransportError> {
        if Path::new(path).exists() {
            if UnixStream::connect(path).is_ok() {
                return Err(TransportError::LocalPathInUse(path.to_string()));
            }
            let _ = std::fs::remove_file(path);
        }
        let listener = UnixListener::bind(path).map_err(|e| TransportError::Io(format!("{path}: {e}")))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let tx = self.tx.clone();
        let owned = path.to_string();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    return;
                }
                let Ok(stream) = stream else { continue };
                if tx.send(Input::LocalAccepted { stream, path: owned.clone() }).is_err() {
                    return;
                }
            }
        });
        self.local_listeners.insert(path.to_string(), LocalListenerCtl { stop });
        Ok(())
    }

    fn bind_ephemeral(&mut self) -> Result<Endpoint, TransportError> {
        let l = TcpListener::bind((self.config.ip, 0)).map_err(|e| TransportError::Io(e.to_string()))?;
        let addr = l.local_addr().map_err(|e| TransportError::Io(e.to_string()))?;
        Endpoint::try_from(addr).map_err(|e| TransportError::Io(e.to_string()))
    }

    fn connect(&mut self, local: Option<Endpoint>, remote: Endpoint) -> ConnId {
        let conn = self.alloc();
        let socket = match local {
            Some(ep) => self.bound_socket(self.resolve(ep)),
            None => Socket::new(Domain::IPV4, Type::STREAM, Some(Protocol::TCP))
                .map_err(|e| TransportError::Io(e.to_string()))
                .and_then(|s| {
                    s.bind(&SocketAddr::from((self.config.ip, 0)).into())
                        .map_err(|e| TransportError::Io(e.to_string()))?;
                    Ok(s)
                }),
        };
        let socket = match socket {
            Ok(s) => s,
            Err(e) => {
                log::debug!("socket: connect bind failed: {e}");
                self.pending.push_back(NetEvent::ConnectFailed { conn: ConnId(conn), error: ConnectError::AddrInUse });
                return ConnId(conn);
            }
        };
        let tx = self.tx.clone();
        let timeout = self.config.connect_timeout;
        thread::spawn(move || {
            let input = match socket.connect_timeout(&SocketAddr::from(remote).into(), timeout) {
                Ok(()) => {
                    let stream: TcpStream = socket.into();
                    let _ = stream.set_nodelay(true);
                    Input::Connected { conn, stream }
                }
                Err(e) => Input::ConnectFailed { conn, error: ConnectError::from_io(&e) },
            };
            let _ = tx.send(input);
        });
        ConnId(conn)
    }

    fn connect_local(&mut self, path: &str) -> ConnId {
        let conn = self.alloc();
        match UnixStream::connect(path) {
            Ok(s) => {
                self.register(conn, Stream::Unix(s));
                self.pending.push_back(NetEvent::Connected { conn: ConnId(conn) });
            }
            Err(e) => {
                self.pending.push_back(NetEvent::ConnectFailed { conn: ConnId(conn), error: ConnectError::from_io(&e) })
            }
        }
        ConnId(conn)
    }

    fn punch(&mut self, local: Endpoint, remote: Endpoint) -> Result<(), TransportError> {
        let s = self.bound_socket(self.resolve(local))?;
        s.set_nonblocking(true).map_err(|e| TransportError::Io(e.to_string()))?;
        // A non-blocking connect reports "in progress" once the SYN is out;
        // dropping the socket then abandons the attempt.
        if let Err(e) = s.connect(&SocketAddr::from(remote).into()) {
            log::trace!("socket: punch toward {remote}: {e}");
        }
        Ok(())
    }

    fn send(&mut self, conn: ConnId, bytes: &[u8]) {
        let Some(s) = self.conns.get_mut(&conn.0) else {
            log::debug!("socket: send on unknown {conn}");
            return;
        };
        if let Err(e) = s.write_all(bytes) {
            log::debug!("socket: write on {conn} failed: {e}");
            if let Some(s) = self.conns.remove(&conn.0) {
                s.shutdown();
            }
            self.pending.push_back(NetEvent::Closed { conn });
        }
    }

    fn close(&mut self, conn: ConnId) {
        if let Some(s) = self.conns.remove(&conn.0) {
            s.shutdown();
        }
    }

    fn set_timer(&mut self, after: Duration, token: u64) {
        self.timer_seq += 1;
        self.timers.push(Reverse((Instant::now() + after, self.timer_seq, token)));
    }
}

/// A process running on its own event-loop thread.
pub struct RuntimeHandle {
    tx: Sender<Input>,
    thread: Option<JoinHandle<Box<dyn Process + Send>>>,
}

impl RuntimeHandle {
    /// Stops the loop, closes every socket and hands the process back.
    pub fn shutdown(mut self) -> Box<dyn Process + Send> {
        let _ = self.tx.send(Input::Shutdown);
        self.thread.take().expect("joined once").join().expect("event loop panicked")
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }
}

impl Drop for RuntimeHandle {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.tx.send(Input::Shutdown);
            let _ = t.join();
        }
    }
}

/// Starts `process` on a new event-loop thread.
pub fn spawn(config: RuntimeConfig, process: Box<dyn Process + Send>) -> RuntimeHandle {
    let (tx, rx) = mpsc::channel();
    let io = SocketIo {
        config,
        start: Instant::now(),
        tx: tx.clone(),
        conns: HashMap::new(),
        listeners: HashMap::new(),
        local_listeners: HashMap::new(),
        timers: BinaryHeap::new(),
        timer_seq: 0,
        next_conn: 0,
        pending: VecDeque::new(),
    };
    let thread = thread::Builder::new()
        .name("boxer-loop".into())
        .spawn(move || run_loop(io, rx, process))
        .expect("spawn event loop");
    RuntimeHandle { tx, thread: Some(thread) }
}

fn run_loop(mut io: SocketIo, rx: Receiver<Input>, mut process: Box<dyn Process + Send>) -> Box<dyn Process + Send> {
    process.on_event(&mut io, NetEvent::Started);
    loop {
        while let Some(ev) = io.pending.pop_front() {
            process.on_event(&mut io, ev);
        }
        let now = Instant::now();
        while let Some(Reverse((at, _, token))) = io.timers.peek().copied() {
            if at > now {
                break;
            }
            io.timers.pop();
            process.on_event(&mut io, NetEvent::Timer { token });
        }
        if !io.pending.is_empty() {
            continue;
        }
        let input = match io.timers.peek() {
            Some(Reverse((at, _, _))) => match rx.recv_timeout(at.saturating_duration_since(Instant::now())) {
                Ok(input) => input,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            },
            None => match rx.recv() {
                Ok(input) => input,
                Err(_) => break,
            },
        };
        let event = match input {
            Input::Shutdown => break,
            Input::Accepted { stream, local, peer } => {
                let conn = io.alloc();
                io.register(conn, Stream::Tcp(stream));
                NetEvent::Accepted { conn: ConnId(conn), local, peer }
            }
            Input::LocalAccepted { stream, path } => {
                let conn = io.alloc();
                io.register(conn, Stream::Unix(stream));
                NetEvent::LocalAccepted { conn: ConnId(conn), path }
            }
            Input::Connected { conn, stream } => {
                io.register(conn, Stream::Tcp(stream));
                NetEvent::Connected { conn: ConnId(conn) }
            }
            Input::ConnectFailed { conn, error } => NetEvent::ConnectFailed { conn: ConnId(conn), error },
            Input::Data { conn, bytes } => {
                if !io.conns.contains_key(&conn) {
                    continue;
                }
                NetEvent::Data { conn: ConnId(conn), bytes }
            }
            Input::Closed { conn } => {
                if io.conns.remove(&conn).is_none() {
                    continue;
                }
                NetEvent::Closed { conn: ConnId(conn) }
            }
        };
        process.on_event(&mut io, event);
    }
    io.shutdown_all();
    process
}
