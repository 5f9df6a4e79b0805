//! Two-node cooperation: each node publishes its indication to the other
//! over TCP and shows GAP only when both agree on GAP and both inputs are
//! fresh.
//!
//! Wire format, big-endian, fixed 40 bytes:
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 2     | magic `0x43 0x47`              |
//! | 1     | version                        |
//! | 16    | node id                        |
//! | 8     | seq (u64)                      |
//! | 1     | state (0 = GAP, 1 = TRAFFIC)   |
//! | 4     | margin (f32)                   |
//! | 8     | timestamp, ms since epoch      |

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use thiserror::Error;

use crate::detector::Indication;

pub const MAGIC: [u8; 2] = [0x43, 0x47];
pub const WIRE_VERSION: u8 = 1;
pub const MESSAGE_LEN: usize = 40;
pub const DEFAULT_STALENESS_LIMIT: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("protocol version {got}, expected {WIRE_VERSION}")]
    VersionMismatch { got: u8 },
    #[error("bad state byte {0}")]
    BadState(u8),
}

#[derive(Debug, Error)]
pub enum PeerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("peer speaks an incompatible protocol: {0}")]
    Handshake(WireError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerMessage {
    pub node_id: [u8; 16],
    pub seq: u64,
    pub state: Indication,
    pub margin: f32,
    pub timestamp_ms: u64,
}

impl PeerMessage {
    pub fn encode(&self) -> [u8; MESSAGE_LEN] {
        self.encode_with_version(WIRE_VERSION)
    }

    /// Encodes with an arbitrary version byte (for compatibility testing).
    pub fn encode_with_version(&self, version: u8) -> [u8; MESSAGE_LEN] {
        let mut b = [0u8; MESSAGE_LEN];
        b[0..2].copy_from_slice(&MAGIC);
        b[2] = version;
        b[3..19].copy_from_slice(&self.node_id);
        b[19..27].copy_from_slice(&self.seq.to_be_bytes());
        b[27] = match self.state {
            Indication::Gap => 0,
            Indication::Traffic => 1,
        };
        b[28..32].copy_from_slice(&self.margin.to_be_bytes());
        b[32..40].copy_from_slice(&self.timestamp_ms.to_be_bytes());
        b
    }

    pub fn decode(b: &[u8; MESSAGE_LEN]) -> Result<Self, WireError> {
        if b[0..2] != MAGIC {
            return Err(WireError::BadMagic([b[0], b[1]]));
        }
        if b[2] != WIRE_VERSION {
            return Err(WireError::VersionMismatch { got: b[2] });
        }
        let state = match b[27] {
            0 => Indication::Gap,
            1 => Indication::Traffic,
            other => return Err(WireError::BadState(other)),
        };
        let mut node_id = [0u8; 16];
        node_id.copy_from_slice(&b[3..19]);
        Ok(PeerMessage {
            node_id,
            seq: u64::from_be_bytes(b[19..27].try_into().unwrap()),
            state,
            margin: f32::from_be_bytes(b[28..32].try_into().unwrap()),
            timestamp_ms: u64::from_be_bytes(b[32..40].try_into().unwrap()),
        })
    }
}

/// One input to the merge: an indication and how old it is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub state: Indication,
    /// Seconds since the observation was made.
    pub age: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedIndication {
    pub state: Indication,
    /// Age of the older input; infinite when the remote is absent.
    pub staleness: f64,
}

/// GAP only when both inputs are GAP and the older one is younger than `limit`.
pub fn merge(local: Observation, remote: Option<Observation>, limit: f64) -> MergedIndication {
    let Some(remote) = remote else {
        return MergedIndication {
            state: Indication::Traffic,
            staleness: f64::INFINITY,
        };
    };
    let staleness = local.age.max(remote.age);
    let gap = local.state == Indication::Gap && remote.state == Indication::Gap && staleness < limit;
    MergedIndication {
        state: if gap { Indication::Gap } else { Indication::Traffic },
        staleness,
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone)]
pub struct LinkConfig {
    pub node_id: [u8; 16],
    /// Heartbeat period.
    pub period: Duration,
    pub staleness_limit: f64,
    pub backoff_min: Duration,
    pub backoff_max: Duration,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            node_id: rand::random(),
            period: Duration::from_millis(200),
            staleness_limit: DEFAULT_STALENESS_LIMIT,
            backoff_min: Duration::from_millis(500),
            backoff_max: Duration::from_secs(8),
        }
    }
}

#[derive(Debug)]
pub enum LinkRole {
    Listen(TcpListener),
    Connect(SocketAddr),
}

impl LinkRole {
    pub fn listen(addr: &str) -> Result<Self, PeerError> {
        let l = TcpListener::bind(addr).map_err(|source| PeerError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        Ok(LinkRole::Listen(l))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkStatus {
    Connecting,
    Connected(SocketAddr),
    /// The link gave up; it will not reconnect.
    Failed(String),
    Stopped,
}

#[derive(Debug, Clone, Copy)]
struct LocalSnapshot {
    state: Indication,
    margin: f32,
    at: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RemoteSnapshot {
    pub node_id: [u8; 16],
    pub seq: u64,
    pub state: Indication,
    pub margin: f32,
    pub received: Instant,
}

#[derive(Debug, Default)]
struct Shared {
    local: Mutex<Option<LocalSnapshot>>,
    remote: Mutex<Option<RemoteSnapshot>>,
    status: Mutex<Option<LinkStatus>>,
    stop: AtomicBool,
    resets: AtomicU64,
}

/// Handle to a running link. Publishing never blocks on the network.
#[derive(Debug)]
pub struct PeerLink {
    shared: Arc<Shared>,
    wake: Sender<()>,
    limit: f64,
    thread: Option<JoinHandle<()>>,
}

impl PeerLink {
    pub fn spawn(role: LinkRole, cfg: LinkConfig) -> Result<Self, PeerError> {
        if let LinkRole::Listen(l) = &role {
            l.set_nonblocking(true)?;
        }
        let shared = Arc::new(Shared::default());
        *shared.status.lock().unwrap() = Some(LinkStatus::Connecting);
        let (wake, wake_rx) = mpsc::channel();
        let limit = cfg.staleness_limit;
        let s = Arc::clone(&shared);
        let thread = thread::Builder::new()
            .name("peer-link".into())
            .spawn(move || link_main(role, cfg, s, wake_rx))?;
        Ok(PeerLink {
            shared,
            wake,
            limit,
            thread: Some(thread),
        })
    }

    /// Records the local indication; a change is sent immediately.
    pub fn publish(&self, state: Indication, margin: f32) {
        let changed = {
            let mut l = self.shared.local.lock().unwrap();
            let changed = l.is_none_or(|p| p.state != state);
            *l = Some(LocalSnapshot {
                state,
                margin,
                at: Instant::now(),
            });
            changed
        };
        if changed {
            let _ = self.wake.send(());
        }
    }

    pub fn remote(&self) -> Option<RemoteSnapshot> {
        *self.shared.remote.lock().unwrap()
    }

    pub fn status(&self) -> LinkStatus {
        self.shared.status.lock().unwrap().clone().unwrap_or(LinkStatus::Stopped)
    }

    /// Connections dropped because of protocol violations.
    pub fn resets(&self) -> u64 {
        self.shared.resets.load(Ordering::Relaxed)
    }

    pub fn merged(&self) -> MergedIndication {
        let now = Instant::now();
        let local = self
            .shared
            .local
            .lock()
            .unwrap()
            .map(|l| Observation {
                state: l.state,
                age: (now - l.at).as_secs_f64(),
            })
            .unwrap_or(Observation {
                state: Indication::Traffic,
                age: f64::INFINITY,
            });
        let remote = self.remote().map(|r| Observation {
            state: r.state,
            age: (now - r.received).as_secs_f64(),
        });
        merge(local, remote, self.limit)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = self.wake.send(());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for PeerLink {
    fn drop(&mut self) {
        self.stop();
    }
}

fn set_status(s: &Shared, st: LinkStatus) {
    *s.status.lock().unwrap() = Some(st);
}

fn sleep_unless_stopped(s: &Shared, d: Duration) {
    let end = Instant::now() + d;
    while !s.stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= end {
            break;
        }
        thread::sleep((end - now).min(Duration::from_millis(20)));
    }
}

fn link_main(role: LinkRole, cfg: LinkConfig, s: Arc<Shared>, wake: Receiver<()>) {
    let mut backoff = cfg.backoff_min;
    let mut seq = 0u64;
    while !s.stop.load(Ordering::SeqCst) {
        set_status(&s, LinkStatus::Connecting);
        let stream = match &role {
            LinkRole::Listen(l) => match l.accept() {
                Ok((stream, _)) => stream,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    sleep_unless_stopped(&s, Duration::from_millis(20));
                    continue;
                }
                Err(e) => {
                    warn!("accept failed: {e}");
                    sleep_unless_stopped(&s, Duration::from_millis(100));
                    continue;
                }
            },
            LinkRole::Connect(addr) => match TcpStream::connect_timeout(addr, Duration::from_secs(2)) {
                Ok(stream) => stream,
                Err(e) => {
                    debug!("connect to {addr} failed: {e}; retrying in {backoff:?}");
                    sleep_unless_stopped(&s, backoff);
                    backoff = (backoff * 2).min(cfg.backoff_max);
                    continue;
                }
            },
        };
        let peer = stream.peer_addr().ok();
        info!("peer link up ({peer:?})");
        if let Some(p) = peer {
            set_status(&s, LinkStatus::Connected(p));
        }
        let outcome = run_connection(stream, &cfg, &s, &wake, &mut seq);
        *s.remote.lock().unwrap() = None;
        match outcome {
            Ok(()) => {
                info!("peer link down");
                backoff = cfg.backoff_min;
            }
            Err(PeerError::Handshake(e)) => {
                warn!("peer link: {e}");
                if matches!(role, LinkRole::Connect(_)) {
                    set_status(&s, LinkStatus::Failed(e.to_string()));
                    return;
                }
            }
            Err(e) => {
                info!("peer link dropped: {e}");
            }
        }
        if matches!(role, LinkRole::Connect(_)) {
            sleep_unless_stopped(&s, backoff);
            backoff = (backoff * 2).min(cfg.backoff_max);
        }
    }
    set_status(&s, LinkStatus::Stopped);
}

enum ReaderEnd {
    Closed,
    Protocol(WireError),
    SeqRegression,
    Io(io::Error),
}

fn reader(mut stream: TcpStream, s: Arc<Shared>, done: Arc<AtomicBool>) -> ReaderEnd {
    let mut buf = [0u8; MESSAGE_LEN];
    let mut filled = 0;
    let mut last_seq: Option<u64> = None;
    loop {
        if s.stop.load(Ordering::SeqCst) || done.load(Ordering::SeqCst) {
            return ReaderEnd::Closed;
        }
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return ReaderEnd::Closed,
            Ok(n) => filled += n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => continue,
            Err(e) => return ReaderEnd::Io(e),
        }
        if filled < MESSAGE_LEN {
            continue;
        }
        filled = 0;
        let msg = match PeerMessage::decode(&buf) {
            Ok(m) => m,
            Err(e) => return ReaderEnd::Protocol(e),
        };
        if last_seq.is_some_and(|l| msg.seq <= l) {
            return ReaderEnd::SeqRegression;
        }
        last_seq = Some(msg.seq);
        *s.remote.lock().unwrap() = Some(RemoteSnapshot {
            node_id: msg.node_id,
            seq: msg.seq,
            state: msg.state,
            margin: msg.margin,
            received: Instant::now(),
        });
    }
}

fn run_connection(stream: TcpStream, cfg: &LinkConfig, s: &Arc<Shared>, wake: &Receiver<()>, seq: &mut u64) -> Result<(), PeerError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut writer = stream.try_clone()?;
    let done = Arc::new(AtomicBool::new(false));
    let reader_handle = {
        let s = Arc::clone(s);
        let done = Arc::clone(&done);
        let stream = stream.try_clone()?;
        thread::Builder::new().name("peer-reader".into()).spawn(move || {
            let end = reader(stream, s, Arc::clone(&done));
            done.store(true, Ordering::SeqCst);
            end
        })?
    };
    while wake.try_recv().is_ok() {}

    let result = loop {
        // a local indication nobody refreshed is not vouched for any more
        let snapshot = s.local.lock().unwrap().filter(|l| l.at.elapsed().as_secs_f64() < cfg.staleness_limit);
        *seq += 1;
        let msg = PeerMessage {
            node_id: cfg.node_id,
            seq: *seq,
            state: snapshot.map_or(Indication::Traffic, |l| l.state),
            margin: snapshot.map_or(f32::NAN, |l| l.margin),
            timestamp_ms: now_ms(),
        };
        if let Err(e) = writer.write_all(&msg.encode()) {
            break Err(PeerError::Io(e));
        }
        // wait for the next period, a local change, or the reader ending
        let deadline = Instant::now() + cfg.period;
        let mut stop = false;
        loop {
            if s.stop.load(Ordering::SeqCst) || done.load(Ordering::SeqCst) {
                stop = true;
                break;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            match wake.recv_timeout(left.min(Duration::from_millis(25))) {
                Ok(()) => break,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    stop = true;
                    break;
                }
            }
        }
        if stop {
            break Ok(());
        }
    };
    done.store(true, Ordering::SeqCst);
    let _ = stream.shutdown(std::net::Shutdown::Both);
    let end = reader_handle.join().unwrap_or(ReaderEnd::Closed);
    match end {
        ReaderEnd::Protocol(e @ WireError::VersionMismatch { .. }) => Err(PeerError::Handshake(e)),
        ReaderEnd::Protocol(e) => {
            s.resets.fetch_add(1, Ordering::Relaxed);
            Err(PeerError::Io(io::Error::new(ErrorKind::InvalidData, e.to_string())))
        }
        ReaderEnd::SeqRegression => {
            s.resets.fetch_add(1, Ordering::Relaxed);
            warn!("peer sequence number went backwards; resetting link");
            Err(PeerError::Io(io::Error::new(ErrorKind::InvalidData, "sequence regression")))
        }
        ReaderEnd::Io(e) => Err(PeerError::Io(e)),
        ReaderEnd::Closed => result,
    }
}
