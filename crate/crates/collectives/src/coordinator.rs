//! Rendezvous and barrier service.
//!
//! The coordinator assigns ranks in connection order, tells each worker the
//! address of its ring successor, then serves barriers until every worker
//! has shut down or disconnected.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tracing::{debug, warn};

use crate::error::CommError;
use crate::frame::{Frame, Opcode};
use crate::link::{spawn_reader, FrameSink, Incoming, TcpSink};

/// One entry of the coordinator's barrier log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BarrierEvent {
    Arrive { tag: u32, rank: usize },
    Release { tag: u32 },
    TimedOut { tag: u32, missing: Vec<usize> },
}

/// What happened to one worker by the time the coordinator stopped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WorkerExit {
    Clean,
    Disconnected(String),
}

#[derive(Clone, Debug, Default)]
pub struct CoordinatorReport {
    /// Process id each rank reported in its HELLO, indexed by rank.
    pub pids: Vec<u32>,
    pub barrier_log: Vec<BarrierEvent>,
    pub exits: BTreeMap<usize, WorkerExit>,
    pub rejected_connections: usize,
}

/// Encodes the HELLO payload a worker sends to the coordinator.
pub(crate) fn hello_payload(pid: u32, listen: &str) -> Vec<u8> {
    let mut p = pid.to_le_bytes().to_vec();
    p.extend_from_slice(listen.as_bytes());
    p
}

fn parse_hello(f: &Frame) -> Result<(u32, String), CommError> {
    if f.opcode != Opcode::Hello || f.payload.len() < 4 {
        return Err(CommError::Rendezvous(format!(
            "expected HELLO, got {:?}",
            f.opcode
        )));
    }
    let pid = u32::from_le_bytes([f.payload[0], f.payload[1], f.payload[2], f.payload[3]]);
    let addr = String::from_utf8(f.payload[4..].to_vec())
        .map_err(|_| CommError::Rendezvous("HELLO address is not UTF-8".into()))?;
    Ok((pid, addr))
}

pub(crate) fn missing_payload(missing: &[usize]) -> Vec<u8> {
    missing
        .iter()
        .flat_map(|&r| (r as u32).to_le_bytes())
        .collect()
}

pub(crate) fn parse_missing(payload: &[u8]) -> Vec<usize> {
    payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect()
}

/// The barrier service loop, shared by the TCP and in-process coordinators.
/// `inbox` carries (rank, frame-or-error); `sinks[rank]` reaches that rank.
pub(crate) fn serve_barriers(
    inbox: Receiver<(usize, Incoming)>,
    sinks: Vec<Box<dyn FrameSink>>,
    barrier_timeout: Duration,
    report: &mut CoordinatorReport,
) {
    let world = sinks.len();
    let mut live = vec![true; world];
    // tag -> (first arrival, arrived flags)
    let mut pending: BTreeMap<u32, (Instant, Vec<bool>)> = BTreeMap::new();
    let tick = Duration::from_millis(20).min(barrier_timeout);
    while live.iter().any(|&l| l) {
        match inbox.recv_timeout(tick) {
            Ok((rank, Ok(frame))) => match frame.opcode {
                Opcode::BarrierArrive => {
                    let tag = frame.tag;
                    report.barrier_log.push(BarrierEvent::Arrive { tag, rank });
                    let entry = pending
                        .entry(tag)
                        .or_insert_with(|| (Instant::now(), vec![false; world]));
                    entry.1[rank] = true;
                    if entry.1.iter().all(|&a| a) {
                        pending.remove(&tag);
                        report.barrier_log.push(BarrierEvent::Release { tag });
                        for s in &sinks {
                            let _ = s.send(Frame::control(Opcode::BarrierRelease, tag));
                        }
                    }
                }
                Opcode::Shutdown => {
                    live[rank] = false;
                    report.exits.insert(rank, WorkerExit::Clean);
                }
                other => warn!(rank, ?other, "coordinator ignoring unexpected frame"),
            },
            Ok((rank, Err(e))) => {
                if live[rank] {
                    debug!(rank, error = %e, "worker link closed");
                    live[rank] = false;
                    report
                        .exits
                        .insert(rank, WorkerExit::Disconnected(e.to_string()));
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        let now = Instant::now();
        let expired: Vec<u32> = pending
            .iter()
            .filter(|(_, (t0, _))| now.duration_since(*t0) >= barrier_timeout)
            .map(|(&tag, _)| tag)
            .collect();
        for tag in expired {
            let (_, arrived) = pending.remove(&tag).expect("expired tag is pending");
            let missing: Vec<usize> = (0..world).filter(|&r| !arrived[r]).collect();
            warn!(tag, ?missing, "barrier timed out");
            report.barrier_log.push(BarrierEvent::TimedOut {
                tag,
                missing: missing.clone(),
            });
            let payload = missing_payload(&missing);
            for (r, s) in sinks.iter().enumerate() {
                if arrived[r] {
                    let _ = s.send(Frame::new(Opcode::BarrierRelease, tag, 0, payload.clone()));
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CoordinatorOptions {
    /// How long to wait for all workers to connect.
    pub rendezvous_timeout: Duration,
    /// How long a barrier may wait for stragglers after its first arrival.
    pub barrier_timeout: Duration,
}

impl Default for CoordinatorOptions {
    fn default() -> Self {
        Self {
            rendezvous_timeout: crate::DEFAULT_TIMEOUT,
            barrier_timeout: crate::DEFAULT_TIMEOUT,
        }
    }
}

/// A coordinator running on a background thread.
pub struct Coordinator {
    addr: SocketAddr,
    pids: Arc<Mutex<Vec<u32>>>,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<Result<CoordinatorReport, CommError>>>,
}

impl Coordinator {
    /// Binds `bind` (use port 0 for an ephemeral port) and starts serving a
    /// world of `world_size` workers.
    pub fn start(
        bind: SocketAddr,
        world_size: usize,
        opts: CoordinatorOptions,
    ) -> Result<Self, CommError> {
        if world_size == 0 {
            return Err(CommError::Rendezvous(
                "world size must be at least 1".into(),
            ));
        }
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let pids = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let (p, s) = (Arc::clone(&pids), Arc::clone(&stop));
        let join = thread::Builder::new()
            .name("coordinator".into())
            .spawn(move || run_tcp(listener, world_size, opts, p, s))?;
        Ok(Self {
            addr,
            pids,
            stop,
            join: Some(join),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Process ids by rank, once rendezvous has completed (empty before).
    pub fn pids(&self) -> Vec<u32> {
        self.pids.lock().expect("pid table").clone()
    }

    pub fn is_finished(&self) -> bool {
        self.join.as_ref().is_none_or(|j| j.is_finished())
    }

    /// Waits for the service loop to end.
    pub fn join(mut self) -> Result<CoordinatorReport, CommError> {
        let h = self.join.take().expect("joined once");
        let r = h
            .join()
            .map_err(|_| CommError::Protocol("coordinator thread panicked".into()))?;
        self.stop.store(true, Ordering::SeqCst);
        r
    }
}

impl Drop for Coordinator {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn read_hello(stream: &TcpStream, deadline: Instant) -> Result<(u32, String), CommError> {
    let left = deadline
        .saturating_duration_since(Instant::now())
        .max(Duration::from_millis(1));
    stream.set_read_timeout(Some(left))?;
    let frame = Frame::read_from(&mut BufReader::new(stream))?
        .ok_or_else(|| CommError::Rendezvous("worker closed before HELLO".into()))?;
    stream.set_read_timeout(None)?;
    parse_hello(&frame)
}

fn reject(stream: TcpStream, why: &str) {
    if let Ok(sink) = TcpSink::new(stream) {
        let _ = sink.send(Frame::new(Opcode::Shutdown, 0, 0, why.as_bytes().to_vec()));
    }
}

fn run_tcp(
    listener: TcpListener,
    world: usize,
    opts: CoordinatorOptions,
    pid_table: Arc<Mutex<Vec<u32>>>,
    stop: Arc<AtomicBool>,
) -> Result<CoordinatorReport, CommError> {
    let deadline = Instant::now() + opts.rendezvous_timeout;
    listener.set_nonblocking(true)?;
    let mut joined: Vec<(TcpStream, u32, String)> = Vec::with_capacity(world);
    while joined.len() < world {
        if stop.load(Ordering::SeqCst) {
            return Err(CommError::Rendezvous("coordinator stopped".into()));
        }
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                match read_hello(&stream, deadline) {
                    Ok((pid, addr)) => {
                        debug!(%peer, pid, rank = joined.len(), "worker joined");
                        joined.push((stream, pid, addr));
                    }
                    Err(e) => warn!(%peer, error = %e, "dropping connection without HELLO"),
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let msg = format!(
                        "only {} of {world} workers connected before the timeout",
                        joined.len()
                    );
                    for (s, _, _) in joined {
                        reject(s, &msg);
                    }
                    return Err(CommError::Rendezvous(msg));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut report = CoordinatorReport {
        pids: joined.iter().map(|(_, pid, _)| *pid).collect(),
        ..Default::default()
    };
    *pid_table.lock().expect("pid table") = report.pids.clone();

    let (tx, inbox) = mpsc::channel::<(usize, Incoming)>();
    let mut sinks: Vec<Box<dyn FrameSink>> = Vec::with_capacity(world);
    let addrs: Vec<String> = joined.iter().map(|(_, _, a)| a.clone()).collect();
    for (rank, (stream, _, _)) in joined.into_iter().enumerate() {
        let reader = stream.try_clone()?;
        let sink = TcpSink::new(stream)?;
        let next = &addrs[(rank + 1) % world];
        sink.send(Frame::new(
            Opcode::RankAssign,
            rank as u32,
            world as u32,
            next.as_bytes().to_vec(),
        ))?;
        sinks.push(Box::new(sink));
        let tx = tx.clone();
        spawn_reader(reader, tx, move |m| (rank, m))?;
    }
    drop(tx);

    // Late joiners are turned away while the group is live.
    let rejected = Arc::new(Mutex::new(0usize));
    let rejecter = {
        let stop = Arc::clone(&stop);
        let rejected = Arc::clone(&rejected);
        thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((s, peer)) => {
                        warn!(%peer, "rejecting connection: group is full");
                        let _ = s.set_nonblocking(false);
                        reject(s, "group is full");
                        *rejected.lock().expect("counter") += 1;
                    }
                    Err(_) => thread::sleep(Duration::from_millis(10)),
                }
            }
        })
    };

    serve_barriers(inbox, sinks, opts.barrier_timeout, &mut report);
    stop.store(true, Ordering::SeqCst);
    let _ = rejecter.join();
    report.rejected_connections = *rejected.lock().expect("counter");
    Ok(report)
}
