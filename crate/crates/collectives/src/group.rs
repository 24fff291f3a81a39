//! Process group and its collectives.

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::ops::Range;
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::{Duration, Instant};

use crate::coordinator::{hello_payload, parse_missing, serve_barriers, CoordinatorReport};
use crate::error::CommError;
use crate::frame::{bytes_to_f32s, f32s_to_bytes, Frame, Opcode};
use crate::link::{recv_frame, spawn_reader, ChannelSink, FrameSink, Incoming, TcpSink};

#[derive(Clone, Copy, Debug)]
pub struct GroupOptions {
    /// Upper bound on any single blocking receive, and on rendezvous.
    pub timeout: Duration,
}

impl Default for GroupOptions {
    fn default() -> Self {
        Self {
            timeout: crate::DEFAULT_TIMEOUT,
        }
    }
}

/// Cumulative traffic and time spent inside collectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CommStats {
    /// Frames this rank sent to its ring successor.
    pub ring_frames: u64,
    pub ring_payload_bytes: u64,
    pub ring_header_bytes: u64,
    pub allreduce_calls: u64,
    pub broadcast_calls: u64,
    pub barrier_calls: u64,
    /// Wall time spent inside collective calls, including waiting on peers.
    pub comm_time: Duration,
}

/// A member of a world of `world_size` ranks connected in a ring, plus a
/// control link to the coordinator.
pub struct ProcessGroup {
    rank: usize,
    world_size: usize,
    next: Option<Box<dyn FrameSink>>,
    prev: Option<Receiver<Incoming>>,
    coord_tx: Box<dyn FrameSink>,
    coord_rx: Receiver<Incoming>,
    timeout: Duration,
    seq: u32,
    stats: CommStats,
    finished: bool,
}

/// `n` elements split into `parts` chunks of `ceil(n / parts)`; trailing
/// chunks are shorter (possibly empty).
pub fn chunk_range(n: usize, parts: usize, i: usize) -> Range<usize> {
    let c = n.div_ceil(parts);
    (i * c).min(n)..((i + 1) * c).min(n)
}

impl ProcessGroup {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn stats(&self) -> CommStats {
        let mut s = self.stats;
        if let Some(next) = &self.next {
            let c = next.counters();
            s.ring_frames = c.frames();
            s.ring_payload_bytes = c.payload_bytes();
            s.ring_header_bytes = c.header_bytes();
        }
        s
    }

    fn next_tag(&mut self) -> u32 {
        self.seq = self.seq.wrapping_add(1);
        self.seq
    }

    fn send_next(&self, f: Frame) -> Result<(), CommError> {
        self.next.as_ref().expect("ring link for world > 1").send(f)
    }

    fn recv_prev(
        &self,
        op: Opcode,
        tag: u32,
        chunk: u32,
        len: usize,
    ) -> Result<Vec<f32>, CommError> {
        let rx = self.prev.as_ref().expect("ring link for world > 1");
        let f = recv_frame(rx, self.timeout, "ring predecessor")?;
        if f.opcode != op || f.tag != tag || f.chunk_index != chunk {
            return Err(CommError::Protocol(format!(
                "rank {} expected {op:?} tag {tag} chunk {chunk}, got {:?} tag {} chunk {}",
                self.rank, f.opcode, f.tag, f.chunk_index
            )));
        }
        if f.payload.len() != len * 4 {
            return Err(CommError::Protocol(format!(
                "rank {}: {op:?} chunk {chunk} carries {} bytes, expected {} (buffer lengths differ across ranks)",
                self.rank,
                f.payload.len(),
                len * 4
            )));
        }
        bytes_to_f32s(&f.payload)
    }

    fn timed<R>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<R, CommError>,
    ) -> Result<R, CommError> {
        let t0 = Instant::now();
        let r = f(self);
        self.stats.comm_time += t0.elapsed();
        r
    }

    /// Ring AllReduce (sum). `world − 1` reduce-scatter steps, then
    /// `world − 1` all-gather steps. In reduce-scatter step `s`, rank `r`
    /// sends chunk `(r − s) mod W` and adds the incoming chunk
    /// `(r − s − 1) mod W` into its buffer; afterwards it owns the full sum
    /// of chunk `(r + 1) mod W`.
    pub fn allreduce_sum(&mut self, buf: &mut [f32]) -> Result<(), CommError> {
        self.stats.allreduce_calls += 1;
        if self.world_size == 1 {
            return Ok(());
        }
        let tag = self.next_tag();
        self.timed(|pg| {
            let (w, r, n) = (pg.world_size, pg.rank, buf.len());
            for s in 0..w - 1 {
                let send = (r + w - s) % w;
                let recv = (r + 2 * w - s - 1) % w;
                pg.send_next(Frame::floats(
                    Opcode::ReduceChunk,
                    tag,
                    send as u32,
                    &buf[chunk_range(n, w, send)],
                ))?;
                let range = chunk_range(n, w, recv);
                let incoming = pg.recv_prev(Opcode::ReduceChunk, tag, recv as u32, range.len())?;
                for (dst, v) in buf[range].iter_mut().zip(incoming) {
                    *dst += v;
                }
            }
            for s in 0..w - 1 {
                let send = (r + 1 + w - s) % w;
                let recv = (r + w - s) % w;
                pg.send_next(Frame::floats(
                    Opcode::GatherChunk,
                    tag,
                    send as u32,
                    &buf[chunk_range(n, w, send)],
                ))?;
                let range = chunk_range(n, w, recv);
                let incoming = pg.recv_prev(Opcode::GatherChunk, tag, recv as u32, range.len())?;
                buf[range].copy_from_slice(&incoming);
            }
            Ok(())
        })
    }

    /// [`allreduce_sum`](Self::allreduce_sum) followed by division by the world size.
    pub fn allreduce_average(&mut self, buf: &mut [f32]) -> Result<(), CommError> {
        self.allreduce_sum(buf)?;
        let w = self.world_size as f32;
        if self.world_size > 1 {
            buf.iter_mut().for_each(|v| *v /= w);
        }
        Ok(())
    }

    /// Copies `root`'s buffer to every rank by forwarding it around the ring.
    pub fn broadcast(&mut self, buf: &mut [f32], root: usize) -> Result<(), CommError> {
        if root >= self.world_size {
            return Err(CommError::Protocol(format!(
                "broadcast root {root} outside world {}",
                self.world_size
            )));
        }
        self.stats.broadcast_calls += 1;
        if self.world_size == 1 {
            return Ok(());
        }
        let tag = self.next_tag();
        self.timed(|pg| {
            let w = pg.world_size;
            if pg.rank == root {
                pg.send_next(Frame::new(
                    Opcode::Bcast,
                    tag,
                    root as u32,
                    f32s_to_bytes(buf),
                ))?;
            } else {
                let data = pg.recv_prev(Opcode::Bcast, tag, root as u32, buf.len())?;
                buf.copy_from_slice(&data);
                if (pg.rank + 1) % w != root {
                    pg.send_next(Frame::new(
                        Opcode::Bcast,
                        tag,
                        root as u32,
                        f32s_to_bytes(buf),
                    ))?;
                }
            }
            Ok(())
        })
    }

    /// Returns only after every rank has entered the barrier.
    pub fn barrier(&mut self) -> Result<(), CommError> {
        self.stats.barrier_calls += 1;
        if self.world_size == 1 {
            return Ok(());
        }
        let tag = self.next_tag();
        self.timed(|pg| {
            pg.coord_tx
                .send(Frame::control(Opcode::BarrierArrive, tag))?;
            // the coordinator enforces the barrier timeout; this is a backstop
            let f = recv_frame(
                &pg.coord_rx,
                pg.timeout + Duration::from_secs(5),
                "coordinator",
            )?;
            match f.opcode {
                Opcode::BarrierRelease if f.tag == tag && f.payload.is_empty() => Ok(()),
                Opcode::BarrierRelease if f.tag == tag => Err(CommError::Deadlock {
                    missing: parse_missing(&f.payload),
                }),
                Opcode::Shutdown => Err(CommError::Transport(format!(
                    "coordinator shut down: {}",
                    String::from_utf8_lossy(&f.payload)
                ))),
                other => Err(CommError::Protocol(format!(
                    "expected BARRIER_RELEASE tag {tag}, got {other:?} tag {}",
                    f.tag
                ))),
            }
        })
    }

    /// Tells the coordinator this rank is done. Dropping the group without
    /// calling this looks like a crash to the coordinator.
    pub fn finish(mut self) -> Result<CommStats, CommError> {
        self.coord_tx.send(Frame::control(Opcode::Shutdown, 0))?;
        self.finished = true;
        Ok(self.stats())
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

/// Joins the coordinator at `coordinator` and wires up the ring.
/// Ranks are assigned in connection order.
pub fn rendezvous(
    coordinator: &str,
    expected_world: Option<usize>,
    opts: GroupOptions,
) -> Result<ProcessGroup, CommError> {
    let deadline = Instant::now() + opts.timeout;
    let coord_addr: SocketAddr = coordinator
        .to_socket_addrs()
        .map_err(|e| {
            CommError::Rendezvous(format!("bad coordinator address {coordinator:?}: {e}"))
        })?
        .next()
        .ok_or_else(|| CommError::Rendezvous(format!("{coordinator:?} resolves to nothing")))?;
    let coord = connect_retry(coord_addr, deadline)?;
    let my_ip = coord.local_addr()?.ip();
    let listener = TcpListener::bind(SocketAddr::new(my_ip, 0))?;
    let listen_addr = listener.local_addr()?.to_string();

    let sink = TcpSink::new(coord.try_clone()?)?;
    sink.send(Frame::new(
        Opcode::Hello,
        0,
        0,
        hello_payload(std::process::id(), &listen_addr),
    ))?;

    let left = deadline.saturating_duration_since(Instant::now()) + Duration::from_secs(5);
    coord.set_read_timeout(Some(left))?;
    let assign = Frame::read_from(&mut BufReader::new(&coord))
        .map_err(|e| CommError::Rendezvous(format!("waiting for rank assignment: {e}")))?
        .ok_or_else(|| CommError::Rendezvous("coordinator closed the connection".into()))?;
    coord.set_read_timeout(None)?;
    match assign.opcode {
        Opcode::RankAssign => {}
        Opcode::Shutdown => {
            return Err(CommError::Rendezvous(format!(
                "rejected by coordinator: {}",
                String::from_utf8_lossy(&assign.payload)
            )))
        }
        other => {
            return Err(CommError::Rendezvous(format!(
                "expected RANK_ASSIGN, got {other:?}"
            )))
        }
    }
    let rank = assign.tag as usize;
    let world = assign.chunk_index as usize;
    if let Some(w) = expected_world {
        if w != world {
            return Err(CommError::Rendezvous(format!(
                "expected a world of {w}, coordinator formed {world}"
            )));
        }
    }
    let next_addr: SocketAddr = String::from_utf8_lossy(&assign.payload)
        .parse()
        .map_err(|e| CommError::Rendezvous(format!("bad successor address: {e}")))?;

    let (coord_in_tx, coord_rx) = mpsc::channel();
    spawn_reader(coord, coord_in_tx, |m| m)?;

    let (next, prev) = if world > 1 {
        let deadline = Instant::now() + opts.timeout;
        let out = connect_retry(next_addr, deadline)?;
        let next = TcpSink::new(out)?;
        next.send(Frame::control(Opcode::Hello, rank as u32))?;
        let incoming = accept_until(&listener, deadline)?;
        let hello = Frame::read_from(&mut &incoming)?
            .ok_or_else(|| CommError::Rendezvous("predecessor closed before HELLO".into()))?;
        let want = (rank + world - 1) % world;
        if hello.opcode != Opcode::Hello || hello.tag as usize != want {
            return Err(CommError::Rendezvous(format!(
                "rank {rank} expected HELLO from rank {want}, got {:?} from {}",
                hello.opcode, hello.tag
            )));
        }
        let (tx, rx) = mpsc::channel();
        spawn_reader(incoming, tx, |m| m)?;
        (Some(Box::new(next) as Box<dyn FrameSink>), Some(rx))
    } else {
        (None, None)
    };

    Ok(ProcessGroup {
        rank,
        world_size: world,
        next,
        prev,
        coord_tx: Box::new(sink),
        coord_rx,
        timeout: opts.timeout,
        seq: 0,
        stats: CommStats::default(),
        finished: false,
    })
}

fn connect_retry(addr: SocketAddr, deadline: Instant) -> Result<TcpStream, CommError> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(1)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                tracing::trace!(%addr, error = %e, "connect retry");
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => {
                return Err(CommError::Rendezvous(format!(
                    "could not reach {addr}: {e}"
                )))
            }
        }
    }
}

fn accept_until(listener: &TcpListener, deadline: Instant) -> Result<TcpStream, CommError> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(CommError::Rendezvous(
                        "ring predecessor never connected".into(),
                    ));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// An in-process world: `world_size` groups connected by channels, with a
/// coordinator thread. Same contract as the TCP transport.
pub struct LocalWorld {
    pub groups: Vec<ProcessGroup>,
    pub coordinator: thread::JoinHandle<CoordinatorReport>,
}

pub fn local_world(world_size: usize, opts: GroupOptions) -> Result<LocalWorld, CommError> {
    if world_size == 0 {
        return Err(CommError::Rendezvous(
            "world size must be at least 1".into(),
        ));
    }
    let (coord_tx, inbox) = mpsc::channel::<(usize, Incoming)>();
    let mut to_workers: Vec<Box<dyn FrameSink>> = Vec::with_capacity(world_size);
    let mut worker_rx = Vec::with_capacity(world_size);
    for _ in 0..world_size {
        let (tx, rx) = mpsc::channel::<Incoming>();
        to_workers.push(Box::new(ChannelSink::new(tx, |m| m)));
        worker_rx.push(rx);
    }
    let mut ring_tx = Vec::with_capacity(world_size);
    let mut ring_rx = Vec::with_capacity(world_size);
    for _ in 0..world_size {
        let (tx, rx) = mpsc::channel::<Incoming>();
        ring_tx.push(Some(tx));
        ring_rx.push(Some(rx));
    }
    let mut groups = Vec::with_capacity(world_size);
    for (rank, coord_rx) in worker_rx.into_iter().enumerate() {
        let (next, prev) = if world_size > 1 {
            // rank r sends into channel r+1, which rank r+1 reads as `prev`
            let into_next = ring_tx[(rank + 1) % world_size]
                .take()
                .expect("one sender per channel");
            let from_prev = ring_rx[rank].take().expect("one receiver per channel");
            (
                Some(Box::new(ChannelSink::new(into_next, |m| m)) as Box<dyn FrameSink>),
                Some(from_prev),
            )
        } else {
            (None, None)
        };
        let tx = coord_tx.clone();
        groups.push(ProcessGroup {
            rank,
            world_size,
            next,
            prev,
            coord_tx: Box::new(ChannelSink::new(tx, move |m| (rank, m))),
            coord_rx,
            timeout: opts.timeout,
            seq: 0,
            stats: CommStats::default(),
            finished: false,
        });
    }
    drop(coord_tx);
    let barrier_timeout = opts.timeout;
    let coordinator = thread::Builder::new()
        .name("local-coordinator".into())
        .spawn(move || {
            let mut report = CoordinatorReport {
                pids: vec![std::process::id(); world_size],
                ..Default::default()
            };
            serve_barriers(inbox, to_workers, barrier_timeout, &mut report);
            report
        })?;
    Ok(LocalWorld {
        groups,
        coordinator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_chunking_leaves_the_tail_short() {
        let sizes: Vec<usize> = (0..4).map(|i| chunk_range(7, 4, i).len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 1]);
        let sizes: Vec<usize> = (0..8).map(|i| chunk_range(1, 8, i).len()).collect();
        assert_eq!(sizes, vec![1, 0, 0, 0, 0, 0, 0, 0]);
        let covered: usize = (0..3).map(|i| chunk_range(1_000_000, 3, i).len()).sum();
        assert_eq!(covered, 1_000_000);
    }
}
