//! Point-to-point frame transport: TCP streams or in-memory channels.
//!
//! Sends never block the caller. TCP sends go through a dedicated writer
//! thread so that every rank in a ring can send before it receives.

use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;

use crate::error::CommError;
use crate::frame::{Frame, HEADER_LEN};

/// Bytes and frames pushed through a sink.
#[derive(Debug, Default)]
pub struct Counters {
    frames: AtomicU64,
    payload_bytes: AtomicU64,
    header_bytes: AtomicU64,
}

impl Counters {
    fn record(&self, f: &Frame) {
        self.frames.fetch_add(1, Ordering::Relaxed);
        self.payload_bytes
            .fetch_add(f.payload.len() as u64, Ordering::Relaxed);
        self.header_bytes
            .fetch_add(HEADER_LEN as u64, Ordering::Relaxed);
    }

    pub fn frames(&self) -> u64 {
        self.frames.load(Ordering::Relaxed)
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_bytes.load(Ordering::Relaxed)
    }

    pub fn header_bytes(&self) -> u64 {
        self.header_bytes.load(Ordering::Relaxed)
    }
}

/// What a receiver sees: a frame, or the reason the stream ended.
pub type Incoming = Result<Frame, CommError>;

pub trait FrameSink: Send {
    fn send(&self, frame: Frame) -> Result<(), CommError>;
    fn counters(&self) -> &Counters;
}

/// Sink backed by a TCP stream and a writer thread.
pub struct TcpSink {
    tx: Option<Sender<Frame>>,
    dead: Arc<AtomicBool>,
    counters: Counters,
    writer: Option<thread::JoinHandle<()>>,
}

impl TcpSink {
    pub fn new(stream: TcpStream) -> Result<Self, CommError> {
        stream.set_nodelay(true)?;
        let writer = stream;
        let (tx, rx) = mpsc::channel::<Frame>();
        let dead = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&dead);
        let writer = thread::Builder::new()
            .name("frame-writer".into())
            .spawn(move || {
                let mut w = BufWriter::with_capacity(1 << 16, writer);
                while let Ok(frame) = rx.recv() {
                    let mut ok = frame.write_to(&mut w).is_ok();
                    // drain whatever is queued before flushing
                    while ok {
                        match rx.try_recv() {
                            Ok(f) => ok = f.write_to(&mut w).is_ok(),
                            Err(_) => break,
                        }
                    }
                    if !ok || w.flush().is_err() {
                        flag.store(true, Ordering::SeqCst);
                        return;
                    }
                }
                if w.flush().is_ok() {
                    let _ = w.get_ref().shutdown(Shutdown::Write);
                }
            })?;
        Ok(Self {
            tx: Some(tx),
            dead,
            counters: Counters::default(),
            writer: Some(writer),
        })
    }
}

impl FrameSink for TcpSink {
    fn send(&self, frame: Frame) -> Result<(), CommError> {
        if self.dead.load(Ordering::SeqCst) {
            return Err(CommError::Transport("peer connection is closed".into()));
        }
        self.counters.record(&frame);
        self.tx
            .as_ref()
            .expect("sender lives until drop")
            .send(frame)
            .map_err(|_| CommError::Transport("writer thread has exited".into()))
    }

    fn counters(&self) -> &Counters {
        &self.counters
    }
}

impl Drop for TcpSink {
    fn drop(&mut self) {
        // Closing the queue lets the writer drain, flush and half-close, so
        // frames sent just before exit are not lost.
        self.tx.take();
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
    }
}

/// Spawns a thread that decodes frames from `stream` and forwards them,
/// mapped through `wrap`, until EOF or error. The final message is always
/// an `Err` describing why the stream ended.
pub fn spawn_reader<M: Send + 'static>(
    stream: TcpStream,
    tx: Sender<M>,
    wrap: impl Fn(Incoming) -> M + Send + 'static,
) -> Result<(), CommError> {
    thread::Builder::new()
        .name("frame-reader".into())
        .spawn(move || {
            let mut r = BufReader::with_capacity(1 << 16, &stream);
            loop {
                match Frame::read_from(&mut r) {
                    Ok(Some(f)) => {
                        if tx.send(wrap(Ok(f))).is_err() {
                            break;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(wrap(Err(CommError::Transport(
                            "peer closed the connection".into(),
                        ))));
                        break;
                    }
                    Err(e) => {
                        let _ = tx.send(wrap(Err(e)));
                        break;
                    }
                }
            }
            let _ = stream.shutdown(Shutdown::Read);
        })?;
    Ok(())
}

/// In-memory sink: forwards frames into a channel, wrapped for the receiver.
pub struct ChannelSink<M: Send> {
    tx: Sender<M>,
    wrap: Box<dyn Fn(Incoming) -> M + Send>,
    counters: Counters,
}

impl<M: Send> ChannelSink<M> {
    pub fn new(tx: Sender<M>, wrap: impl Fn(Incoming) -> M + Send + 'static) -> Self {
        Self {
            tx,
            wrap: Box::new(wrap),
            counters: Counters::default(),
        }
    }
}

impl<M: Send> FrameSink for ChannelSink<M> {
    fn send(&self, frame: Frame) -> Result<(), CommError> {
        self.counters.record(&frame);
        self.tx
            .send((self.wrap)(Ok(frame)))
            .map_err(|_| CommError::Transport("peer channel is closed".into()))
    }

    fn counters(&self) -> &Counters {
        &self.counters
    }
}

impl<M: Send> Drop for ChannelSink<M> {
    fn drop(&mut self) {
        // Mirrors TCP EOF for receivers that share a channel with other senders.
        let _ = self.tx.send((self.wrap)(Err(CommError::Transport(
            "peer closed the connection".into(),
        ))));
    }
}

/// Unwraps a channel receive into a frame, mapping a vanished sender to a
/// transport error.
pub(crate) fn recv_frame(
    rx: &Receiver<Incoming>,
    timeout: std::time::Duration,
    what: &str,
) -> Result<Frame, CommError> {
    match rx.recv_timeout(timeout) {
        Ok(r) => r,
        Err(mpsc::RecvTimeoutError::Timeout) => Err(CommError::Timeout(format!(
            "no frame from {what} within {timeout:?}"
        ))),
        Err(mpsc::RecvTimeoutError::Disconnected) => {
            Err(CommError::Transport(format!("{what} disconnected")))
        }
    }
}
