use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tririg::pose::Pose;

use crate::codec::{encode, read_frame, DeviceSample, Hello, Probe, WireMessage};

/// Buffered inbound messages before the client starts dropping them.
const INBOX: usize = 4096;

/// Blocking TCP client. A reader thread demultiplexes pongs from the rest of
/// the stream.
pub struct Client {
    stream: TcpStream,
    inbox: Receiver<WireMessage>,
    pongs: Receiver<(Probe, Instant)>,
    dropped: Arc<AtomicU64>,
    epoch: Instant,
    next_seq: u64,
    reader: Option<JoinHandle<()>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub p50_us: u64,
    pub p99_us: u64,
    pub max_us: u64,
    /// Every pong echoed its ping and sequence numbers strictly increased.
    pub ordered: bool,
}

/// Nearest-rank percentile, `p` in [0, 100].
pub fn percentile<T: Copy + Ord>(values: &[T], p: f64) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

fn reader_loop(
    mut stream: TcpStream,
    inbox: SyncSender<WireMessage>,
    pongs: mpsc::Sender<(Probe, Instant)>,
    dropped: Arc<AtomicU64>,
) {
    let mut buf = Vec::new();
    while let Ok(Some(msg)) = read_frame(&mut stream, &mut buf) {
        match msg {
            WireMessage::Pong(p) => {
                let _ = pongs.send((p, Instant::now()));
            }
            other => match inbox.try_send(other) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => {
                    dropped.fetch_add(1, Ordering::Relaxed);
                }
                Err(TrySendError::Disconnected(_)) => break,
            },
        }
    }
}

impl Client {
    /// Connects and exchanges Hello. The server's reply (or its error) is
    /// returned.
    pub fn connect(addr: SocketAddr, hello: Hello) -> io::Result<(Client, WireMessage)> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let (tx, inbox) = mpsc::sync_channel(INBOX);
        let (ptx, pongs) = mpsc::channel();
        let dropped = Arc::new(AtomicU64::new(0));
        let r = stream.try_clone()?;
        let d = dropped.clone();
        let reader = thread::spawn(move || reader_loop(r, tx, ptx, d));
        let mut c = Client {
            stream,
            inbox,
            pongs,
            dropped,
            epoch: Instant::now(),
            next_seq: 0,
            reader: Some(reader),
        };
        c.send(&WireMessage::Hello(hello))?;
        let reply = c
            .recv_timeout(Duration::from_secs(5))
            .ok_or_else(|| io::Error::new(io::ErrorKind::TimedOut, "no reply to Hello"))?;
        Ok((c, reply))
    }

    pub fn send(&mut self, msg: &WireMessage) -> io::Result<()> {
        self.stream.write_all(&encode(msg))
    }

    /// Writes raw bytes, framed or not.
    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<WireMessage> {
        match self.inbox.recv_timeout(timeout) {
            Ok(m) => Some(m),
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => None,
        }
    }

    /// Everything received so far.
    pub fn drain(&self) -> Vec<WireMessage> {
        self.inbox.try_iter().collect()
    }

    /// Waits for the first message matching `pred`, discarding others.
    pub fn wait_for(&self, timeout: Duration, mut pred: impl FnMut(&WireMessage) -> bool) -> Option<WireMessage> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.checked_duration_since(Instant::now())?;
            let m = self.recv_timeout(left)?;
            if pred(&m) {
                return Some(m);
            }
        }
    }

    /// Inbound messages dropped because the caller did not drain them.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    fn now_us(&self) -> u64 {
        self.epoch.elapsed().as_micros() as u64
    }

    /// Sends one pose sample per device at time `timestamp_us`.
    pub fn send_poses(&mut self, poses: &[Pose; 3], triggers: [f64; 2], timestamp_us: u64) -> io::Result<()> {
        let trig = [0.0, triggers[0], triggers[1]];
        let samples = std::array::from_fn(|i| DeviceSample::from_pose(&poses[i], trig[i], timestamp_us));
        self.send(&WireMessage::PoseUpdate(samples))
    }

    /// Sends `n` pings `gap` apart, each awaited before the next.
    pub fn latency_probe(&mut self, n: usize, gap: Duration) -> io::Result<LatencyStats> {
        let mut rtts = Vec::with_capacity(n);
        let mut ordered = true;
        let mut last_seq = None;
        for _ in 0..n {
            let seq = self.next_seq;
            self.next_seq += 1;
            let sent_us = self.now_us();
            self.send(&WireMessage::Ping(Probe { seq, sent_us }))?;
            let (p, at) = self
                .pongs
                .recv_timeout(Duration::from_secs(2))
                .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "no pong"))?;
            ordered &= p.seq == seq && p.sent_us == sent_us && last_seq.is_none_or(|s| p.seq > s);
            last_seq = Some(p.seq);
            rtts.push((at - self.epoch).as_micros() as u64 - p.sent_us);
            if !gap.is_zero() {
                thread::sleep(gap);
            }
        }
        Ok(LatencyStats {
            samples: rtts.len(),
            p50_us: percentile(&rtts, 50.0).unwrap_or(0),
            p99_us: percentile(&rtts, 99.0).unwrap_or(0),
            max_us: rtts.iter().copied().max().unwrap_or(0),
            ordered,
        })
    }

    pub fn close(mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}
