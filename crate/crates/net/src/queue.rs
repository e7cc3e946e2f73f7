use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

/// Single-element mailbox: a newer value replaces an unconsumed older one.
#[derive(Debug, Default)]
pub struct LatestSlot<T> {
    inner: Mutex<SlotInner<T>>,
}

#[derive(Debug)]
struct SlotInner<T> {
    value: Option<T>,
    written: u64,
    overwritten: u64,
}

impl<T> Default for SlotInner<T> {
    fn default() -> Self {
        Self {
            value: None,
            written: 0,
            overwritten: 0,
        }
    }
}

impl<T> LatestSlot<T> {
    pub fn new() -> Self {
        Self {
            inner: Mutex::new(SlotInner::default()),
        }
    }

    pub fn put(&self, v: T) {
        let mut g = self.inner.lock().unwrap();
        if g.value.replace(v).is_some() {
            g.overwritten += 1;
        }
        g.written += 1;
    }

    pub fn take(&self) -> Option<T> {
        self.inner.lock().unwrap().value.take()
    }

    /// `(written, overwritten before being taken)`.
    pub fn counts(&self) -> (u64, u64) {
        let g = self.inner.lock().unwrap();
        (g.written, g.overwritten)
    }
}

/// Bounded outbound frame queue; pushing into a full queue drops the oldest
/// frame.
#[derive(Debug)]
pub struct Outbox {
    inner: Mutex<OutboxInner>,
    ready: Condvar,
    capacity: usize,
}

#[derive(Debug, Default)]
struct OutboxInner {
    queue: VecDeque<Vec<u8>>,
    closed: bool,
    dropped: u64,
    max_depth: usize,
}

#[derive(Debug, PartialEq, Eq)]
pub enum Pop {
    Frame(Vec<u8>),
    Empty,
    /// Closed and fully drained.
    Closed,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            inner: Mutex::new(OutboxInner::default()),
            ready: Condvar::new(),
            capacity,
        }
    }

    /// Queues a frame; ignored once closed.
    pub fn push(&self, frame: Vec<u8>) {
        let mut g = self.inner.lock().unwrap();
        if g.closed {
            return;
        }
        if g.queue.len() == self.capacity {
            g.queue.pop_front();
            g.dropped += 1;
        }
        g.queue.push_back(frame);
        g.max_depth = g.max_depth.max(g.queue.len());
        drop(g);
        self.ready.notify_one();
    }

    pub fn pop(&self, timeout: Duration) -> Pop {
        let g = self.inner.lock().unwrap();
        let (mut g, _) = self
            .ready
            .wait_timeout_while(g, timeout, |g| g.queue.is_empty() && !g.closed)
            .unwrap();
        match g.queue.pop_front() {
            Some(f) => Pop::Frame(f),
            None if g.closed => Pop::Closed,
            None => Pop::Empty,
        }
    }

    /// Stops accepting frames; queued frames are still delivered.
    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `(dropped, max depth seen)`.
    pub fn counts(&self) -> (u64, usize) {
        let g = self.inner.lock().unwrap();
        (g.dropped, g.max_depth)
    }
}
