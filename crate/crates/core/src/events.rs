//! Progress events for scans and agent sessions.
//!
//! Each scan or session publishes into its own stream. A stream keeps its
//! full history so late subscribers see everything from the start. Every
//! subscriber has a bounded queue; when it overflows, the oldest queued
//! `PixelMeasured` is dropped. State-bearing events are never dropped, so a
//! slow consumer may miss pixels but never a transition.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    IterationStarted,
    CodeProposed,
    AwaitingApproval,
    Executed,
    Feedback,
    PixelMeasured,
    ScanFinished,
    SessionTerminal,
}

impl EventKind {
    pub fn is_terminal(&self) -> bool {
        matches!(self, EventKind::ScanFinished | EventKind::SessionTerminal)
    }

    pub fn is_droppable(&self) -> bool {
        *self == EventKind::PixelMeasured
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub stream: String,
    pub kind: EventKind,
    pub payload: Value,
}

/// Destination for events from a single scan or session.
pub trait EventSink: Send + Sync {
    fn emit(&self, kind: EventKind, payload: Value);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _: EventKind, _: Value) {}
}

#[derive(Debug)]
struct Queue {
    items: Mutex<QueueState>,
    ready: Condvar,
    capacity: usize,
}

#[derive(Debug, Default)]
struct QueueState {
    events: VecDeque<Event>,
    dropped: u64,
    closed: bool,
}

impl Queue {
    fn push(&self, ev: Event) {
        let mut st = self.items.lock().unwrap();
        if st.events.len() >= self.capacity {
            if let Some(i) = st.events.iter().position(|e| e.kind.is_droppable()) {
                st.events.remove(i);
                st.dropped += 1;
            }
        }
        if ev.kind.is_terminal() {
            st.closed = true;
        }
        st.events.push_back(ev);
        self.ready.notify_all();
    }
}

#[derive(Debug)]
pub enum Recv {
    Event(Event),
    Timeout,
    /// The stream reached its terminal event and everything was delivered.
    Closed,
}

#[derive(Debug)]
pub struct Subscription {
    queue: Arc<Queue>,
}

impl Subscription {
    pub fn recv_timeout(&self, timeout: Duration) -> Recv {
        let st = self.queue.items.lock().unwrap();
        let (mut st, _) = self
            .queue
            .ready
            .wait_timeout_while(st, timeout, |s| s.events.is_empty() && !s.closed)
            .unwrap();
        match st.events.pop_front() {
            Some(e) => Recv::Event(e),
            None if st.closed => Recv::Closed,
            None => Recv::Timeout,
        }
    }

    /// Number of pixel events thinned out of this subscription so far.
    pub fn dropped(&self) -> u64 {
        self.queue.items.lock().unwrap().dropped
    }
}

#[derive(Debug, Default)]
struct Stream {
    history: Vec<Event>,
    subscribers: Vec<Arc<Queue>>,
}

#[derive(Debug, Default)]
pub struct EventHub {
    streams: Mutex<HashMap<String, Stream>>,
    capacity: usize,
}

impl EventHub {
    pub fn new() -> Arc<Self> {
        Self::with_capacity(DEFAULT_QUEUE_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Arc<Self> {
        Arc::new(Self { streams: Mutex::new(HashMap::new()), capacity: capacity.max(1) })
    }

    pub fn publish(&self, stream: &str, kind: EventKind, payload: Value) -> u64 {
        let mut streams = self.streams.lock().unwrap();
        let s = streams.entry(stream.to_string()).or_default();
        let seq = s.history.len() as u64 + 1;
        let ev = Event { seq, stream: stream.to_string(), kind, payload };
        for q in &s.subscribers {
            q.push(ev.clone());
        }
        s.history.push(ev);
        seq
    }

    /// Subscribes to `stream`, replaying history with `seq > since`.
    pub fn subscribe(&self, stream: &str, since: u64) -> Subscription {
        let queue = Arc::new(Queue {
            items: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
            capacity: self.capacity,
        });
        let mut streams = self.streams.lock().unwrap();
        let s = streams.entry(stream.to_string()).or_default();
        for ev in s.history.iter().filter(|e| e.seq > since) {
            queue.push(ev.clone());
        }
        if s.history.last().is_some_and(|e| e.kind.is_terminal()) {
            queue.items.lock().unwrap().closed = true;
        } else {
            s.subscribers.push(queue.clone());
        }
        Subscription { queue }
    }

    pub fn history(&self, stream: &str) -> Vec<Event> {
        self.streams.lock().unwrap().get(stream).map(|s| s.history.clone()).unwrap_or_default()
    }

    pub fn has_stream(&self, stream: &str) -> bool {
        self.streams.lock().unwrap().contains_key(stream)
    }

    pub fn sink(self: &Arc<Self>, stream: &str) -> StreamSink {
        StreamSink { hub: self.clone(), stream: stream.to_string() }
    }
}

/// [`EventSink`] bound to one stream of a hub.
#[derive(Debug, Clone)]
pub struct StreamSink {
    hub: Arc<EventHub>,
    stream: String,
}

impl EventSink for StreamSink {
    fn emit(&self, kind: EventKind, payload: Value) {
        self.hub.publish(&self.stream, kind, payload);
    }
}
