//! Sequential discrete-event kernel.
//!
//! Events are ordered by `(time_s, seq)` where `seq` is the insertion
//! counter, so runs with the same schedule replay identically. Randomness
//! comes from labelled streams derived from `(seed, label)`; adding a new
//! consumer never shifts the draws seen by existing ones.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::NodeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("cannot schedule at t={at} s, clock is already at {now} s")]
    SchedulingInPast { at: f64, now: f64 },
    #[error("event time {0} is not finite")]
    NonFiniteTime(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    TransmitStart,
    Delivered,
    ComputeDone,
    Decision,
    AttackInjected,
    DefenseTriggered,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "TransmitStart" => EventKind::TransmitStart,
            "Delivered" => EventKind::Delivered,
            "ComputeDone" => EventKind::ComputeDone,
            "Decision" => EventKind::Decision,
            "AttackInjected" => EventKind::AttackInjected,
            "DefenseTriggered" => EventKind::DefenseTriggered,
            other => return Err(format!("unknown event kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time_s: f64,
    pub seq: u64,
    pub kind: EventKind,
    pub node: NodeId,
    pub detail: String,
}

impl Event {
    /// One `time_s,seq,kind,node,detail` record.
    pub fn to_record(&self) -> String {
        format!(
            "{:?},{},{},{},{}",
            self.time_s, self.seq, self.kind, self.node, self.detail
        )
    }

    pub fn parse_record(line: &str) -> Result<Self, String> {
        let mut parts = line.splitn(5, ',');
        let mut next = |name: &str| parts.next().ok_or_else(|| format!("missing {name}"));
        let time_s = next("time_s")?.parse::<f64>().map_err(|e| e.to_string())?;
        let seq = next("seq")?.parse::<u64>().map_err(|e| e.to_string())?;
        let kind = next("kind")?.parse()?;
        let node = next("node")?.parse().map_err(|e: std::num::ParseIntError| e.to_string())?;
        let detail = next("detail")?.to_string();
        Ok(Event {
            time_s,
            seq,
            kind,
            node,
            detail,
        })
    }

    /// Looks up `key` in a `key=value|key=value` detail string.
    pub fn detail_field(&self, key: &str) -> Option<&str> {
        self.detail.split('|').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k == key).then_some(v)
        })
    }
}

/// Append-only log of dispatched events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub seed: u64,
    events: Vec<Event>,
}

impl Trace {
    pub fn new(seed: u64) -> Self {
        Trace {
            seed,
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, event: Event) {
        if let Some(last) = self.events.last() {
            assert!(
                event.time_s >= last.time_s,
                "trace time went backwards: {} < {}",
                event.time_s,
                last.time_s
            );
        }
        self.events.push(event);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for ev in &self.events {
            out.push_str(&ev.to_record());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone, Copy)]
struct Key {
    time_s: f64,
    seq: u64,
}

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time_s
            .total_cmp(&other.time_s)
            .then(self.seq.cmp(&other.seq))
    }
}

struct Pending<P> {
    kind: EventKind,
    node: NodeId,
    detail: String,
    payload: P,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub scheduled: u64,
    pub dispatched: u64,
    pub cancelled: u64,
}

/// Event queue and virtual clock. `P` is an opaque payload delivered to the
/// dispatcher alongside each event; it never appears in the trace.
pub struct Engine<P = ()> {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Key>>,
    pending: BTreeMap<u64, Pending<P>>,
    counters: Counters,
    trace: Trace,
}

impl<P> Engine<P> {
    pub fn new(seed: u64) -> Self {
        Engine {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            counters: Counters::default(),
            trace: Trace::new(seed),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.trace.seed
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn schedule_with(
        &mut self,
        time_s: f64,
        kind: EventKind,
        node: NodeId,
        detail: impl Into<String>,
        payload: P,
    ) -> Result<EventHandle, EngineError> {
        if !time_s.is_finite() {
            return Err(EngineError::NonFiniteTime(time_s));
        }
        if time_s < self.now {
            return Err(EngineError::SchedulingInPast {
                at: time_s,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Key { time_s, seq }));
        self.pending.insert(
            seq,
            Pending {
                kind,
                node,
                detail: detail.into(),
                payload,
            },
        );
        self.counters.scheduled += 1;
        Ok(EventHandle(seq))
    }

    /// Returns false if the event already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        let removed = self.pending.remove(&handle.0).is_some();
        if removed {
            self.counters.cancelled += 1;
        }
        removed
    }

    fn peek_time(&mut self) -> Option<f64> {
        while let Some(Reverse(key)) = self.queue.peek() {
            if self.pending.contains_key(&key.seq) {
                return Some(key.time_s);
            }
            self.queue.pop();
        }
        None
    }

    fn pop(&mut self) -> Option<(Event, P)> {
        self.peek_time()?;
        let Reverse(key) = self.queue.pop()?;
        let p = self.pending.remove(&key.seq)?;
        self.now = key.time_s;
        self.counters.dispatched += 1;
        let event = Event {
            time_s: key.time_s,
            seq: key.seq,
            kind: p.kind,
            node: p.node,
            detail: p.detail,
        };
        self.trace.push(event.clone());
        Some((event, p.payload))
    }

    /// Dispatches events with `time_s <= t_end` through `handler`, which may
    /// schedule further events. Leaves the clock at `t_end` once the
    /// remaining queue lies beyond it. Returns the events dispatched by this
    /// call.
    pub fn run_until_with<F>(&mut self, t_end: f64, mut handler: F) -> Trace
    where
        F: FnMut(&mut Engine<P>, &Event, P),
    {
        let start = self.trace.len();
        while let Some(t) = self.peek_time() {
            if t > t_end {
                break;
            }
            let (event, payload) = self.pop().expect("peeked event exists");
            handler(self, &event, payload);
        }
        if t_end > self.now && t_end.is_finite() {
            self.now = t_end;
        }
        let mut out = Trace::new(self.trace.seed);
        for ev in &self.trace.events[start..] {
            out.push(ev.clone());
        }
        out
    }

    pub fn run_until(&mut self, t_end: f64) -> Trace {
        self.run_until_with(t_end, |_, _, _| {})
    }

    /// Runs until the queue drains.
    pub fn run_with<F>(&mut self, handler: F) -> Trace
    where
        F: FnMut(&mut Engine<P>, &Event, P),
    {
        self.run_until_with(f64::INFINITY, handler)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }
}

impl<P: Default> Engine<P> {
    pub fn schedule(
        &mut self,
        time_s: f64,
        kind: EventKind,
        node: NodeId,
        detail: impl Into<String>,
    ) -> Result<EventHandle, EngineError> {
        self.schedule_with(time_s, kind, node, detail, P::default())
    }
}

/// Deterministic random stream keyed by `(seed, label)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    label: String,
    seed: u64,
    rng: ChaCha12Rng,
}

/// Derives the stream for `(label, seed)`. The ChaCha key is the SHA-256 of
/// the seed bytes followed by the label, so streams with different labels
/// are independent.
///
/// # Panics
/// If `label` is empty.
pub fn rng_stream(label: &str, seed: u64) -> RngStream {
    assert!(!label.is_empty(), "rng stream label must be non-empty");
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    RngStream {
        label: label.to_string(),
        seed,
        rng: ChaCha12Rng::from_seed(key),
    }
}

impl RngStream {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh stream for `parent/label`; does not advance `self`.
    pub fn child(&self, label: &str) -> RngStream {
        rng_stream(&format!("{}/{}", self.label, label), self.seed)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
