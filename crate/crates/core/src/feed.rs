//! Sequenced commit logs backing change feeds and replication.
//!
//! Every store owns one [`ChangeLog`]. Mutations append under the store's
//! write lock, so log order is commit order. Readers only ever see the
//! *published* prefix: in standalone operation every append is published
//! immediately, while a gated log (synchronous replication) publishes only
//! once the mirror has applied the event.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::TransformObservation;
use crate::objects::ObjectDocument;

/// Default number of events kept for late subscribers.
pub const DEFAULT_RETENTION: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreKind {
    Graph,
    Objects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ChangePayload {
    EdgeUpsert(TransformObservation),
    EdgeRemove(TransformObservation),
    ObjectUpsert {
        pre: Option<Box<ObjectDocument>>,
        post: Box<ObjectDocument>,
    },
    ObjectDelete { pre: Box<ObjectDocument> },
}

impl ChangePayload {
    pub fn store(&self) -> StoreKind {
        match self {
            ChangePayload::EdgeUpsert(_) | ChangePayload::EdgeRemove(_) => StoreKind::Graph,
            ChangePayload::ObjectUpsert { .. } | ChangePayload::ObjectDelete { .. } => {
                StoreKind::Objects
            }
        }
    }
}

/// One committed mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub seq: u64,
    pub store: StoreKind,
    #[serde(flatten)]
    pub payload: ChangePayload,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeedError {
    #[error("cursor {cursor} is older than retained history (oldest available {oldest})")]
    CursorTooOld { cursor: u64, oldest: u64 },
    #[error("cursor {cursor} is ahead of head {head}")]
    CursorAhead { cursor: u64, head: u64 },
}

#[derive(Debug)]
struct LogInner {
    events: VecDeque<Arc<ChangeEvent>>,
    /// Sequence number of the last committed event (0 = none).
    head: u64,
    /// Highest sequence number visible to readers.
    published: u64,
    gated: bool,
    retention: usize,
}

impl LogInner {
    fn first_retained(&self) -> u64 {
        self.events.front().map_or(self.head + 1, |e| e.seq)
    }

    fn check_cursor(&self, cursor: u64) -> Result<(), FeedError> {
        if cursor > self.head {
            return Err(FeedError::CursorAhead { cursor, head: self.head });
        }
        let oldest = self.first_retained();
        if cursor + 1 < oldest {
            return Err(FeedError::CursorTooOld { cursor, oldest });
        }
        Ok(())
    }

    fn range(&self, after: u64, upto: u64, max: usize) -> Vec<Arc<ChangeEvent>> {
        let first = self.first_retained();
        let start = (after + 1).saturating_sub(first) as usize;
        self.events
            .iter()
            .skip(start)
            .take_while(|e| e.seq <= upto)
            .take(max)
            .cloned()
            .collect()
    }

    fn trim(&mut self) {
        while self.events.len() > self.retention {
            match self.events.front() {
                Some(e) if e.seq <= self.published => {
                    self.events.pop_front();
                }
                _ => break,
            }
        }
    }
}

#[derive(Debug)]
pub struct ChangeLog {
    store: StoreKind,
    inner: Mutex<LogInner>,
    cond: Condvar,
}

impl ChangeLog {
    pub fn new(store: StoreKind, retention: usize) -> Self {
        Self {
            store,
            inner: Mutex::new(LogInner {
                events: VecDeque::new(),
                head: 0,
                published: 0,
                gated: false,
                retention: retention.max(1),
            }),
            cond: Condvar::new(),
        }
    }

    pub fn store(&self) -> StoreKind {
        self.store
    }

    /// Appends a new event and returns its sequence number. Callers must hold
    /// the owning store's write lock so that log order equals commit order.
    pub(crate) fn append(&self, payload: ChangePayload) -> u64 {
        debug_assert_eq!(payload.store(), self.store);
        let mut inner = self.inner.lock();
        let seq = inner.head + 1;
        inner.events.push_back(Arc::new(ChangeEvent {
            seq,
            store: self.store,
            payload,
        }));
        inner.head = seq;
        if !inner.gated {
            inner.published = seq;
        }
        inner.trim();
        drop(inner);
        self.cond.notify_all();
        seq
    }

    /// Appends an event received from a master, keeping its sequence number.
    pub(crate) fn append_replicated(&self, event: &ChangeEvent) -> Result<(), u64> {
        let mut inner = self.inner.lock();
        if event.seq != inner.head + 1 {
            return Err(inner.head);
        }
        inner.events.push_back(Arc::new(event.clone()));
        inner.head = event.seq;
        if !inner.gated {
            inner.published = event.seq;
        }
        inner.trim();
        drop(inner);
        self.cond.notify_all();
        Ok(())
    }

    pub fn head(&self) -> u64 {
        self.inner.lock().head
    }

    pub fn published(&self) -> u64 {
        self.inner.lock().published
    }

    /// When gated, appended events stay invisible to readers until
    /// [`ChangeLog::publish`] releases them.
    pub fn set_gated(&self, gated: bool) {
        let mut inner = self.inner.lock();
        inner.gated = gated;
        if !gated {
            inner.published = inner.head;
        }
        drop(inner);
        self.cond.notify_all();
    }

    pub fn is_gated(&self) -> bool {
        self.inner.lock().gated
    }

    pub fn publish(&self, upto: u64) {
        let mut inner = self.inner.lock();
        let upto = upto.min(inner.head);
        if upto > inner.published {
            inner.published = upto;
            inner.trim();
            drop(inner);
            self.cond.notify_all();
        }
    }

    /// Drops retained history up to and including `seq` (bounded by the
    /// published prefix). Subscribers behind it get `CursorTooOld`.
    pub fn compact_through(&self, seq: u64) {
        let mut inner = self.inner.lock();
        let limit = seq.min(inner.published);
        while inner.events.front().is_some_and(|e| e.seq <= limit) {
            inner.events.pop_front();
        }
    }

    /// Committed events after `after`, ignoring the publication gate.
    /// Used by replication.
    pub fn read_committed(&self, after: u64, max: usize) -> Result<Vec<Arc<ChangeEvent>>, FeedError> {
        let inner = self.inner.lock();
        inner.check_cursor(after)?;
        Ok(inner.range(after, inner.head, max))
    }

    pub fn read_published(&self, after: u64, max: usize) -> Result<Vec<Arc<ChangeEvent>>, FeedError> {
        let inner = self.inner.lock();
        inner.check_cursor(after)?;
        Ok(inner.range(after, inner.published, max))
    }

    /// Blocks until at least one published event follows `after`, or the
    /// timeout expires (returning an empty batch).
    pub fn wait_published(
        &self,
        after: u64,
        max: usize,
        timeout: Duration,
    ) -> Result<Vec<Arc<ChangeEvent>>, FeedError> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.inner.lock();
        loop {
            inner.check_cursor(after)?;
            if inner.published > after {
                return Ok(inner.range(after, inner.published, max));
            }
            if self.cond.wait_until(&mut inner, deadline).timed_out() {
                inner.check_cursor(after)?;
                return Ok(inner.range(after, inner.published, max));
            }
        }
    }
}

/// A cursor over one log. Yields each published event after the starting
/// cursor exactly once, in sequence order.
#[derive(Debug, Clone)]
pub struct FeedStream {
    log: Arc<ChangeLog>,
    cursor: u64,
}

impl FeedStream {
    pub fn open(log: Arc<ChangeLog>, cursor: u64) -> Result<Self, FeedError> {
        log.inner.lock().check_cursor(cursor)?;
        Ok(Self { log, cursor })
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Every currently published event not yet yielded.
    pub fn drain(&mut self) -> Result<Vec<Arc<ChangeEvent>>, FeedError> {
        self.take(usize::MAX)
    }

    pub fn take(&mut self, max: usize) -> Result<Vec<Arc<ChangeEvent>>, FeedError> {
        let batch = self.log.read_published(self.cursor, max)?;
        self.advance(&batch);
        Ok(batch)
    }

    pub fn try_next(&mut self) -> Result<Option<Arc<ChangeEvent>>, FeedError> {
        Ok(self.take(1)?.into_iter().next())
    }

    /// Waits up to `timeout` for the next event.
    pub fn next_timeout(&mut self, timeout: Duration) -> Result<Option<Arc<ChangeEvent>>, FeedError> {
        let batch = self.log.wait_published(self.cursor, 1, timeout)?;
        self.advance(&batch);
        Ok(batch.into_iter().next())
    }

    pub fn wait_batch(&mut self, max: usize, timeout: Duration) -> Result<Vec<Arc<ChangeEvent>>, FeedError> {
        let batch = self.log.wait_published(self.cursor, max, timeout)?;
        self.advance(&batch);
        Ok(batch)
    }

    /// Number of published events not yet consumed.
    pub fn backlog(&self) -> u64 {
        self.log.published().saturating_sub(self.cursor)
    }

    fn advance(&mut self, batch: &[Arc<ChangeEvent>]) {
        if let Some(last) = batch.last() {
            debug_assert_eq!(batch[0].seq, self.cursor + 1);
            self.cursor = last.seq;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose6D;
    use crate::graph::{FrameId, TransformObservation};

    fn obs(n: u64) -> ChangePayload {
        ChangePayload::EdgeUpsert(TransformObservation {
            parent: FrameId::new("a").unwrap(),
            child: FrameId::new("b").unwrap(),
            provider: "p".into(),
            pose: Pose6D::identity(),
            sigma: 0.0,
            resolution: 1.0,
            time_us: n,
            seq: n,
        })
    }

    #[test]
    fn stream_from_head_is_empty_until_write() {
        let log = Arc::new(ChangeLog::new(StoreKind::Graph, 16));
        log.append(obs(1));
        let mut s = FeedStream::open(log.clone(), 1).unwrap();
        assert!(s.next_timeout(Duration::from_millis(5)).unwrap().is_none());
        log.append(obs(2));
        assert_eq!(s.try_next().unwrap().unwrap().seq, 2);
    }

    #[test]
    fn blocked_reader_wakes_on_append() {
        let log = Arc::new(ChangeLog::new(StoreKind::Graph, 16));
        let mut s = FeedStream::open(log.clone(), 0).unwrap();
        let writer = {
            let log = log.clone();
            std::thread::spawn(move || {
                std::thread::sleep(Duration::from_millis(20));
                log.append(obs(1));
            })
        };
        let ev = s.next_timeout(Duration::from_secs(5)).unwrap();
        writer.join().unwrap();
        assert_eq!(ev.unwrap().seq, 1);
    }

    #[test]
    fn compacted_cursor_is_too_old() {
        let log = Arc::new(ChangeLog::new(StoreKind::Graph, 3));
        for i in 1..=10 {
            log.append(obs(i));
        }
        assert!(matches!(
            FeedStream::open(log.clone(), 2),
            Err(FeedError::CursorTooOld { cursor: 2, oldest: 8 })
        ));
        let mut s = FeedStream::open(log.clone(), 7).unwrap();
        let seqs: Vec<u64> = s.drain().unwrap().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![8, 9, 10]);
        assert!(FeedStream::open(log, 11).is_err());
    }

    #[test]
    fn gate_hides_unpublished_events() {
        let log = Arc::new(ChangeLog::new(StoreKind::Graph, 16));
        log.set_gated(true);
        log.append(obs(1));
        log.append(obs(2));
        let mut s = FeedStream::open(log.clone(), 0).unwrap();
        assert!(s.drain().unwrap().is_empty());
        assert_eq!(log.read_committed(0, 10).unwrap().len(), 2);
        log.publish(1);
        assert_eq!(s.drain().unwrap().len(), 1);
        log.set_gated(false);
        assert_eq!(s.drain().unwrap().len(), 1);
    }

    #[test]
    fn replicated_append_requires_contiguous_seq() {
        let log = ChangeLog::new(StoreKind::Graph, 16);
        let ev = ChangeEvent { seq: 2, store: StoreKind::Graph, payload: obs(2) };
        assert_eq!(log.append_replicated(&ev), Err(0));
        let ev1 = ChangeEvent { seq: 1, ..ev.clone() };
        log.append_replicated(&ev1).unwrap();
        log.append_replicated(&ev).unwrap();
        assert_eq!(log.head(), 2);
    }

    #[test]
    fn event_wire_shape() {
        let ev = ChangeEvent { seq: 4, store: StoreKind::Graph, payload: obs(4) };
        let v = serde_json::to_value(&ev).unwrap();
        assert_eq!(v["seq"], 4);
        assert_eq!(v["store"], "graph");
        assert_eq!(v["kind"], "edge_upsert");
        assert_eq!(v["payload"]["parent"], "a");
        let back: ChangeEvent = serde_json::from_value(v).unwrap();
        assert_eq!(back, ev);
    }
}
