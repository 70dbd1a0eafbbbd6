//! Provider side of the system: the entry point that routes datagrams to
//! per-provider handlers, and the handlers that resolve external ids and
//! relay observations into the stores.
//!
//! The interface is session-less: every datagram is self-contained, so a
//! handler or entry point can be replaced at any time and providers simply
//! keep sending.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::IngestConfig;
use crate::feed::{ChangeEvent, ChangePayload, FeedStream};
use crate::graph::{EdgeUpdate, FrameId, ObjectId, TransformObservation};
use crate::model::EnvironmentModel;
use crate::objects::{AttrPath, AttributePredicate, ObjectDocument, ObjectError, ObjectUpsert, PROVISIONAL_SOURCE_ATTR};
use crate::wire::{decode_provider_message, ObjectRef, ObservationItem, ProviderMessage, WireError};

/// What to do with a detection whose external id maps to no object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownIdPolicy {
    #[default]
    CreateProvisional,
    Drop,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResolveError {
    #[error("external id {kind}/{ext_id} is shared by {count} objects")]
    AmbiguousExternalId { kind: String, ext_id: String, count: usize },
    #[error("external id {kind}/{ext_id} is unknown")]
    UnknownExternalId { kind: String, ext_id: String },
    #[error("invalid marker kind {0:?}")]
    InvalidKind(String),
    #[error(transparent)]
    Store(#[from] ObjectError),
}

/// Attribute path holding the external id for `kind`, e.g. `marker.QR.id`.
pub fn external_id_path(kind: &str) -> Result<AttrPath, ResolveError> {
    AttrPath::parse(&format!("{kind}.id")).map_err(|_| ResolveError::InvalidKind(kind.to_owned()))
}

/// Deterministic id for a placeholder object.
pub fn provisional_id(kind: &str, ext_id: &str) -> ObjectId {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(ext_id.as_bytes());
    let digest = hex::encode(h.finalize());
    ObjectId::new(format!("prov-{}", &digest[..16])).expect("hex id is valid")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CachedResolution {
    Resolved(ObjectId),
    Absent,
    Ambiguous(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdCacheEntry {
    pub key: (String, String),
    pub value: CachedResolution,
    /// Objects feed cursor the lookup reflects.
    pub loaded_at_seq: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerStats {
    pub messages: u64,
    pub store_queries: u64,
    pub cache_hits: u64,
    pub invalidations: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub edges_applied: usize,
    pub edges_superseded: usize,
    pub objects_touched: usize,
    pub items_dropped: usize,
    /// `(item index, reason)` for each dropped item.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<(usize, String)>,
}

/// Per-provider relay with an external-id lookup cache. The cache is kept
/// exact by consuming the objects change feed before every lookup.
#[derive(Debug)]
pub struct DataProviderHandler {
    provider: String,
    model: Arc<EnvironmentModel>,
    policy: UnknownIdPolicy,
    cache: HashMap<(String, String), IdCacheEntry>,
    feed: FeedStream,
    own_commits: BTreeSet<u64>,
    sensor_ready: bool,
    stats: HandlerStats,
    poisoned: bool,
}

impl DataProviderHandler {
    pub fn new(provider: &str, model: Arc<EnvironmentModel>, policy: UnknownIdPolicy) -> Self {
        let feed = model.objects.changes(model.objects.head()).expect("head cursor is always valid");
        Self {
            provider: provider.to_owned(),
            model,
            policy,
            cache: HashMap::new(),
            feed,
            own_commits: BTreeSet::new(),
            sensor_ready: false,
            stats: HandlerStats::default(),
            poisoned: false,
        }
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn stats(&self) -> HandlerStats {
        self.stats
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Processes pending object events, dropping cache entries whose answer
    /// they may change.
    fn sync_cache(&mut self) {
        let events = match self.feed.drain() {
            Ok(events) => events,
            Err(_) => {
                // History compacted past our cursor: start over.
                self.cache.clear();
                self.sensor_ready = false;
                self.feed = self.model.objects.changes(self.model.objects.head()).expect("head cursor");
                self.stats.invalidations += 1;
                return;
            }
        };
        for ev in events {
            self.observe_event(&ev);
        }
    }

    fn observe_event(&mut self, ev: &ChangeEvent) {
        let own = self.own_commits.remove(&ev.seq);
        let (pre, post): (Option<&ObjectDocument>, Option<&ObjectDocument>) = match &ev.payload {
            ChangePayload::ObjectUpsert { pre, post } => (pre.as_deref(), Some(post)),
            ChangePayload::ObjectDelete { pre } => (Some(pre), None),
            _ => return,
        };
        if let Some(pre) = pre {
            if post.is_none() && pre.id.as_str() == self.provider {
                self.sensor_ready = false;
            }
        }
        if own {
            return;
        }
        let mut stale = Vec::new();
        for (key, entry) in &self.cache {
            if ev.seq <= entry.loaded_at_seq {
                continue;
            }
            let Ok(path) = external_id_path(&key.0) else { continue };
            let hit = |d: Option<&ObjectDocument>| {
                d.and_then(|d| crate::objects::lookup(&d.attributes, &path))
                    .is_some_and(|v| v.as_str() == Some(key.1.as_str()))
            };
            if hit(pre) != hit(post) {
                stale.push(key.clone());
            }
        }
        for key in stale {
            self.cache.remove(&key);
            self.stats.invalidations += 1;
        }
    }

    /// Maps an external identifier to an object id. Misses issue exactly one
    /// store query; the answer is then cached until the change feed shows a
    /// mutation that alters which objects carry the identifier.
    pub fn resolve_external_id(&mut self, kind: &str, ext_id: &str) -> Result<ObjectId, ResolveError> {
        self.sync_cache();
        let key = (kind.to_owned(), ext_id.to_owned());
        let cached = self.cache.get(&key).map(|e| e.value.clone());
        let resolution = match cached {
            Some(v) => {
                self.stats.cache_hits += 1;
                v
            }
            None => {
                let path = external_id_path(kind)?;
                let (docs, cursor) = self
                    .model
                    .objects
                    .find_objects_at(&AttributePredicate::eq(path.dotted(), ext_id))?;
                self.stats.store_queries += 1;
                let mut value = match docs.len() {
                    0 => CachedResolution::Absent,
                    1 => CachedResolution::Resolved(docs[0].id.clone()),
                    n => CachedResolution::Ambiguous(n),
                };
                if value == CachedResolution::Absent && self.policy == UnknownIdPolicy::CreateProvisional {
                    let id = provisional_id(kind, ext_id);
                    let up = ObjectUpsert::new()
                        .set(path.dotted(), ext_id)
                        .set(PROVISIONAL_SOURCE_ATTR, self.provider.as_str())
                        .provisional(true);
                    let commit = self.model.objects.upsert_object(&id, up)?;
                    self.own_commits.insert(commit.seq);
                    value = CachedResolution::Resolved(id);
                }
                self.cache.insert(
                    key.clone(),
                    IdCacheEntry { key: key.clone(), value: value.clone(), loaded_at_seq: cursor },
                );
                value
            }
        };
        match resolution {
            CachedResolution::Resolved(id) => Ok(id),
            CachedResolution::Absent => Err(ResolveError::UnknownExternalId { kind: key.0, ext_id: key.1 }),
            CachedResolution::Ambiguous(count) => {
                Err(ResolveError::AmbiguousExternalId { kind: key.0, ext_id: key.1, count })
            }
        }
    }

    fn ensure_sensor(&mut self, id: &ObjectId, sensor_type: &str) -> Result<(), ObjectError> {
        self.sync_cache();
        if self.sensor_ready {
            return Ok(());
        }
        match self.model.objects.get_object(id) {
            Ok(_) => {}
            Err(ObjectError::NotFound(_)) => {
                let commit = self
                    .model
                    .objects
                    .upsert_object(id, ObjectUpsert::new().set("sensor.type", sensor_type))?;
                self.own_commits.insert(commit.seq);
            }
            Err(e) => return Err(e),
        }
        self.sensor_ready = true;
        Ok(())
    }

    /// Relays one message. Items fail independently.
    pub fn apply_provider_message(&mut self, m: &ProviderMessage) -> ApplyReport {
        if self.poisoned {
            self.poisoned = false;
            panic!("injected handler fault for provider {}", self.provider);
        }
        self.stats.messages += 1;
        let mut report = ApplyReport::default();
        let drop_item = |report: &mut ApplyReport, i: usize, why: String| {
            report.items_dropped += 1;
            report.faults.push((i, why));
        };
        let sensor = match FrameId::new(m.provider.id.as_str()) {
            Ok(id) => Some(id),
            Err(e) => {
                for i in 0..m.observations.len() {
                    drop_item(&mut report, i, e.to_string());
                }
                None
            }
        };
        let Some(sensor) = sensor else { return report };
        let has_detection = m.observations.iter().any(|o| matches!(o, ObservationItem::Detection(_)));
        if has_detection {
            if let Err(e) = self.ensure_sensor(&sensor, &m.provider.kind) {
                log::warn!("registering sensor {}: {e}", sensor);
            }
        }
        for (i, item) in m.observations.iter().enumerate() {
            match item {
                ObservationItem::Detection(d) => {
                    let child = match self.resolve_external_id(&d.kind, &d.ext_id) {
                        Ok(c) => c,
                        Err(e) => {
                            drop_item(&mut report, i, e.to_string());
                            continue;
                        }
                    };
                    let obs = TransformObservation {
                        parent: sensor.clone(),
                        child,
                        provider: m.provider.id.clone(),
                        pose: d.pose,
                        sigma: d.sigma,
                        resolution: d.res,
                        time_us: m.time_us,
                        seq: m.seq,
                    };
                    match self.model.graph.upsert_edge(obs) {
                        Ok(EdgeUpdate::Applied { .. }) => report.edges_applied += 1,
                        Ok(EdgeUpdate::Superseded) => report.edges_superseded += 1,
                        Err(e) => drop_item(&mut report, i, e.to_string()),
                    }
                }
                ObservationItem::AttributeUpsert(a) => {
                    let target = match &a.object {
                        ObjectRef::Id(id) => ObjectId::new(id.as_str()).map_err(|e| e.to_string()),
                        ObjectRef::External { kind, ext_id } => {
                            self.resolve_external_id(kind, ext_id).map_err(|e| e.to_string())
                        }
                    };
                    let id = match target {
                        Ok(id) => id,
                        Err(why) => {
                            drop_item(&mut report, i, why);
                            continue;
                        }
                    };
                    let up = ObjectUpsert {
                        mutations: a.mutations.clone(),
                        geometry: a.geometry,
                        ..Default::default()
                    };
                    match self.model.objects.upsert_object(&id, up) {
                        Ok(_) => report.objects_touched += 1,
                        Err(e) => drop_item(&mut report, i, e.to_string()),
                    }
                }
            }
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HandlerId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerRef {
    pub id: HandlerId,
    pub worker: WorkerId,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no workers available")]
pub struct NoWorkersAvailable;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounters {
    pub received: u64,
    pub applied: u64,
    pub malformed: u64,
    pub unsupported_version: u64,
    pub invalid_transform: u64,
    pub fenced: u64,
    pub no_workers: u64,
    pub handler_faults: u64,
}

#[derive(Debug, Default)]
struct AtomicCounters {
    received: AtomicU64,
    applied: AtomicU64,
    malformed: AtomicU64,
    unsupported_version: AtomicU64,
    invalid_transform: AtomicU64,
    fenced: AtomicU64,
    no_workers: AtomicU64,
    handler_faults: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Malformed(String),
    UnsupportedVersion(u64),
    InvalidTransform(String),
    Fenced,
    NoWorkersAvailable,
    HandlerFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestOutcome {
    Applied { handler: HandlerRef, report: ApplyReport },
    Dropped(DropReason),
}

#[derive(Debug, Clone)]
struct WorkerState {
    alive: bool,
    /// Providers hosted, as last reported by the management engine.
    reported_load: u64,
}

/// Entry point: decodes datagrams, keeps the provider → handler routing
/// table and places new handlers on the least-loaded live worker.
pub struct EntryPoint {
    model: Arc<EnvironmentModel>,
    policy: UnknownIdPolicy,
    epoch: u64,
    routes: RwLock<BTreeMap<String, HandlerRef>>,
    handlers: Mutex<BTreeMap<HandlerId, Arc<Mutex<DataProviderHandler>>>>,
    workers: RwLock<BTreeMap<WorkerId, WorkerState>>,
    next_handler: AtomicU64,
    counters: AtomicCounters,
}

impl std::fmt::Debug for EntryPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EntryPoint").field("epoch", &self.epoch).finish_non_exhaustive()
    }
}

impl EntryPoint {
    pub fn new(model: Arc<EnvironmentModel>, cfg: &IngestConfig, epoch: u64) -> Self {
        let workers = (0..cfg.workers.max(1))
            .map(|i| (WorkerId(format!("w{i}")), WorkerState { alive: true, reported_load: 0 }))
            .collect();
        Self {
            model,
            policy: cfg.unknown_id_policy,
            epoch,
            routes: RwLock::new(BTreeMap::new()),
            handlers: Mutex::new(BTreeMap::new()),
            workers: RwLock::new(workers),
            next_handler: AtomicU64::new(1),
            counters: AtomicCounters::default(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn model(&self) -> &Arc<EnvironmentModel> {
        &self.model
    }

    pub fn workers(&self) -> Vec<WorkerId> {
        self.workers.read().keys().cloned().collect()
    }

    pub fn set_load_report(&self, worker: &WorkerId, providers: u64) {
        if let Some(w) = self.workers.write().get_mut(worker) {
            w.reported_load = providers;
        }
    }

    /// Marks a worker dead; its providers are reassigned on their next message.
    pub fn mark_worker_down(&self, worker: &WorkerId) {
        if let Some(w) = self.workers.write().get_mut(worker) {
            w.alive = false;
        }
        let dead: Vec<HandlerId> =
            self.routes.read().values().filter(|r| &r.worker == worker).map(|r| r.id).collect();
        let mut handlers = self.handlers.lock();
        for id in dead {
            handlers.remove(&id);
        }
    }

    pub fn mark_worker_up(&self, worker: &WorkerId) {
        self.workers
            .write()
            .entry(worker.clone())
            .or_insert(WorkerState { alive: true, reported_load: 0 })
            .alive = true;
    }

    pub fn kill_handler(&self, id: HandlerId) {
        self.handlers.lock().remove(&id);
    }

    /// Forgets the provider's route so its next message gets a new handler.
    pub fn invalidate_route(&self, provider: &str) {
        if let Some(r) = self.routes.write().remove(provider) {
            self.handlers.lock().remove(&r.id);
        }
    }

    pub fn route_of(&self, provider: &str) -> Option<HandlerRef> {
        self.routes.read().get(provider).cloned()
    }

    /// Providers currently routed, grouped by worker.
    pub fn assignments(&self) -> BTreeMap<WorkerId, Vec<String>> {
        let mut out: BTreeMap<WorkerId, Vec<String>> = BTreeMap::new();
        for (p, r) in self.routes.read().iter() {
            out.entry(r.worker.clone()).or_default().push(p.clone());
        }
        out
    }

    fn is_live(&self, r: &HandlerRef) -> bool {
        self.handlers.lock().contains_key(&r.id) && self.workers.read().get(&r.worker).is_some_and(|w| w.alive)
    }

    /// Stable assignment: the same provider keeps its handler until that
    /// handler or its worker dies.
    pub fn assign_handler(&self, provider: &str) -> Result<HandlerRef, NoWorkersAvailable> {
        if let Some(r) = self.routes.read().get(provider) {
            if self.is_live(r) {
                return Ok(r.clone());
            }
        }
        let mut routes = self.routes.write();
        if let Some(r) = routes.get(provider) {
            if self.is_live(r) {
                return Ok(r.clone());
            }
        }
        let mut hosted: BTreeMap<&WorkerId, u64> = BTreeMap::new();
        for r in routes.values() {
            if r.worker.0.as_str() != "" {
                *hosted.entry(&r.worker).or_default() += 1;
            }
        }
        let workers = self.workers.read();
        let worker = workers
            .iter()
            .filter(|(_, w)| w.alive)
            .min_by_key(|(id, w)| (w.reported_load + hosted.get(id).copied().unwrap_or(0), (*id).clone()))
            .map(|(id, _)| id.clone())
            .ok_or(NoWorkersAvailable)?;
        drop(workers);
        let id = HandlerId(self.next_handler.fetch_add(1, Ordering::Relaxed));
        let handler = DataProviderHandler::new(provider, self.model.clone(), self.policy);
        self.handlers.lock().insert(id, Arc::new(Mutex::new(handler)));
        let r = HandlerRef { id, worker };
        routes.insert(provider.to_owned(), r.clone());
        Ok(r)
    }

    pub fn handler_stats(&self, provider: &str) -> Option<HandlerStats> {
        let r = self.route_of(provider)?;
        let h = self.handlers.lock().get(&r.id).cloned()?;
        let stats = h.lock().stats();
        Some(stats)
    }

    /// Makes the provider's handler fail on its next message.
    #[doc(hidden)]
    pub fn poison_handler(&self, provider: &str) {
        if let Some(r) = self.route_of(provider) {
            if let Some(h) = self.handlers.lock().get(&r.id) {
                h.lock().poisoned = true;
            }
        }
    }

    /// Decodes and applies one datagram. Never panics; every failure is
    /// counted and reported as a drop.
    pub fn ingest_datagram(&self, bytes: &[u8]) -> IngestOutcome {
        self.counters.received.fetch_add(1, Ordering::Relaxed);
        match decode_provider_message(bytes) {
            Ok(m) => self.ingest_message(&m),
            Err(e) => {
                let (counter, reason) = match e {
                    WireError::UnsupportedVersion(v) => {
                        (&self.counters.unsupported_version, DropReason::UnsupportedVersion(v))
                    }
                    WireError::InvalidTransform(s) => (&self.counters.invalid_transform, DropReason::InvalidTransform(s)),
                    WireError::MalformedMessage(s) => (&self.counters.malformed, DropReason::Malformed(s)),
                    WireError::TooLarge(n) => (&self.counters.malformed, DropReason::Malformed(format!("{n} bytes"))),
                };
                counter.fetch_add(1, Ordering::Relaxed);
                IngestOutcome::Dropped(reason)
            }
        }
    }

    pub fn ingest_message(&self, m: &ProviderMessage) -> IngestOutcome {
        if self.model.admit(self.epoch).is_err() {
            self.counters.fenced.fetch_add(1, Ordering::Relaxed);
            return IngestOutcome::Dropped(DropReason::Fenced);
        }
        let handler_ref = match self.assign_handler(&m.provider.id) {
            Ok(r) => r,
            Err(NoWorkersAvailable) => {
                self.counters.no_workers.fetch_add(1, Ordering::Relaxed);
                return IngestOutcome::Dropped(DropReason::NoWorkersAvailable);
            }
        };
        let Some(handler) = self.handlers.lock().get(&handler_ref.id).cloned() else {
            self.counters.no_workers.fetch_add(1, Ordering::Relaxed);
            return IngestOutcome::Dropped(DropReason::NoWorkersAvailable);
        };
        let result = catch_unwind(AssertUnwindSafe(|| handler.lock().apply_provider_message(m)));
        match result {
            Ok(report) => {
                self.counters.applied.fetch_add(1, Ordering::Relaxed);
                IngestOutcome::Applied { handler: handler_ref, report }
            }
            Err(_) => {
                log::error!("handler {:?} for {} failed; discarding it", handler_ref.id, m.provider.id);
                self.kill_handler(handler_ref.id);
                self.counters.handler_faults.fetch_add(1, Ordering::Relaxed);
                IngestOutcome::Dropped(DropReason::HandlerFault)
            }
        }
    }

    pub fn counters(&self) -> IngestCounters {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        IngestCounters {
            received: l(&c.received),
            applied: l(&c.applied),
            malformed: l(&c.malformed),
            unsupported_version: l(&c.unsupported_version),
            invalid_transform: l(&c.invalid_transform),
            fenced: l(&c.fenced),
            no_workers: l(&c.no_workers),
            handler_faults: l(&c.handler_faults),
        }
    }
}
