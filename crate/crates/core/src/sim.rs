//! Deterministic single-process simulation: every module of a deployment
//! driven by one virtual clock over a seeded in-memory network.
//!
//! The same scenario and seed always produce a byte-identical report.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::config::{HealthConfig, IngestConfig, StoreConfig};
use crate::discovery::{Announcement, DiscoveryTable, Role};
use crate::geometry::{GeometryPrimitive, Pose6D};
use crate::graph::ObjectId;
use crate::health::{Decision, HealthMonitor, ModuleKind, Remediation};
use crate::ingest::{EntryPoint, IngestCounters, IngestOutcome, UnknownIdPolicy, WorkerId};
use crate::model::{AsOf, EnvironmentModel};
use crate::objects::ObjectUpsert;
use crate::query::{execute_query, open_subscription, Query, QueryError, Subscription};
use crate::replication::{PromotionRecord, Replica, ReplicaGroup, ReplicationMode};
use crate::snapshot::model_digest;
use crate::wire::{encode_provider_message, ProviderMessage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid scenario: {0}")]
pub struct InvalidScenario(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    /// Probability that a datagram is lost.
    pub loss: f64,
    /// Probability that a datagram is delivered twice.
    pub duplicate: f64,
    pub min_latency_us: u64,
    pub max_latency_us: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { loss: 0.0, duplicate: 0.0, min_latency_us: 0, max_latency_us: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSpec {
    pub announce_interval_us: u64,
    pub heartbeat_interval_us: u64,
    pub health_check_us: u64,
    pub replication_interval_us: u64,
    /// Commits shipped per store per replication round; unlimited if absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replication_batch: Option<usize>,
    pub consumer_poll_us: u64,
}

impl Default for TimingSpec {
    fn default() -> Self {
        Self {
            announce_interval_us: 1_000_000,
            heartbeat_interval_us: 500_000,
            health_check_us: 100_000,
            replication_interval_us: 1_000,
            replication_batch: None,
            consumer_poll_us: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub node: String,
    #[serde(default = "all_roles")]
    pub roles: Vec<Role>,
}

fn all_roles() -> Vec<Role> {
    Role::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedEdge {
    pub kind: String,
    pub ext_id: String,
    /// True pose of the observed entity in the sensor frame.
    pub pose: Pose6D,
    pub sigma: f64,
    pub res: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub rate_hz: f64,
    #[serde(default)]
    pub observations: Vec<ObservedEdge>,
    /// Overrides the network loss probability for this provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_prob: Option<f64>,
    #[serde(default)]
    pub start_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_messages: Option<u64>,
}

/// The message a simulated provider sends as its `seq`-th datagram.
pub fn provider_message(p: &ProviderSpec, seq: u64, time_us: u64) -> ProviderMessage {
    p.observations.iter().fold(ProviderMessage::new(&p.id, &p.kind, seq, time_us), |m, o| {
        m.with_detection(&o.kind, &o.ext_id, o.pose, o.sigma, o.res)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerQuery {
    #[serde(flatten)]
    pub query: Query,
    #[serde(default)]
    pub follow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsumerSpec {
    pub id: String,
    #[serde(default)]
    pub queries: Vec<ConsumerQuery>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    KillModule,
    DropLink,
    RestoreLink,
    Partition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub time_us: u64,
    pub kind: FaultKind,
    /// A node id, `node/wN` for a handler worker, or a provider/consumer id
    /// for link faults.
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedObject {
    pub id: ObjectId,
    #[serde(default)]
    pub attributes: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryPrimitive>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub duration_us: u64,
    pub network: NetworkSpec,
    pub timing: TimingSpec,
    pub replication: ReplicationMode,
    pub workers: Option<usize>,
    pub unknown_id_policy: UnknownIdPolicy,
    /// First node is the initial master, the next one its slave, the rest
    /// stand by for later promotions.
    pub topology: Vec<NodeSpec>,
    pub objects: Vec<SeedObject>,
    pub providers: Vec<ProviderSpec>,
    pub consumers: Vec<ConsumerSpec>,
    pub faults: Vec<FaultSpec>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, InvalidScenario> {
        serde_json::from_str(text).map_err(|e| InvalidScenario(e.to_string()))
    }

    pub fn to_canonical_json(&self) -> String {
        crate::canonical_json(self)
    }

    pub fn validate(&self) -> Result<(), InvalidScenario> {
        let bad = |m: String| Err(InvalidScenario(m));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.network.loss) || !prob(self.network.duplicate) {
            return bad("network probabilities must lie in [0, 1]".into());
        }
        if self.network.min_latency_us > self.network.max_latency_us {
            return bad("min_latency_us exceeds max_latency_us".into());
        }
        let t = &self.timing;
        if [t.announce_interval_us, t.heartbeat_interval_us, t.health_check_us, t.replication_interval_us, t.consumer_poll_us]
            .contains(&0)
        {
            return bad("timing intervals must be > 0".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be > 0".into());
        }
        let mut nodes = BTreeSet::new();
        for n in &self.topology {
            if n.node.is_empty() || n.node.contains(['/', ':']) || !nodes.insert(n.node.as_str()) {
                return bad(format!("bad or duplicate node id {:?}", n.node));
            }
        }
        let mut endpoints = BTreeSet::new();
        for p in &self.providers {
            if nodes.is_empty() {
                return bad("providers need at least one node".into());
            }
            if p.id.is_empty() || !endpoints.insert(p.id.as_str()) {
                return bad(format!("bad or duplicate provider id {:?}", p.id));
            }
            if !(p.rate_hz.is_finite() && p.rate_hz > 0.0) {
                return bad(format!("provider {} needs rate_hz > 0", p.id));
            }
            if p.drop_prob.is_some_and(|d| !prob(d)) {
                return bad(format!("provider {} drop_prob outside [0, 1]", p.id));
            }
            if p.observations.len() > crate::wire::MAX_OBSERVATIONS {
                return bad(format!("provider {} has too many observations", p.id));
            }
            for o in &p.observations {
                if o.ext_id.is_empty() || !(o.sigma >= 0.0) || !(o.res > 0.0) {
                    return bad(format!("provider {} has an invalid observation", p.id));
                }
            }
            if encode_provider_message(&provider_message(p, u64::MAX, u64::MAX)).is_err() {
                return bad(format!("provider {} messages exceed one datagram", p.id));
            }
        }
        for c in &self.consumers {
            if c.id.is_empty() || !endpoints.insert(c.id.as_str()) {
                return bad(format!("bad or duplicate consumer id {:?}", c.id));
            }
            for q in &c.queries {
                q.query.validate().map_err(|e| InvalidScenario(e.to_string()))?;
                if q.follow && !q.query.followable() {
                    return bad(format!("{} cannot be followed", q.query.name()));
                }
            }
        }
        for f in &self.faults {
            let node = f.target.split('/').next().unwrap_or("");
            let known = nodes.contains(node) || endpoints.contains(f.target.as_str());
            if !known {
                return bad(format!("fault target {:?} is unknown", f.target));
            }
            if f.kind == FaultKind::KillModule && !nodes.contains(node) {
                return bad(format!("kill_module target {:?} is not a module", f.target));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub sent: u64,
    pub unsent_no_endpoint: u64,
    pub lost_in_network: u64,
    pub duplicated: u64,
    pub lost_at_module: u64,
    pub delivered: u64,
    pub edges_applied: u64,
    pub edges_superseded: u64,
    pub items_dropped: u64,
    pub last_applied_us: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsumerStats {
    pub deltas: u64,
    /// Streams lost (endpoint change, overflow, dead server) and reopened.
    pub resyncs: u64,
    pub queries_ok: u64,
    pub queries_failed: u64,
    pub no_endpoint_ticks: u64,
    pub endpoint_switches: u64,
    /// Longest delay between a promotion and this consumer pointing at the
    /// promoted node.
    pub max_reresolve_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPromotion {
    pub time_us: u64,
    pub record: PromotionRecord,
    /// Highest cursors delivered to any subscriber by the old master.
    pub acked: AsOf,
    /// Acknowledged commits missing from, or different in, the new master.
    pub durability_violations: u64,
}

/// One datagram that reached the master's entry point and was applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredDatagram {
    pub provider: String,
    pub seq: u64,
    pub sent_us: u64,
    pub delivered_us: u64,
    pub node: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub duration_us: u64,
    pub providers: BTreeMap<String, ProviderStats>,
    pub consumers: BTreeMap<String, ConsumerStats>,
    pub promotions: Vec<SimPromotion>,
    pub decisions: Vec<Decision>,
    pub unavailable: Vec<(u64, Role)>,
    pub ingest: IngestCounters,
    pub master: Option<String>,
    pub epoch: u64,
    /// Store content digest per node, plus `master`.
    pub digests: BTreeMap<String, String>,
    /// Delivery latency histogram: upper bucket bound (µs, power of two) to count.
    pub latency_histogram_us: BTreeMap<u64, u64>,
    pub delivered: Vec<DeliveredDatagram>,
}

impl ScenarioReport {
    pub fn to_canonical_json(&self) -> String {
        crate::canonical_json(self) + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Announce,
    Heartbeat,
    HealthCheck,
    Pump,
    Fault(usize),
    ProviderTick(usize),
    Deliver { provider: usize, seq: u64, sent_us: u64, node: String, bytes: Vec<u8> },
    ConsumerTick(usize),
}

struct SimNode {
    model: Arc<EnvironmentModel>,
    alive: bool,
    entry: Option<EntryPoint>,
    dead_workers: BTreeSet<WorkerId>,
}

struct ProviderState {
    table: DiscoveryTable,
    next_seq: u64,
}

struct ConsumerState {
    table: DiscoveryTable,
    endpoint: Option<String>,
    subs: Vec<Option<Subscription>>,
    sub_node: Option<String>,
    /// Node and promotion time this consumer should switch to.
    pending_switch: Option<(String, u64)>,
}

struct Sim<'a> {
    s: &'a Scenario,
    now: u64,
    order: u64,
    queue: BTreeMap<(u64, u64), Ev>,
    rng: ChaCha8Rng,
    nodes: BTreeMap<String, SimNode>,
    group: Option<ReplicaGroup>,
    standby: Vec<String>,
    respawns: u64,
    monitor: HealthMonitor,
    cut: BTreeSet<String>,
    providers: Vec<ProviderState>,
    consumers: Vec<ConsumerState>,
    report: ScenarioReport,
    retired_counters: Vec<IngestCounters>,
    /// Highest cursors any subscriber has been delivered, per serving node.
    acked: BTreeMap<String, AsOf>,
    store_cfg: StoreConfig,
}

fn node_of(addr: &str) -> &str {
    addr.split(':').next().unwrap_or(addr)
}

fn ingest_addr(node: &str) -> String {
    format!("{node}:47400")
}

fn query_addr(node: &str) -> String {
    format!("{node}:47401")
}

fn add_counters(a: &mut IngestCounters, b: &IngestCounters) {
    a.received += b.received;
    a.applied += b.applied;
    a.malformed += b.malformed;
    a.unsupported_version += b.unsupported_version;
    a.invalid_transform += b.invalid_transform;
    a.fenced += b.fenced;
    a.no_workers += b.no_workers;
    a.handler_faults += b.handler_faults;
}

impl<'a> Sim<'a> {
    fn new(s: &'a Scenario) -> Self {
        let hb_ms = (s.timing.heartbeat_interval_us / 1000).max(1);
        let monitor = HealthMonitor::new(&HealthConfig { heartbeat_interval_ms: hb_ms, ..HealthConfig::default() });
        let table = || DiscoveryTable::new(s.timing.announce_interval_us);
        Self {
            s,
            now: 0,
            order: 0,
            queue: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(s.seed),
            nodes: BTreeMap::new(),
            group: None,
            standby: Vec::new(),
            respawns: 0,
            monitor,
            cut: BTreeSet::new(),
            providers: s.providers.iter().map(|_| ProviderState { table: table(), next_seq: 1 }).collect(),
            consumers: s
                .consumers
                .iter()
                .map(|c| ConsumerState {
                    table: table(),
                    endpoint: None,
                    subs: c.queries.iter().map(|_| None).collect(),
                    sub_node: None,
                    pending_switch: None,
                })
                .collect(),
            report: ScenarioReport { seed: s.seed, duration_us: s.duration_us, ..Default::default() },
            retired_counters: Vec::new(),
            acked: BTreeMap::new(),
            store_cfg: StoreConfig::default(),
        }
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.order += 1;
        self.queue.insert((at, self.order), ev);
    }

    fn ingest_cfg(&self) -> IngestConfig {
        IngestConfig {
            workers: self.s.workers.unwrap_or(IngestConfig::default().workers),
            unknown_id_policy: self.s.unknown_id_policy,
            ..IngestConfig::default()
        }
    }

    fn add_node(&mut self, id: &str) -> Arc<EnvironmentModel> {
        let model = Arc::new(EnvironmentModel::new(&self.store_cfg));
        self.nodes.insert(
            id.to_owned(),
            SimNode { model: model.clone(), alive: true, entry: None, dead_workers: BTreeSet::new() },
        );
        model
    }

    fn reachable(&self, node: &str) -> bool {
        self.nodes.get(node).is_some_and(|n| n.alive) && !self.cut.contains(node)
    }

    fn start_master(&mut self, node: &str, epoch: u64) {
        let cfg = self.ingest_cfg();
        let n = self.nodes.get_mut(node).expect("known node");
        let entry = EntryPoint::new(n.model.clone(), &cfg, epoch);
        let workers = entry.workers();
        n.entry = Some(entry);
        self.monitor.deregister(node);
        self.monitor.register(node, ModuleKind::Master, Role::Query, node, self.now);
        for w in workers {
            self.monitor.register(&format!("{node}/{}", w.0), ModuleKind::Handler, Role::Ingest, node, self.now);
        }
    }

    fn attach_next_slave(&mut self) {
        let Some(group) = &self.group else { return };
        if group.slave().is_some() {
            return;
        }
        while let Some(id) = (!self.standby.is_empty()).then(|| self.standby.remove(0)) {
            if !self.nodes[&id].alive {
                continue;
            }
            let model = self.nodes[&id].model.clone();
            let group = self.group.as_mut().expect("group");
            group.attach_slave(Replica { node: id.clone(), addr: query_addr(&id), model }, self.s.replication);
            self.monitor.register(&id, ModuleKind::Slave, Role::Query, &id, self.now);
            return;
        }
    }

    fn setup(&mut self) {
        if let Some(first) = self.s.topology.first() {
            let model = self.add_node(&first.node);
            for o in &self.s.objects {
                let mut up = ObjectUpsert::new();
                for (k, v) in &o.attributes {
                    up = up.set(k.as_str(), v.clone());
                }
                up.geometry = o.geometry;
                let _ = model.objects.upsert_object(&o.id, up);
            }
            let replica = Replica { node: first.node.clone(), addr: query_addr(&first.node), model };
            self.group = Some(ReplicaGroup::new(Role::Query, replica, 1));
            self.start_master(&first.node.clone(), 1);
            for n in &self.s.topology[1..] {
                self.add_node(&n.node);
                self.standby.push(n.node.clone());
            }
            self.attach_next_slave();
            self.schedule(0, Ev::Announce);
            self.schedule(self.s.timing.heartbeat_interval_us, Ev::Heartbeat);
            self.schedule(self.s.timing.health_check_us, Ev::HealthCheck);
            self.schedule(self.s.timing.replication_interval_us, Ev::Pump);
        }
        for (i, f) in self.s.faults.iter().enumerate() {
            self.schedule(f.time_us, Ev::Fault(i));
        }
        for (i, p) in self.s.providers.iter().enumerate() {
            self.schedule(p.start_us, Ev::ProviderTick(i));
        }
        for i in 0..self.s.consumers.len() {
            self.schedule(0, Ev::ConsumerTick(i));
        }
    }

    fn master_node(&self) -> Option<String> {
        self.group.as_ref().map(|g| g.master().node.clone())
    }

    fn broadcast(&mut self, a: &Announcement) {
        if !self.reachable(node_of(&a.addr)) {
            return;
        }
        for (i, p) in self.s.providers.iter().enumerate() {
            if !self.cut.contains(&p.id) {
                self.providers[i].table.observe(a.clone(), self.now);
            }
        }
        for (i, c) in self.s.consumers.iter().enumerate() {
            if self.cut.contains(&c.id) {
                continue;
            }
            let cs = &mut self.consumers[i];
            cs.table.observe(a.clone(), self.now);
            if a.role == Role::Query {
                let target = cs.table.lookup_query_endpoint(self.now).ok();
                if target.is_some() && target != cs.endpoint {
                    let stats = self.report.consumers.entry(c.id.clone()).or_default();
                    if cs.endpoint.is_some() {
                        stats.endpoint_switches += 1;
                    }
                    if let Some((node, at)) = &cs.pending_switch {
                        if target.as_deref().map(node_of) == Some(node.as_str()) {
                            stats.max_reresolve_us = stats.max_reresolve_us.max(self.now - at);
                            cs.pending_switch = None;
                        }
                    }
                    cs.endpoint = target;
                }
            }
        }
    }

    fn announce_master(&mut self) {
        let Some(g) = &self.group else { return };
        let node = g.master().node.clone();
        let epoch = g.epoch();
        let ingest = Announcement::new(Role::Ingest, ingest_addr(&node), epoch, node.clone());
        let query = Announcement::new(Role::Query, query_addr(&node), epoch, node.clone());
        self.broadcast(&ingest);
        self.broadcast(&query);
    }

    fn on_provider_tick(&mut self, i: usize) {
        let spec = &self.s.providers[i];
        let period = ((1e6 / spec.rate_hz).round() as u64).max(1);
        let state = &mut self.providers[i];
        if spec.max_messages.is_some_and(|m| state.next_seq > m) {
            return;
        }
        self.schedule(self.now + period, Ev::ProviderTick(i));
        let state = &mut self.providers[i];
        let stats = self.report.providers.entry(spec.id.clone()).or_default();
        let Ok(endpoint) = state.table.lookup(Role::Ingest, self.now) else {
            stats.unsent_no_endpoint += 1;
            return;
        };
        let node = node_of(&endpoint.addr).to_owned();
        let seq = state.next_seq;
        state.next_seq += 1;
        stats.sent += 1;
        let bytes = encode_provider_message(&provider_message(spec, seq, self.now)).expect("validated size");
        let copies = if self.rng.random_bool(self.s.network.duplicate) { 2 } else { 1 };
        if copies == 2 {
            stats.duplicated += 1;
        }
        let loss = spec.drop_prob.unwrap_or(self.s.network.loss);
        for _ in 0..copies {
            let lost = self.rng.random_bool(loss);
            let latency = self.rng.random_range(self.s.network.min_latency_us..=self.s.network.max_latency_us);
            if lost || self.cut.contains(&spec.id) {
                self.report.providers.get_mut(&spec.id).expect("stats").lost_in_network += 1;
                continue;
            }
            let ev = Ev::Deliver { provider: i, seq, sent_us: self.now, node: node.clone(), bytes: bytes.clone() };
            self.schedule(self.now + latency, ev);
        }
    }

    fn on_deliver(&mut self, provider: usize, seq: u64, sent_us: u64, node: String, bytes: Vec<u8>) {
        let pid = self.s.providers[provider].id.clone();
        let reachable = self.reachable(&node);
        let stats = self.report.providers.entry(pid.clone()).or_default();
        let Some(n) = self.nodes.get(&node).filter(|_| reachable) else {
            stats.lost_at_module += 1;
            return;
        };
        let Some(entry) = &n.entry else {
            stats.lost_at_module += 1;
            return;
        };
        if entry.route_of(&pid).is_some_and(|r| n.dead_workers.contains(&r.worker)) {
            stats.lost_at_module += 1;
            return;
        }
        match entry.ingest_datagram(&bytes) {
            IngestOutcome::Applied { report, .. } => {
                stats.delivered += 1;
                stats.edges_applied += report.edges_applied as u64;
                stats.edges_superseded += report.edges_superseded as u64;
                stats.items_dropped += report.items_dropped as u64;
                stats.last_applied_us = Some(self.now);
                let latency = self.now - sent_us;
                let bucket = latency.max(1).next_power_of_two();
                *self.report.latency_histogram_us.entry(bucket).or_default() += 1;
                self.report.delivered.push(DeliveredDatagram {
                    provider: pid,
                    seq,
                    sent_us,
                    delivered_us: self.now,
                    node,
                });
            }
            IngestOutcome::Dropped(_) => stats.lost_at_module += 1,
        }
    }

    fn on_heartbeat(&mut self) {
        self.schedule(self.now + self.s.timing.heartbeat_interval_us, Ev::Heartbeat);
        let Some(g) = &self.group else { return };
        let mut members = vec![g.master().node.clone()];
        members.extend(g.slave().map(|s| s.node.clone()));
        for node in members {
            if !self.reachable(&node) {
                continue;
            }
            let _ = self.monitor.process_heartbeat(&node, self.now);
            let n = &self.nodes[&node];
            if let Some(entry) = &n.entry {
                let assignments = entry.assignments();
                for w in entry.workers() {
                    if n.dead_workers.contains(&w) {
                        continue;
                    }
                    let module = format!("{node}/{}", w.0);
                    let _ = self.monitor.process_heartbeat(&module, self.now);
                    let hosted = assignments.get(&w).cloned().unwrap_or_default();
                    let _ = self.monitor.set_hosted_providers(&module, hosted);
                }
            }
        }
    }

    fn on_health_check(&mut self) {
        self.schedule(self.now + self.s.timing.health_check_us, Ev::HealthCheck);
        for report in self.monitor.detect_failures(self.now) {
            for action in report.actions {
                self.remediate(&report.module, action);
            }
        }
    }

    fn remediate(&mut self, module: &str, action: Remediation) {
        match action {
            Remediation::ReassignProvider { provider } => {
                let (node, worker) = module.split_once('/').unwrap_or((module, ""));
                if let Some(entry) = self.nodes.get(node).and_then(|n| n.entry.as_ref()) {
                    entry.mark_worker_down(&WorkerId(worker.to_owned()));
                    entry.invalidate_route(&provider);
                }
            }
            Remediation::TeardownConnection { .. } => {}
            Remediation::PromoteSlave { .. } => self.promote(),
            Remediation::RoleUnavailable { role } => {
                self.report.unavailable.push((self.now, role));
                if let Some(g) = &mut self.group {
                    g.drop_slave();
                }
                if let Some(node) = self.master_node() {
                    self.retire_entry(&node);
                }
            }
            Remediation::RespawnSlave { .. } => {
                if let Some(g) = &mut self.group {
                    if g.slave().is_some_and(|s| s.node == module) {
                        g.drop_slave();
                        self.monitor.deregister(module);
                    }
                }
                self.respawns += 1;
                let id = format!("{module}-r{}", self.respawns);
                self.add_node(&id);
                self.standby.insert(0, id);
                self.attach_next_slave();
            }
        }
    }

    fn retire_entry(&mut self, node: &str) {
        if let Some(n) = self.nodes.get_mut(node) {
            if let Some(entry) = n.entry.take() {
                self.retired_counters.push(entry.counters());
                for w in entry.workers() {
                    self.monitor.deregister(&format!("{node}/{}", w.0));
                }
            }
        }
    }

    fn promote(&mut self) {
        let Some(old) = self.master_node() else { return };
        let old_model = self.nodes[&old].model.clone();
        let acked = self.acked.get(&old).copied().unwrap_or_default();
        let Some(group) = self.group.as_mut() else { return };
        let Ok(record) = group.promote_slave() else { return };
        let new = record.new_master.clone();
        let new_model = self.nodes[&new].model.clone();
        let violations = durability_violations(&old_model, &new_model, acked);
        self.retire_entry(&old);
        self.monitor.deregister(&old);
        self.start_master(&new, record.new_epoch);
        for c in &mut self.consumers {
            c.pending_switch = Some((new.clone(), self.now));
        }
        self.report.promotions.push(SimPromotion { time_us: self.now, record, acked, durability_violations: violations });
        self.attach_next_slave();
        self.announce_master();
    }

    fn on_pump(&mut self) {
        self.schedule(self.now + self.s.timing.replication_interval_us, Ev::Pump);
        let Some(g) = &self.group else { return };
        let Some(slave) = g.slave().map(|s| s.node.clone()) else { return };
        let master = g.master().node.clone();
        if !self.reachable(&master) || !self.reachable(&slave) {
            return;
        }
        let batch = self.s.timing.replication_batch.unwrap_or(usize::MAX);
        if let Some(link) = self.group.as_mut().and_then(|g| g.link_mut()) {
            if let Err(e) = link.pump_limited(batch) {
                log::warn!("replication {master} -> {slave}: {e}");
            }
        }
    }

    fn on_fault(&mut self, i: usize) {
        let f = &self.s.faults[i];
        match f.kind {
            FaultKind::KillModule => match f.target.split_once('/') {
                Some((node, worker)) => {
                    if let Some(n) = self.nodes.get_mut(node) {
                        n.dead_workers.insert(WorkerId(worker.to_owned()));
                    }
                }
                None => {
                    if let Some(n) = self.nodes.get_mut(&f.target) {
                        n.alive = false;
                    }
                }
            },
            FaultKind::DropLink | FaultKind::Partition => {
                self.cut.insert(f.target.clone());
            }
            FaultKind::RestoreLink => {
                self.cut.remove(&f.target);
            }
        }
    }

    fn on_consumer_tick(&mut self, i: usize) {
        self.schedule(self.now + self.s.timing.consumer_poll_us, Ev::ConsumerTick(i));
        let spec = &self.s.consumers[i];
        let cut = self.cut.contains(&spec.id);
        let target = self.consumers[i].table.lookup_query_endpoint(self.now).ok();
        let stats = self.report.consumers.entry(spec.id.clone()).or_default();
        let Some(addr) = target.filter(|_| !cut) else {
            stats.no_endpoint_ticks += 1;
            return;
        };
        let node = node_of(&addr).to_owned();
        let reachable = self.nodes.get(&node).is_some_and(|n| n.alive) && !self.cut.contains(&node);
        let cs = &mut self.consumers[i];
        if cs.sub_node.as_deref() != Some(node.as_str()) || !reachable {
            let had = cs.subs.iter().any(Option::is_some);
            cs.subs.iter_mut().for_each(|s| *s = None);
            cs.sub_node = None;
            if had {
                stats.resyncs += 1;
            }
        }
        if !reachable {
            stats.queries_failed += spec.queries.len() as u64;
            return;
        }
        let model = self.nodes[&node].model.clone();
        cs.sub_node = Some(node.clone());
        for (qi, q) in spec.queries.iter().enumerate() {
            if !q.follow {
                match execute_query(&model, &q.query) {
                    Ok(_) => stats.queries_ok += 1,
                    Err(_) => stats.queries_failed += 1,
                }
                continue;
            }
            let slot = &mut cs.subs[qi];
            if slot.is_none() {
                match open_subscription(&model, qi as u64, q.query.clone(), crate::query::DEFAULT_SUBSCRIPTION_BUFFER) {
                    Ok((initial, sub)) => {
                        match initial {
                            Ok(_) => stats.queries_ok += 1,
                            Err(_) => stats.queries_failed += 1,
                        }
                        *slot = Some(sub);
                    }
                    Err(_) => {
                        stats.queries_failed += 1;
                        continue;
                    }
                }
            }
            let sub = slot.as_mut().expect("opened");
            match sub.poll() {
                Ok(deltas) => {
                    stats.deltas += deltas.len() as u64;
                    let d = sub.last_delivered();
                    let acked = self.acked.entry(node.clone()).or_default();
                    acked.graph = acked.graph.max(d.graph);
                    acked.objects = acked.objects.max(d.objects);
                }
                Err(QueryError::SubscriptionOverflow) | Err(_) => {
                    *slot = None;
                    stats.resyncs += 1;
                }
            }
        }
    }

    fn run(mut self) -> SimOutcome {
        self.setup();
        while let Some(((t, _), ev)) = self.queue.pop_first() {
            if t >= self.s.duration_us {
                break;
            }
            self.now = t;
            match ev {
                Ev::Announce => {
                    self.schedule(self.now + self.s.timing.announce_interval_us, Ev::Announce);
                    self.announce_master();
                }
                Ev::Heartbeat => self.on_heartbeat(),
                Ev::HealthCheck => self.on_health_check(),
                Ev::Pump => self.on_pump(),
                Ev::Fault(i) => self.on_fault(i),
                Ev::ProviderTick(i) => self.on_provider_tick(i),
                Ev::Deliver { provider, seq, sent_us, node, bytes } => {
                    self.on_deliver(provider, seq, sent_us, node, bytes)
                }
                Ev::ConsumerTick(i) => self.on_consumer_tick(i),
            }
        }
        self.finish()
    }

    fn finish(mut self) -> SimOutcome {
        let mut counters = IngestCounters::default();
        for c in &self.retired_counters {
            add_counters(&mut counters, c);
        }
        for n in self.nodes.values() {
            if let Some(e) = &n.entry {
                add_counters(&mut counters, &e.counters());
            }
        }
        self.report.ingest = counters;
        for (id, n) in &self.nodes {
            self.report.digests.insert(id.clone(), model_digest(&n.model));
        }
        if let Some(g) = &self.group {
            self.report.master = Some(g.master().node.clone());
            self.report.epoch = g.epoch();
            self.report.digests.insert("master".into(), model_digest(&g.master().model));
        }
        self.report.decisions = self.monitor.decisions().to_vec();
        for p in &self.s.providers {
            self.report.providers.entry(p.id.clone()).or_default();
        }
        for c in &self.s.consumers {
            self.report.consumers.entry(c.id.clone()).or_default();
        }
        SimOutcome {
            master: self.group.as_ref().map(|g| g.master().model.clone()),
            nodes: self.nodes.iter().map(|(id, n)| (id.clone(), n.model.clone())).collect(),
            report: self.report,
        }
    }
}

/// Commits up to `acked` that the promoted store lacks or holds differently.
fn durability_violations(old: &EnvironmentModel, new: &EnvironmentModel, acked: AsOf) -> u64 {
    let mut missing = 0;
    for (old_log, new_log, upto) in [
        (old.graph.log(), new.graph.log(), acked.graph),
        (old.objects.log(), new.objects.log(), acked.objects),
    ] {
        if upto == 0 {
            continue;
        }
        let (Ok(a), Ok(b)) = (old_log.read_committed(0, upto as usize), new_log.read_committed(0, upto as usize))
        else {
            missing += upto;
            continue;
        };
        missing += a.iter().enumerate().filter(|(i, ev)| b.get(*i) != Some(*ev)).count() as u64;
    }
    missing
}

/// A finished run: the report plus the stores each node ended with.
pub struct SimOutcome {
    pub report: ScenarioReport,
    pub master: Option<Arc<EnvironmentModel>>,
    pub nodes: BTreeMap<String, Arc<EnvironmentModel>>,
}

pub fn simulate(s: &Scenario) -> Result<SimOutcome, InvalidScenario> {
    s.validate()?;
    Ok(Sim::new(s).run())
}

pub fn run_scenario(s: &Scenario) -> Result<ScenarioReport, InvalidScenario> {
    simulate(s).map(|o| o.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn scenario(loss: f64, dup: f64) -> Scenario {
        Scenario::from_json(
            &json!({
                "seed": 7,
                "duration_us": 3_000_000,
                "network": {"loss": loss, "duplicate": dup, "min_latency_us": 100, "max_latency_us": 5000},
                "topology": [{"node": "n1"}, {"node": "n2"}],
                "objects": [{"id": "pallet-17", "attributes": {"marker": {"QR": {"id": "bar"}}}}],
                "providers": [{"id": "foo", "type": "camera", "rate_hz": 20.0, "observations": [
                    {"kind": "marker.QR", "ext_id": "bar", "pose": {"t": [1.0, 0.0, 0.0], "q": [1.0, 0.0, 0.0, 0.0]}, "sigma": 0.01, "res": 0.001}
                ]}],
                "consumers": [{"id": "lbs", "queries": [
                    {"op": "get_transform", "src": "foo", "dst": "pallet-17", "follow": true}
                ]}]
            })
            .to_string(),
        )
        .unwrap()
    }

    #[test]
    fn empty_scenario_has_zero_counts() {
        let r = run_scenario(&Scenario::default()).unwrap();
        assert!(r.providers.is_empty() && r.consumers.is_empty() && r.delivered.is_empty());
        assert_eq!(r.ingest, IngestCounters::default());
    }

    #[test]
    fn lossless_run_applies_every_message() {
        let r = run_scenario(&scenario(0.0, 0.0)).unwrap();
        let p = &r.providers["foo"];
        assert_eq!(p.sent, 60);
        assert_eq!(p.delivered, p.sent);
        assert_eq!(p.edges_applied, 60);
        assert!(r.consumers["lbs"].deltas >= 1);
        assert_eq!(r.digests["n1"], r.digests["n2"]);
    }

    #[test]
    fn same_seed_same_report() {
        let s = scenario(0.3, 0.2);
        assert_eq!(run_scenario(&s).unwrap().to_canonical_json(), run_scenario(&s).unwrap().to_canonical_json());
    }

    #[test]
    fn master_kill_promotes_slave() {
        let mut s = scenario(0.0, 0.0);
        s.faults.push(FaultSpec { time_us: 1_000_000, kind: FaultKind::KillModule, target: "n1".into() });
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.promotions.len(), 1);
        assert_eq!(r.promotions[0].durability_violations, 0);
        assert_eq!(r.master.as_deref(), Some("n2"));
        assert_eq!(r.epoch, 2);
        assert!(r.providers["foo"].last_applied_us.unwrap() > r.promotions[0].time_us);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = scenario(0.0, 0.0);
        s.network.loss = 1.5;
        assert!(run_scenario(&s).is_err());
        let mut s = scenario(0.0, 0.0);
        s.faults.push(FaultSpec { time_us: 1, kind: FaultKind::KillModule, target: "ghost".into() });
        assert!(run_scenario(&s).is_err());
    }
}
