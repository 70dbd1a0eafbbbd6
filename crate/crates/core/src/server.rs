//! Networked node: UDP ingest (with a newline-delimited TCP fallback on the
//! same port), the framed consumer protocol, discovery announcements and
//! master-to-slave replication over TCP.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::Engine;
use base64::engine::general_purpose::STANDARD as B64;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::blobs::BlobRef;
use crate::config::{Config, ConfigError};
use crate::discovery::{decode_announcement, encode_announcement, Announcement, DiscoveryTable, NoEndpointKnown, Role};
use crate::feed::ChangeEvent;
use crate::framing::{
    parse_request, read_frame, write_json, AdminOp, FrameError, OverflowFrame, Request, RequestBody, Response,
    ServerFrame,
};
use crate::health::{HealthMonitor, ModuleKind};
use crate::ingest::EntryPoint;
use crate::model::{AsOf, EnvironmentModel};
use crate::objects::ObjectUpsert;
use crate::query::{execute_query, open_subscription, run_isolated, Query, QueryError};
use crate::replication::ReplicationMode;
use crate::snapshot::{export_snapshot, import_map, import_snapshot, SnapshotError};

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("no roles selected")]
    NoRoles,
}

/// One batch on a replication stream, master to slave.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplBatch {
    epoch: u64,
    #[serde(default)]
    blobs: Vec<(BlobRef, String)>,
    #[serde(default)]
    events: Vec<ChangeEvent>,
}

/// Slave to master: heads applied so far.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplAck {
    ack: AsOf,
}

struct Shared {
    cfg: Config,
    roles: Vec<Role>,
    model: Arc<EnvironmentModel>,
    epoch: AtomicU64,
    master: AtomicBool,
    shutdown: AtomicBool,
    entry: Mutex<Option<Arc<EntryPoint>>>,
    /// Last time a slave acknowledged replication, for health tracking.
    slave_ack: Mutex<Option<Instant>>,
    ingest_addr: Mutex<Option<SocketAddr>>,
    query_addr: Mutex<Option<SocketAddr>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    fn spawn(self: &Arc<Self>, name: &str, f: impl FnOnce(Arc<Shared>) + Send + 'static) {
        let me = self.clone();
        let h = thread::Builder::new().name(name.into()).spawn(move || f(me)).expect("spawn thread");
        self.threads.lock().push(h);
    }

    fn stopping(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    fn has(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }

    fn interval(&self) -> Duration {
        Duration::from_millis(self.cfg.network.announce_interval_ms.max(1))
    }
}

/// A running node. Dropping it without [`Server::shutdown`] leaves the
/// threads running.
pub struct Server {
    shared: Arc<Shared>,
}

impl Server {
    /// Starts the selected roles. With `replication.master` set, the node
    /// mirrors that master and takes over once the master stays unreachable
    /// for three announcement intervals.
    pub fn start(cfg: Config, roles: &[Role]) -> Result<Self, ServerError> {
        if roles.is_empty() {
            return Err(ServerError::NoRoles);
        }
        let model = Arc::new(EnvironmentModel::new(&cfg.stores));
        let slave = !cfg.replication.master.is_empty();
        if !cfg.stores.snapshot_path.is_empty() && !slave {
            import_map(&model, Path::new(&cfg.stores.snapshot_path))?;
        }
        let shared = Arc::new(Shared {
            roles: roles.to_vec(),
            model,
            epoch: AtomicU64::new(1),
            master: AtomicBool::new(!slave),
            shutdown: AtomicBool::new(false),
            entry: Mutex::new(None),
            slave_ack: Mutex::new(None),
            ingest_addr: Mutex::new(None),
            query_addr: Mutex::new(None),
            threads: Mutex::new(Vec::new()),
            cfg,
        });
        if shared.has(Role::Query) {
            let listener = TcpListener::bind((shared.cfg.network.bind.as_str(), shared.cfg.network.query_port))?;
            *shared.query_addr.lock() = Some(listener.local_addr()?);
            shared.spawn("rail-query", move |s| serve_queries(s, listener));
        }
        if slave {
            shared.spawn("rail-replica", run_slave);
        } else {
            become_master(&shared)?;
        }
        Ok(Self { shared })
    }

    pub fn model(&self) -> &Arc<EnvironmentModel> {
        &self.shared.model
    }

    pub fn epoch(&self) -> u64 {
        self.shared.epoch.load(Ordering::Acquire)
    }

    pub fn is_master(&self) -> bool {
        self.shared.master.load(Ordering::Acquire)
    }

    pub fn ingest_addr(&self) -> Option<SocketAddr> {
        *self.shared.ingest_addr.lock()
    }

    pub fn query_addr(&self) -> Option<SocketAddr> {
        *self.shared.query_addr.lock()
    }

    pub fn entry_point(&self) -> Option<Arc<EntryPoint>> {
        self.shared.entry.lock().clone()
    }

    /// Blocks until shutdown is requested from another thread.
    pub fn wait(&self) {
        while !self.shared.stopping() {
            thread::sleep(POLL);
        }
    }

    pub fn shutdown(self) {
        self.shared.shutdown.store(true, Ordering::Release);
        loop {
            let handles: Vec<_> = std::mem::take(&mut *self.shared.threads.lock());
            if handles.is_empty() {
                break;
            }
            for h in handles {
                let _ = h.join();
            }
        }
    }
}

fn become_master(s: &Arc<Shared>) -> Result<(), ServerError> {
    s.master.store(true, Ordering::Release);
    if s.has(Role::Ingest) {
        let epoch = s.epoch.load(Ordering::Acquire);
        let entry = Arc::new(EntryPoint::new(s.model.clone(), &s.cfg.ingest, epoch));
        *s.entry.lock() = Some(entry.clone());
        let udp = UdpSocket::bind((s.cfg.network.bind.as_str(), s.cfg.network.ingest_port))?;
        let addr = udp.local_addr()?;
        let tcp = TcpListener::bind((s.cfg.network.bind.as_str(), addr.port()))?;
        *s.ingest_addr.lock() = Some(addr);
        let e = entry.clone();
        s.spawn("rail-ingest-udp", move |s| serve_udp_ingest(s, udp, e));
        s.spawn("rail-ingest-tcp", move |s| serve_tcp_ingest(s, tcp, entry));
    }
    s.spawn("rail-announce", announce_loop);
    if s.has(Role::Mgmt) {
        s.spawn("rail-mgmt", mgmt_loop);
    }
    Ok(())
}

fn serve_udp_ingest(s: Arc<Shared>, sock: UdpSocket, entry: Arc<EntryPoint>) {
    let _ = sock.set_read_timeout(Some(POLL));
    let mut buf = vec![0u8; 65_536];
    while !s.stopping() {
        match sock.recv_from(&mut buf) {
            Ok((n, _)) => {
                entry.ingest_datagram(&buf[..n]);
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => log::warn!("ingest socket: {e}"),
        }
    }
}

fn accept_loop(s: &Arc<Shared>, listener: TcpListener, name: &str, handle: fn(Arc<Shared>, TcpStream)) {
    if let Err(e) = listener.set_nonblocking(true) {
        log::error!("{name}: {e}");
        return;
    }
    while !s.stopping() {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                s.spawn(name, move |s| handle(s, stream));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => log::warn!("{name} accept: {e}"),
        }
    }
}

fn serve_tcp_ingest(s: Arc<Shared>, listener: TcpListener, entry: Arc<EntryPoint>) {
    if listener.set_nonblocking(true).is_err() {
        return;
    }
    while !s.stopping() {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let entry = entry.clone();
                s.spawn("rail-ingest-conn", move |s| ingest_lines(s, stream, entry));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => log::warn!("ingest accept: {e}"),
        }
    }
}

fn ingest_lines(s: Arc<Shared>, stream: TcpStream, entry: Arc<EntryPoint>) {
    let _ = stream.set_read_timeout(Some(POLL));
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    while !s.stopping() {
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => break,
            Ok(_) => {
                if line.ends_with(b"\n") {
                    let body = line.trim_ascii();
                    if !body.is_empty() {
                        entry.ingest_datagram(body);
                    }
                    line.clear();
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
}

fn announce_loop(s: Arc<Shared>) {
    let sock = match UdpSocket::bind((s.cfg.network.bind.as_str(), 0)) {
        Ok(sock) => sock,
        Err(e) => {
            log::error!("announcer: {e}");
            return;
        }
    };
    let _ = sock.set_broadcast(true);
    let target = (s.cfg.network.broadcast_addr.as_str(), s.cfg.network.discovery_port);
    let host = &s.cfg.network.advertise_host;
    let mut next = Instant::now();
    while !s.stopping() {
        if Instant::now() >= next {
            let epoch = s.epoch.load(Ordering::Acquire);
            let mut out = Vec::new();
            if let Some(a) = *s.ingest_addr.lock() {
                out.push(Announcement::new(Role::Ingest, format!("{host}:{}", a.port()), epoch, &s.cfg.node.id));
            }
            if let Some(a) = *s.query_addr.lock() {
                out.push(Announcement::new(Role::Query, format!("{host}:{}", a.port()), epoch, &s.cfg.node.id));
            }
            if s.has(Role::Mgmt) {
                out.push(Announcement::new(Role::Mgmt, host.clone(), epoch, &s.cfg.node.id));
            }
            for a in out {
                if let Err(e) = sock.send_to(&encode_announcement(&a), target) {
                    log::debug!("announce: {e}");
                }
            }
            next += s.interval();
        }
        thread::sleep(POLL.min(s.interval()));
    }
}

/// Tracks in-process handler workers and the replication slave, logging
/// remediation decisions.
fn mgmt_loop(s: Arc<Shared>) {
    let mut monitor = HealthMonitor::new(&s.cfg.health);
    let t0 = Instant::now();
    let now_us = || t0.elapsed().as_micros() as u64;
    let interval = Duration::from_millis(s.cfg.health.heartbeat_interval_ms.max(1));
    let mut logged = 0;
    let mut slave_registered = false;
    while !s.stopping() {
        let now = now_us();
        if let Some(entry) = s.entry.lock().clone() {
            let assignments = entry.assignments();
            for w in entry.workers() {
                let id = format!("{}/{}", s.cfg.node.id, w.0);
                if monitor.module(&id).is_none() {
                    monitor.register(&id, ModuleKind::Handler, Role::Ingest, &s.cfg.node.id, now);
                }
                let _ = monitor.process_heartbeat(&id, now);
                let _ = monitor.set_hosted_providers(&id, assignments.get(&w).cloned().unwrap_or_default());
            }
        }
        if let Some(at) = *s.slave_ack.lock() {
            if !slave_registered {
                monitor.register("slave", ModuleKind::Slave, Role::Query, "slave", now);
                slave_registered = true;
            }
            let seen = now.saturating_sub(at.elapsed().as_micros() as u64);
            let _ = monitor.process_heartbeat("slave", seen);
        }
        for report in monitor.detect_failures(now) {
            log::warn!("module {} failed: {:?}", report.module, report.actions);
            if report.kind == ModuleKind::Slave {
                s.model.set_gated(false);
                monitor.deregister(&report.module);
                slave_registered = false;
                *s.slave_ack.lock() = None;
            }
        }
        if !s.cfg.node.decision_log.is_empty() {
            let path = Path::new(&s.cfg.node.decision_log);
            if monitor.decisions().len() > logged {
                if let Err(e) = monitor.append_decision_log(path, logged) {
                    log::warn!("decision log: {e}");
                }
                logged = monitor.decisions().len();
            }
        }
        thread::sleep(interval.min(Duration::from_millis(100)));
    }
}

fn serve_queries(s: Arc<Shared>, listener: TcpListener) {
    accept_loop(&s, listener, "rail-query-conn", serve_connection);
}

type Writer = Arc<Mutex<TcpStream>>;

fn send(w: &Writer, frame: &ServerFrame) -> bool {
    write_json(&mut *w.lock(), frame).is_ok()
}

fn serve_connection(s: Arc<Shared>, stream: TcpStream) {
    let Ok(write_half) = stream.try_clone() else { return };
    let writer: Writer = Arc::new(Mutex::new(write_half));
    let _ = stream.set_read_timeout(Some(POLL));
    let mut reader = stream;
    let limit = s.cfg.query.max_frame_bytes;
    while !s.stopping() {
        let bytes = match read_frame(&mut reader, limit) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(FrameError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                continue
            }
            Err(e) => {
                send(&writer, &ServerFrame::Response(Response::err_code(0, "MalformedQuery", e.to_string())));
                break;
            }
        };
        let (id, req) = parse_request(&bytes);
        let req = match req {
            Ok(r) => r,
            Err(e) => {
                send(&writer, &ServerFrame::Response(Response::err(id, &e)));
                continue;
            }
        };
        match req.body {
            RequestBody::Query(q) if req.follow => {
                let w = writer.clone();
                s.spawn("rail-subscription", move |s| run_subscription(s, w, req.id, q));
            }
            RequestBody::Query(q) => {
                let w = writer.clone();
                s.spawn("rail-query-instance", move |s| {
                    let r = run_isolated(|| execute_query(&s.model, &q));
                    send(&w, &ServerFrame::Response(result_response(req.id, r)));
                });
            }
            RequestBody::Admin(AdminOp::Replicate { graph_after, objects_after }) => {
                serve_replication(&s, reader, writer, AsOf { graph: graph_after, objects: objects_after });
                return;
            }
            RequestBody::Admin(op) => {
                let resp = admin(&s, req.id, op);
                send(&writer, &ServerFrame::Response(resp));
            }
        }
    }
}

fn result_response(id: u64, r: Result<crate::query::QueryResult, QueryError>) -> Response {
    match r {
        Ok(res) => {
            let mut v = json!({ "payload": res.payload, "complete": res.complete });
            if !res.status.is_empty() {
                v["status"] = serde_json::to_value(&res.status).expect("status serializes");
            }
            Response::ok(id, v, Some(res.as_of))
        }
        Err(e) => Response::err(id, &e),
    }
}

fn run_subscription(s: Arc<Shared>, w: Writer, id: u64, q: Query) {
    let buffer = s.cfg.query.subscription_buffer;
    let deadline = Instant::now() + Duration::from_secs(5);
    let opened = loop {
        match open_subscription(&s.model, id, q.clone(), buffer) {
            Err(QueryError::Unsettled) if Instant::now() < deadline && !s.stopping() => {
                thread::sleep(Duration::from_millis(2))
            }
            other => break other,
        }
    };
    let (initial, mut sub) = match opened {
        Ok(x) => x,
        Err(e) => {
            send(&w, &ServerFrame::Response(Response::err(id, &e)));
            return;
        }
    };
    let first = match initial {
        Ok(r) => result_response(id, Ok(r)),
        Err(e) => {
            // Nothing there yet: an empty view that fills in via deltas.
            let mut r = Response::err(id, &e);
            r.as_of = Some(sub.last_delivered());
            r
        }
    };
    if !send(&w, &ServerFrame::Response(first)) {
        return;
    }
    while !s.stopping() {
        match sub.poll_timeout(POLL) {
            Ok(deltas) => {
                for d in deltas {
                    if !send(&w, &ServerFrame::Delta(d)) {
                        return;
                    }
                }
            }
            Err(QueryError::SubscriptionOverflow) => {
                send(&w, &ServerFrame::Overflow(OverflowFrame::new(id)));
                return;
            }
            Err(e) => {
                send(&w, &ServerFrame::Response(Response::err(id, &e)));
                return;
            }
        }
    }
}

fn admin(s: &Shared, id: u64, op: AdminOp) -> Response {
    let m = &s.model;
    let write = !matches!(op, AdminOp::Export { .. });
    if write && !s.master.load(Ordering::Acquire) {
        return Response::err_code(id, "NotMaster", "writes go to the master");
    }
    if write {
        if let Err(e) = m.admit(s.epoch.load(Ordering::Acquire)) {
            return Response::err_code(id, "Fenced", e.to_string());
        }
    }
    let r: Result<Value, (String, String)> = match op {
        AdminOp::Import { snapshot } => import_snapshot(m, &snapshot)
            .map(|c| serde_json::to_value(c).expect("counts serialize"))
            .map_err(|e| ("InvalidSnapshot".into(), e.to_string())),
        AdminOp::Export { include_data } => {
            Ok(serde_json::to_value(export_snapshot(m, include_data)).expect("snapshot serializes"))
        }
        AdminOp::AddObject { object, mutations, geometry } => {
            let up = ObjectUpsert { mutations, geometry, ..ObjectUpsert::default() };
            m.objects
                .upsert_object(&object, up)
                .map(|c| json!({ "rev": c.rev, "seq": c.seq }))
                .map_err(|e| ("InvalidObject".into(), e.to_string()))
        }
        AdminOp::AddEdge { edge } => m
            .graph
            .upsert_edge(edge)
            .map(|u| serde_json::to_value(u).expect("update serializes"))
            .map_err(|e| ("InvalidTransform".into(), e.to_string())),
        AdminOp::PutBlob { data, media_type } => match B64.decode(data.as_bytes()) {
            Ok(bytes) => m
                .blobs
                .put_blob(&bytes, &media_type)
                .map(|b| serde_json::to_value(b).expect("blob ref serializes"))
                .map_err(|e| ("BlobRejected".into(), e.to_string())),
            Err(e) => Err(("MalformedQuery".into(), e.to_string())),
        },
        AdminOp::Replicate { .. } => Err(("MalformedQuery".into(), "replicate must be the only request".into())),
    };
    match r {
        Ok(v) => Response::ok(id, v, Some(m.as_of())),
        Err((code, reason)) => Response::err_code(id, &code, reason),
    }
}

/// Master side of a replication stream.
fn serve_replication(s: &Arc<Shared>, mut reader: TcpStream, writer: Writer, from: AsOf) {
    let sync = s.cfg.replication.mode == ReplicationMode::Sync;
    let m = s.model.clone();
    if sync {
        m.set_gated(true);
    }
    *s.slave_ack.lock() = Some(Instant::now());
    let acked = Arc::new(Mutex::new(from));
    let closed = Arc::new(AtomicBool::new(false));
    {
        let (acked, closed, m, s2) = (acked.clone(), closed.clone(), m.clone(), s.clone());
        s.spawn("rail-repl-acks", move |_| {
            let limit = s2.cfg.query.max_frame_bytes;
            while !s2.stopping() && !closed.load(Ordering::Acquire) {
                match read_frame(&mut reader, limit) {
                    Ok(Some(b)) => {
                        let Ok(a) = serde_json::from_slice::<ReplAck>(&b) else { break };
                        *acked.lock() = a.ack;
                        *s2.slave_ack.lock() = Some(Instant::now());
                        if sync {
                            m.graph.log().publish(a.ack.graph);
                            m.objects.log().publish(a.ack.objects);
                        }
                    }
                    Err(FrameError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    _ => break,
                }
            }
            closed.store(true, Ordering::Release);
        });
    }
    let mut sent = from;
    let mut blob_offset = 0;
    while !s.stopping() && !closed.load(Ordering::Acquire) {
        let blobs: Vec<(BlobRef, String)> =
            m.blobs.journal_since(blob_offset).into_iter().map(|(b, bytes)| (b, B64.encode(&*bytes))).collect();
        blob_offset += blobs.len();
        let mut events: Vec<ChangeEvent> = Vec::new();
        match (m.graph.log().read_committed(sent.graph, 512), m.objects.log().read_committed(sent.objects, 512)) {
            (Ok(g), Ok(o)) => {
                events.extend(g.iter().map(|e| (**e).clone()));
                events.extend(o.iter().map(|e| (**e).clone()));
            }
            _ => {
                log::warn!("replication cursor fell out of retained history");
                break;
            }
        }
        if blobs.is_empty() && events.is_empty() {
            thread::sleep(Duration::from_millis(2));
            continue;
        }
        for e in &events {
            match e.store {
                crate::feed::StoreKind::Graph => sent.graph = e.seq,
                crate::feed::StoreKind::Objects => sent.objects = e.seq,
            }
        }
        let batch = ReplBatch { epoch: s.epoch.load(Ordering::Acquire), blobs, events };
        if write_json(&mut *writer.lock(), &batch).is_err() {
            break;
        }
    }
    closed.store(true, Ordering::Release);
    // Without a slave the master keeps serving with immediate publication.
    m.set_gated(false);
    let _ = writer.lock().shutdown(std::net::Shutdown::Both);
}

/// Slave side: mirror the master, then promote after it stays unreachable.
fn run_slave(s: Arc<Shared>) {
    let master = s.cfg.replication.master.clone();
    let mut last_contact = Instant::now();
    while !s.stopping() {
        match mirror_once(&s, &master) {
            Ok(()) => last_contact = Instant::now(),
            Err(e) => log::debug!("replication from {master}: {e}"),
        }
        if last_contact.elapsed() > s.interval() * 3 {
            let epoch = s.epoch.load(Ordering::Acquire) + 1;
            s.epoch.store(epoch, Ordering::Release);
            log::warn!("master {master} unreachable; promoting at epoch {epoch}");
            if let Err(e) = become_master(&s) {
                log::error!("promotion failed: {e}");
            }
            return;
        }
        thread::sleep(POLL);
    }
}

/// One replication session; returns `Ok` if any batch was received.
fn mirror_once(s: &Shared, master: &str) -> Result<(), io::Error> {
    let stream = TcpStream::connect(master)?;
    stream.set_read_timeout(Some(s.interval()))?;
    let mut w = stream.try_clone()?;
    let m = &s.model;
    let req = Request::admin(
        0,
        AdminOp::Replicate { graph_after: m.graph.head(), objects_after: m.objects.head() },
    );
    write_json(&mut w, &req).map_err(io::Error::other)?;
    let mut r = stream;
    let mut got = false;
    while !s.stopping() {
        let bytes = match read_frame(&mut r, s.cfg.query.max_frame_bytes) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(FrameError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                // Silence: the master is alive but idle only if the socket is.
                if got {
                    continue;
                }
                return Err(e);
            }
            Err(e) => return Err(io::Error::other(e)),
        };
        let batch: ReplBatch = serde_json::from_slice(&bytes).map_err(io::Error::other)?;
        got = true;
        s.epoch.fetch_max(batch.epoch, Ordering::AcqRel);
        for (blob, data) in batch.blobs {
            if let Ok(bytes) = B64.decode(data.as_bytes()) {
                let _ = m.blobs.put_blob(&bytes, &blob.media_type);
            }
        }
        for e in &batch.events {
            let r = match e.store {
                crate::feed::StoreKind::Graph => m.graph.apply_replicated(e).map_err(|e| e.to_string()),
                crate::feed::StoreKind::Objects => m.objects.apply_replicated(e).map_err(|e| e.to_string()),
            };
            r.map_err(io::Error::other)?;
        }
        write_json(&mut w, &ReplAck { ack: m.as_of() }).map_err(io::Error::other)?;
    }
    if got { Ok(()) } else { Err(io::ErrorKind::UnexpectedEof.into()) }
}

/// Blocking consumer-protocol client.
pub struct Client {
    stream: TcpStream,
    next_id: u64,
    limit: usize,
}

impl Client {
    pub fn connect(addr: &str) -> io::Result<Self> {
        Ok(Self { stream: TcpStream::connect(addr)?, next_id: 1, limit: crate::framing::DEFAULT_MAX_FRAME_BYTES })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(t)
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn send(&mut self, req: &Request) -> Result<(), FrameError> {
        write_json(&mut self.stream, req)
    }

    /// Next frame from the server as raw JSON.
    pub fn next_frame(&mut self) -> Result<Option<Value>, FrameError> {
        match read_frame(&mut self.stream, self.limit)? {
            Some(b) => serde_json::from_slice(&b).map(Some).map_err(|e| FrameError::Io(io::Error::other(e))),
            None => Ok(None),
        }
    }

    fn call(&mut self, body: RequestBody, follow: bool) -> Result<Response, FrameError> {
        let id = self.fresh_id();
        self.send(&Request { id, body, follow })?;
        loop {
            let v = self.next_frame()?.ok_or(FrameError::Truncated)?;
            if v.get("id").and_then(Value::as_u64) == Some(id) {
                return serde_json::from_value(v).map_err(|e| FrameError::Io(io::Error::other(e)));
            }
        }
    }

    pub fn query(&mut self, q: Query) -> Result<Response, FrameError> {
        self.call(RequestBody::Query(q), false)
    }

    /// Opens a subscription; further frames arrive via [`Client::next_frame`].
    pub fn follow(&mut self, q: Query) -> Result<Response, FrameError> {
        self.call(RequestBody::Query(q), true)
    }

    pub fn admin(&mut self, op: AdminOp) -> Result<Response, FrameError> {
        self.call(RequestBody::Admin(op), false)
    }
}

/// Listens for announcements on `port` until an endpoint for `role` is
/// known or `timeout` passes.
pub fn discover(bind: &str, port: u16, role: Role, timeout: Duration) -> Result<Announcement, NoEndpointKnown> {
    let Ok(sock) = UdpSocket::bind((bind, port)) else { return Err(NoEndpointKnown(role)) };
    let t0 = Instant::now();
    let mut table = DiscoveryTable::new(timeout.as_micros() as u64);
    let mut buf = vec![0u8; 2048];
    while t0.elapsed() < timeout {
        let _ = sock.set_read_timeout(Some((timeout - t0.elapsed()).max(Duration::from_millis(1))));
        if let Ok((n, _)) = sock.recv_from(&mut buf) {
            if let Ok(a) = decode_announcement(&buf[..n]) {
                table.observe(a, t0.elapsed().as_micros() as u64);
            }
            if let Ok(a) = table.lookup(role, t0.elapsed().as_micros() as u64) {
                return Ok(a.clone());
            }
        }
    }
    Err(NoEndpointKnown(role))
}

/// Sends one provider datagram over UDP.
pub fn send_datagram(target: &str, bytes: &[u8]) -> io::Result<()> {
    let sock = UdpSocket::bind("0.0.0.0:0")?;
    sock.send_to(bytes, target)?;
    Ok(())
}

/// Sends provider messages over the newline-delimited TCP fallback.
pub fn send_tcp_lines(target: &str, messages: &[Vec<u8>]) -> io::Result<()> {
    let mut s = TcpStream::connect(target)?;
    for m in messages {
        s.write_all(m)?;
        s.write_all(b"\n")?;
    }
    s.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FrameId, ObjectId, PathConstraints};
    use crate::geometry::Pose6D;
    use crate::wire::{encode_provider_message, ProviderMessage};

    fn local_cfg(node: &str) -> Config {
        let mut cfg = Config::default();
        cfg.network.bind = "127.0.0.1".into();
        cfg.network.broadcast_addr = "127.0.0.1".into();
        cfg.network.ingest_port = 0;
        cfg.network.query_port = 0;
        cfg.network.discovery_port = 9; // discard
        cfg.network.announce_interval_ms = 100;
        cfg.node.id = node.into();
        cfg
    }

    fn wait_for(mut f: impl FnMut() -> bool) -> bool {
        let t0 = Instant::now();
        while t0.elapsed() < Duration::from_secs(10) {
            if f() {
                return true;
            }
            thread::sleep(Duration::from_millis(10));
        }
        false
    }

    fn msg(seq: u64) -> Vec<u8> {
        let m = ProviderMessage::new("foo", "camera", seq, seq * 1000).with_detection(
            "marker.QR",
            "bar",
            Pose6D::from_translation(1.0, 0.0, 0.0),
            0.01,
            0.001,
        );
        encode_provider_message(&m).unwrap()
    }

    #[test]
    fn ingest_query_and_subscribe_over_sockets() {
        let server = Server::start(local_cfg("n1"), &Role::ALL).unwrap();
        let ingest = server.ingest_addr().unwrap().to_string();
        let query = server.query_addr().unwrap().to_string();
        let mut sub = Client::connect(&query).unwrap();
        let dst = FrameId::new(crate::ingest::provisional_id("marker.QR", "bar").as_str()).unwrap();
        let get = Query::GetTransform { src: FrameId::new("foo").unwrap(), dst, constraints: PathConstraints::default() };
        let first = sub.follow(get.clone()).unwrap();
        assert_eq!(first.error.as_deref(), Some("NoPath"));
        assert_eq!(first.reason.as_deref(), Some("unknown_frame"));
        send_datagram(&ingest, &msg(1)).unwrap();
        let delta = sub.next_frame().unwrap().unwrap();
        assert_eq!(delta["delta"], "entered");
        send_tcp_lines(&ingest, &[msg(2)]).unwrap();
        assert!(wait_for(|| server.model().graph.head() >= 2));
        let mut c = Client::connect(&query).unwrap();
        let r = c.query(get).unwrap();
        assert!(r.ok, "{r:?}");
        let r = c.admin(AdminOp::AddObject { object: ObjectId::new("x").unwrap(), mutations: vec![], geometry: None });
        assert!(r.unwrap().ok);
        server.shutdown();
    }

    #[test]
    fn slave_mirrors_and_takes_over() {
        let master = Server::start(local_cfg("n1"), &Role::ALL).unwrap();
        let mut cfg = local_cfg("n2");
        cfg.replication.master = master.query_addr().unwrap().to_string();
        let slave = Server::start(cfg, &Role::ALL).unwrap();
        assert!(!slave.is_master());
        send_datagram(&master.ingest_addr().unwrap().to_string(), &msg(1)).unwrap();
        assert!(wait_for(|| slave.model().graph.head() == 1 && master.model().graph.log().published() == 1));
        master.shutdown();
        assert!(wait_for(|| slave.is_master()));
        assert_eq!(slave.epoch(), 2);
        assert!(slave.ingest_addr().is_some());
        slave.shutdown();
    }
}
