//! Query abstraction: structured queries split across the graph, objects
//! and blob stores, aggregated into one result, plus follow-up
//! subscriptions that stream deltas against the initial result.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobs::{BlobError, BlobRef, BlobStore};
use crate::feed::{ChangeEvent, FeedError, FeedStream, StoreKind};
use crate::geometry::{distance, intersects_sphere, GeometryPrimitive, Point3, Pose6D};
use crate::graph::{FrameId, GraphState, NoPathReason, ObjectId, PathConstraints, PathError, PathResult};
use crate::model::{AsOf, EnvironmentModel};
use crate::objects::{AttributePredicate, ObjectDocument, ObjectError, ObjectState};

pub const DEFAULT_SUBSCRIPTION_BUFFER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Query {
    GetObject {
        /// `object` on the wire; `id` is the request id.
        #[serde(rename = "object")]
        id: ObjectId,
    },
    FindObjects {
        #[serde(default)]
        predicate: AttributePredicate,
    },
    GetTransform {
        src: FrameId,
        dst: FrameId,
        #[serde(default)]
        constraints: PathConstraints,
    },
    RangeQuery {
        frame: FrameId,
        center: Point3,
        radius: f64,
        #[serde(default)]
        predicate: AttributePredicate,
    },
    GetBlob {
        hash: String,
    },
}

impl Query {
    pub fn name(&self) -> &'static str {
        match self {
            Query::GetObject { .. } => "get_object",
            Query::FindObjects { .. } => "find_objects",
            Query::GetTransform { .. } => "get_transform",
            Query::RangeQuery { .. } => "range_query",
            Query::GetBlob { .. } => "get_blob",
        }
    }

    pub fn followable(&self) -> bool {
        !matches!(self, Query::GetBlob { .. })
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        match self {
            Query::FindObjects { predicate } => predicate.validate().map_err(QueryError::from),
            Query::GetTransform { constraints, .. } => constraints.validate().map_err(QueryError::from),
            Query::RangeQuery { center, radius, predicate, .. } => {
                if !(radius.is_finite() && *radius >= 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(QueryError::MalformedQuery("radius must be finite and >= 0".into()));
                }
                predicate.validate().map_err(QueryError::from)
            }
            Query::GetObject { .. } | Query::GetBlob { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("no path ({})", .0.as_str())]
    NoPath(NoPathReason),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("frame {0} has no graph presence")]
    UnknownFrame(FrameId),
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("stored blob content is corrupt: {0}")]
    CorruptContent(String),
    #[error("subscription buffer overflowed")]
    SubscriptionOverflow,
    #[error("change feed cursor too old")]
    CursorTooOld,
    #[error("query instance failed: {0}")]
    InstanceFault(String),
    /// The store holds commits not yet replicated; retry shortly.
    #[error("store has unreplicated commits")]
    Unsettled,
}

impl QueryError {
    /// Error name used on the consumer protocol.
    pub fn code(&self) -> &'static str {
        match self {
            QueryError::NoPath(_) => "NoPath",
            QueryError::NotFound(_) => "NotFound",
            QueryError::UnknownFrame(_) => "UnknownFrame",
            QueryError::MalformedQuery(_) => "MalformedQuery",
            QueryError::CorruptContent(_) => "CorruptContent",
            QueryError::SubscriptionOverflow => "SubscriptionOverflow",
            QueryError::CursorTooOld => "CursorTooOld",
            QueryError::InstanceFault(_) => "InstanceFault",
            QueryError::Unsettled => "Unsettled",
        }
    }

    pub fn reason(&self) -> String {
        match self {
            QueryError::NoPath(r) => r.as_str().to_owned(),
            other => other.to_string(),
        }
    }

    /// Errors meaning "nothing there yet", which a subscription can wait out.
    fn is_absence(&self) -> bool {
        matches!(self, QueryError::NoPath(_) | QueryError::NotFound(_) | QueryError::UnknownFrame(_))
    }
}

impl From<PathError> for QueryError {
    fn from(e: PathError) -> Self {
        match e {
            PathError::NoPath(r) => QueryError::NoPath(r),
            PathError::InvalidConstraints => QueryError::MalformedQuery(e.to_string()),
        }
    }
}

impl From<ObjectError> for QueryError {
    fn from(e: ObjectError) -> Self {
        match e {
            ObjectError::NotFound(id) => QueryError::NotFound(id.to_string()),
            other => QueryError::MalformedQuery(other.to_string()),
        }
    }
}

impl From<BlobError> for QueryError {
    fn from(e: BlobError) -> Self {
        match e {
            BlobError::NotFound(h) => QueryError::NotFound(h),
            BlobError::CorruptContent(h) => QueryError::CorruptContent(h),
            other => QueryError::MalformedQuery(other.to_string()),
        }
    }
}

impl From<FeedError> for QueryError {
    fn from(_: FeedError) -> Self {
        QueryError::CursorTooOld
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeHit {
    pub id: ObjectId,
    /// The object's frame expressed in the query frame.
    pub pose: Pose6D,
    /// From the query center to the object's frame origin.
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeResult {
    pub hits: Vec<RangeHit>,
    pub excluded_unreachable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobPayload {
    pub blob: BlobRef,
    /// Base64 (standard alphabet).
    pub data: String,
}

impl BlobPayload {
    pub fn bytes(&self) -> Result<Vec<u8>, base64::DecodeError> {
        base64::engine::general_purpose::STANDARD.decode(&self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPayload {
    Object(ObjectDocument),
    Objects(Vec<ObjectDocument>),
    Transform(PathResult),
    Range(RangeResult),
    Blob(BlobPayload),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubStatus {
    pub store: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SubStatus {
    fn ok(store: &str) -> Self {
        Self { store: store.to_owned(), ok: true, error: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub payload: QueryPayload,
    pub status: Vec<SubStatus>,
    pub complete: bool,
    pub as_of: AsOf,
}

/// Objects matching `predicate` whose geometry, placed at its pose relative
/// to `frame`, touches the ball around `center`. Hits are ordered by the
/// distance from `center` to the object's frame origin, then by id.
pub fn range_query(
    graph: &GraphState,
    objects: &ObjectState,
    frame: &FrameId,
    center: Point3,
    radius: f64,
    predicate: &AttributePredicate,
) -> Result<RangeResult, QueryError> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(QueryError::MalformedQuery("radius must be finite and >= 0".into()));
    }
    predicate.validate()?;
    if !graph.has_frame(frame) {
        return Err(QueryError::UnknownFrame(frame.clone()));
    }
    let defaults = PathConstraints::default();
    let mut out = RangeResult::default();
    for doc in objects.find(predicate) {
        let pose = if &doc.id == frame {
            Pose6D::identity()
        } else {
            match graph.best_path(frame, &doc.id, &defaults) {
                Ok(p) => p.pose,
                Err(_) => {
                    out.excluded_unreachable += 1;
                    continue;
                }
            }
        };
        let prim = doc.geometry.unwrap_or(GeometryPrimitive::Point);
        if intersects_sphere(&prim, &pose, center, radius) {
            let d = distance(pose.translation(), center);
            out.hits.push(RangeHit { id: doc.id, pose, distance: d });
        }
    }
    out.hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    Ok(out)
}

/// Evaluates a query against explicit store states.
pub fn evaluate(
    q: &Query,
    graph: &GraphState,
    objects: &ObjectState,
    blobs: Option<&BlobStore>,
) -> Result<(QueryPayload, Vec<SubStatus>), QueryError> {
    q.validate()?;
    match q {
        Query::GetObject { id } => {
            let doc = objects.get(id).cloned().ok_or_else(|| QueryError::NotFound(id.to_string()))?;
            Ok((QueryPayload::Object(doc), vec![SubStatus::ok("objects")]))
        }
        Query::FindObjects { predicate } => {
            Ok((QueryPayload::Objects(objects.find(predicate)), vec![SubStatus::ok("objects")]))
        }
        Query::GetTransform { src, dst, constraints } => {
            let p = graph.best_path(src, dst, constraints)?;
            Ok((QueryPayload::Transform(p), vec![SubStatus::ok("graph")]))
        }
        Query::RangeQuery { frame, center, radius, predicate } => {
            let r = range_query(graph, objects, frame, *center, *radius, predicate)?;
            Ok((QueryPayload::Range(r), vec![SubStatus::ok("objects"), SubStatus::ok("graph")]))
        }
        Query::GetBlob { hash } => {
            let store = blobs.ok_or_else(|| QueryError::MalformedQuery("blob store unavailable".into()))?;
            let blob = store.lookup(hash).ok_or_else(|| QueryError::NotFound(hash.clone()))?;
            let bytes = store.get_blob(hash)?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes.as_slice());
            Ok((QueryPayload::Blob(BlobPayload { blob, data }), vec![SubStatus::ok("blobs")]))
        }
    }
}

/// Serves one request/response query from a consistent snapshot of both
/// stores.
pub fn execute_query(model: &EnvironmentModel, q: &Query) -> Result<QueryResult, QueryError> {
    let snap = model.snapshot();
    let (payload, status) = evaluate(q, &snap.graph, &snap.objects, Some(&model.blobs))?;
    Ok(QueryResult { payload, status, complete: true, as_of: snap.as_of })
}

/// Runs `f` as an isolated query instance: a panic becomes
/// [`QueryError::InstanceFault`] instead of unwinding into the caller.
pub fn run_isolated<R>(f: impl FnOnce() -> Result<R, QueryError>) -> Result<R, QueryError> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Err(QueryError::InstanceFault(msg))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ViewItem {
    Object(ObjectDocument),
    Transform(PathResult),
    Hit(RangeHit),
}

/// A query result as a keyed set: object id for object and range queries,
/// the empty key for the single transform of `get_transform`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultView {
    pub items: BTreeMap<String, ViewItem>,
}

impl ResultView {
    pub fn from_payload(p: &QueryPayload) -> Self {
        let mut items = BTreeMap::new();
        match p {
            QueryPayload::Object(d) => {
                items.insert(d.id.to_string(), ViewItem::Object(d.clone()));
            }
            QueryPayload::Objects(ds) => {
                for d in ds {
                    items.insert(d.id.to_string(), ViewItem::Object(d.clone()));
                }
            }
            QueryPayload::Transform(t) => {
                items.insert(String::new(), ViewItem::Transform(t.clone()));
            }
            QueryPayload::Range(r) => {
                for h in &r.hits {
                    items.insert(h.id.to_string(), ViewItem::Hit(h.clone()));
                }
            }
            QueryPayload::Blob(_) => {}
        }
        Self { items }
    }

    /// Absence errors map to the empty view.
    pub fn from_outcome(r: &Result<QueryPayload, QueryError>) -> Result<Self, QueryError> {
        match r {
            Ok(p) => Ok(Self::from_payload(p)),
            Err(e) if e.is_absence() => Ok(Self::default()),
            Err(e) => Err(e.clone()),
        }
    }

    pub fn apply(&mut self, d: &Delta) {
        match d.delta {
            DeltaKind::Entered | DeltaKind::Changed => {
                self.items.insert(d.key.clone(), d.payload.clone());
            }
            DeltaKind::Left => {
                self.items.remove(&d.key);
            }
        }
    }

    fn diff(&self, next: &ResultView) -> Vec<(DeltaKind, String, ViewItem)> {
        let mut out = Vec::new();
        for (k, old) in &self.items {
            match next.items.get(k) {
                None => out.push((DeltaKind::Left, k.clone(), old.clone())),
                Some(new) if new != old => out.push((DeltaKind::Changed, k.clone(), new.clone())),
                Some(_) => {}
            }
        }
        for (k, new) in &next.items {
            if !self.items.contains_key(k) {
                out.push((DeltaKind::Entered, k.clone(), new.clone()));
            }
        }
        out.sort_by(|a, b| a.1.cmp(&b.1));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    Entered,
    Left,
    Changed,
}

/// Commit that triggered a delta; exactly one side is set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqPair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub sub: u64,
    pub seq: SeqPair,
    pub delta: DeltaKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub key: String,
    pub payload: ViewItem,
}

/// A followed query. Keeps private replicas of both stores, advanced one
/// event at a time from the change feeds, and re-evaluates the query after
/// each event to emit exact deltas.
#[derive(Debug)]
pub struct Subscription {
    id: u64,
    query: Query,
    graph: GraphState,
    objects: ObjectState,
    graph_feed: FeedStream,
    objects_feed: FeedStream,
    view: ResultView,
    buffer: usize,
    closed: bool,
}

/// Opens a subscription. The initial outcome may be an absence error
/// (`NotFound`, `NoPath`, `UnknownFrame`); the stream then reports the
/// result once it appears.
pub fn open_subscription(
    model: &EnvironmentModel,
    id: u64,
    query: Query,
    buffer: usize,
) -> Result<(Result<QueryResult, QueryError>, Subscription), QueryError> {
    if !query.followable() {
        return Err(QueryError::MalformedQuery(format!("{} cannot be followed", query.name())));
    }
    query.validate()?;
    let snap = model.snapshot();
    let graph = snap.graph.clone();
    let objects = snap.objects.clone();
    let as_of = snap.as_of;
    drop(snap);
    // A view must only reflect commits its stream could have delivered.
    if as_of.graph > model.graph.log().published() || as_of.objects > model.objects.log().published() {
        return Err(QueryError::Unsettled);
    }
    let graph_feed = model.graph.changes(as_of.graph)?;
    let objects_feed = model.objects.changes(as_of.objects)?;
    let outcome = evaluate(&query, &graph, &objects, None);
    let view = ResultView::from_outcome(&outcome.clone().map(|(p, _)| p))?;
    let initial = outcome.map(|(payload, status)| QueryResult { payload, status, complete: true, as_of });
    let sub = Subscription {
        id,
        query,
        graph,
        objects,
        graph_feed,
        objects_feed,
        view,
        buffer: buffer.max(1),
        closed: false,
    };
    Ok((initial, sub))
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    /// Cursors of the last event folded into the subscription.
    pub fn last_delivered(&self) -> AsOf {
        AsOf { graph: self.graph_feed.cursor(), objects: self.objects_feed.cursor() }
    }

    pub fn view(&self) -> &ResultView {
        &self.view
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn backlog(&self) -> u64 {
        self.graph_feed.backlog() + self.objects_feed.backlog()
    }

    fn fold(&mut self, ev: &ChangeEvent) -> Result<Vec<Delta>, QueryError> {
        let seq = match ev.store {
            StoreKind::Graph => {
                self.graph.apply_event(ev).map_err(|e| QueryError::InstanceFault(e.to_string()))?;
                if matches!(self.query, Query::GetObject { .. } | Query::FindObjects { .. }) {
                    return Ok(Vec::new());
                }
                SeqPair { graph: Some(ev.seq), objects: None }
            }
            StoreKind::Objects => {
                self.objects.apply_event(ev).map_err(|e| QueryError::InstanceFault(e.to_string()))?;
                if matches!(self.query, Query::GetTransform { .. }) {
                    return Ok(Vec::new());
                }
                SeqPair { graph: None, objects: Some(ev.seq) }
            }
        };
        let outcome = evaluate(&self.query, &self.graph, &self.objects, None).map(|(p, _)| p);
        let next = ResultView::from_outcome(&outcome)?;
        let deltas = self
            .view
            .diff(&next)
            .into_iter()
            .map(|(delta, key, payload)| Delta { sub: self.id, seq, delta, key, payload })
            .collect();
        self.view = next;
        Ok(deltas)
    }

    /// Consumes every event published since the last poll. Fails with
    /// `SubscriptionOverflow` (and closes) once more than the buffer size of
    /// events has piled up unconsumed.
    pub fn poll(&mut self) -> Result<Vec<Delta>, QueryError> {
        if self.closed {
            return Err(QueryError::SubscriptionOverflow);
        }
        if self.backlog() > self.buffer as u64 {
            self.closed = true;
            return Err(QueryError::SubscriptionOverflow);
        }
        let mut out = Vec::new();
        for ev in self.graph_feed.drain()? {
            out.extend(self.fold(&ev)?);
        }
        for ev in self.objects_feed.drain()? {
            out.extend(self.fold(&ev)?);
        }
        Ok(out)
    }

    /// Like [`Subscription::poll`] but waits up to `timeout` for the first
    /// event when none is pending.
    pub fn poll_timeout(&mut self, timeout: std::time::Duration) -> Result<Vec<Delta>, QueryError> {
        let deltas = self.poll()?;
        if !deltas.is_empty() || self.backlog() > 0 {
            return Ok(deltas);
        }
        let deadline = std::time::Instant::now() + timeout;
        while std::time::Instant::now() < deadline {
            let step = std::time::Duration::from_millis(5).min(deadline - std::time::Instant::now());
            if let Some(ev) = self.graph_feed.next_timeout(step)? {
                let mut out = self.fold(&ev)?;
                out.extend(self.poll()?);
                if !out.is_empty() {
                    return Ok(out);
                }
            }
            if self.objects_feed.backlog() > 0 {
                let out = self.poll()?;
                if !out.is_empty() {
                    return Ok(out);
                }
            }
        }
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TransformObservation;
    use crate::objects::ObjectUpsert;

    fn fid(s: &str) -> FrameId {
        FrameId::new(s).unwrap()
    }

    fn edge(m: &EnvironmentModel, p: &str, c: &str, x: f64, sigma: f64, res: f64, t: u64) {
        m.graph
            .upsert_edge(TransformObservation {
                parent: fid(p),
                child: fid(c),
                provider: "cal".into(),
                pose: Pose6D::from_translation(x, 0.0, 0.0),
                sigma,
                resolution: res,
                time_us: t,
                seq: t,
            })
            .unwrap();
    }

    fn triangle() -> EnvironmentModel {
        let m = EnvironmentModel::default();
        edge(&m, "A", "B", 1.0, 0.01, 0.001, 1);
        edge(&m, "B", "C", 1.0, 0.02, 0.005, 1);
        edge(&m, "A", "C", 2.0, 0.05, 0.01, 1);
        m
    }

    #[test]
    fn get_transform_prefers_low_sigma() {
        let m = triangle();
        let q = Query::GetTransform { src: fid("A"), dst: fid("C"), constraints: Default::default() };
        let r = execute_query(&m, &q).unwrap();
        let QueryPayload::Transform(p) = r.payload else { panic!() };
        assert_eq!(p.hops, 2);
        assert!((p.sigma - (0.01f64.powi(2) + 0.02f64.powi(2)).sqrt()).abs() < 1e-12);
        assert_eq!(r.as_of.graph, 3);
    }

    #[test]
    fn request_wire_shape_parses() {
        let q: Query =
            serde_json::from_str(r#"{"op":"get_transform","src":"A","dst":"C","constraints":{"max_hops":4}}"#).unwrap();
        assert_eq!(
            q,
            Query::GetTransform { src: fid("A"), dst: fid("C"), constraints: PathConstraints::default().with_max_hops(4) }
        );
        assert!(serde_json::from_str::<Query>(r#"{"op":"get_object"}"#).is_err());
    }

    #[test]
    fn range_query_contract() {
        let m = triangle();
        m.objects.upsert_object(&fid("C"), ObjectUpsert::new().set("type", "rack")).unwrap();
        m.objects.upsert_object(&fid("island"), ObjectUpsert::new().set("type", "rack")).unwrap();
        let r = range_query(&m.graph.read(), &m.objects.read(), &fid("A"), [2.0, 0.0, 0.0], 0.0, &AttributePredicate::all())
            .unwrap();
        assert_eq!(r.hits.len(), 1);
        assert_eq!(r.hits[0].id, fid("C"));
        assert!(r.hits[0].distance < 1e-12);
        assert_eq!(r.excluded_unreachable, 1);
        let err = range_query(&m.graph.read(), &m.objects.read(), &fid("nowhere"), [0.0; 3], 1.0, &AttributePredicate::all());
        assert_eq!(err, Err(QueryError::UnknownFrame(fid("nowhere"))));
    }

    #[test]
    fn blob_round_trip() {
        let m = EnvironmentModel::default();
        let r = m.blobs.put_blob(b"solid", "model/step").unwrap();
        let out = execute_query(&m, &Query::GetBlob { hash: r.hash.clone() }).unwrap();
        let QueryPayload::Blob(b) = out.payload else { panic!() };
        assert_eq!(b.bytes().unwrap(), b"solid");
        assert_eq!(
            execute_query(&m, &Query::GetBlob { hash: "00".into() }).unwrap_err().code(),
            "NotFound"
        );
    }

    #[test]
    fn find_subscription_reports_entered_and_left() {
        let m = EnvironmentModel::default();
        let q = Query::FindObjects { predicate: AttributePredicate::eq("type", "AGV") };
        let (init, mut sub) = open_subscription(&m, 7, q, 100).unwrap();
        assert_eq!(init.unwrap().payload, QueryPayload::Objects(vec![]));
        m.objects.upsert_object(&fid("agv1"), ObjectUpsert::new().set("type", "AGV")).unwrap();
        m.objects.upsert_object(&fid("box"), ObjectUpsert::new().set("type", "box")).unwrap();
        let d = sub.poll().unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].delta, d[0].key.as_str(), d[0].seq.objects), (DeltaKind::Entered, "agv1", Some(1)));
        m.objects.delete_object(&fid("agv1")).unwrap();
        assert_eq!(sub.poll().unwrap()[0].delta, DeltaKind::Left);
    }

    #[test]
    fn transform_subscription_reports_better_path() {
        let m = EnvironmentModel::default();
        edge(&m, "A", "B", 1.0, 0.05, 0.01, 1);
        let q = Query::GetTransform { src: fid("A"), dst: fid("B"), constraints: Default::default() };
        let (_, mut sub) = open_subscription(&m, 1, q, 100).unwrap();
        edge(&m, "B", "X", 1.0, 0.05, 0.01, 2);
        assert!(sub.poll().unwrap().is_empty());
        m.graph
            .upsert_edge(TransformObservation {
                parent: fid("A"),
                child: fid("B"),
                provider: "laser".into(),
                pose: Pose6D::from_translation(1.0, 0.0, 0.0),
                sigma: 0.001,
                resolution: 0.001,
                time_us: 3,
                seq: 1,
            })
            .unwrap();
        let d = sub.poll().unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].delta, DeltaKind::Changed);
        let ViewItem::Transform(p) = &d[0].payload else { panic!() };
        assert_eq!(p.sigma, 0.001);
    }

    #[test]
    fn overflow_closes_stream() {
        let m = EnvironmentModel::default();
        let (_, mut sub) = open_subscription(&m, 1, Query::FindObjects { predicate: Default::default() }, 5).unwrap();
        for i in 0..6 {
            m.objects.upsert_object(&fid("o"), ObjectUpsert::new().set("i", i)).unwrap();
        }
        assert_eq!(sub.poll(), Err(QueryError::SubscriptionOverflow));
        assert!(sub.is_closed());
    }

    #[test]
    fn blob_queries_cannot_be_followed() {
        let m = EnvironmentModel::default();
        assert!(open_subscription(&m, 1, Query::GetBlob { hash: "x".into() }, 5).is_err());
    }

    #[test]
    fn isolated_instance_contains_panics() {
        let r: Result<(), QueryError> = run_isolated(|| panic!("boom"));
        assert_eq!(r, Err(QueryError::InstanceFault("boom".into())));
    }
}
