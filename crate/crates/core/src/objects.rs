//! The objects database: a document store keyed by [`ObjectId`] holding
//! arbitrary attribute trees, with an equality index on configured paths and
//! a change feed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::blobs::BlobRef;
use crate::feed::{ChangeEvent, ChangeLog, ChangePayload, FeedError, FeedStream, StoreKind};
use crate::geometry::{GeometryError, GeometryPrimitive};
use crate::graph::ObjectId;

/// Attribute marking an auto-created placeholder object.
pub const PROVISIONAL_SOURCE_ATTR: &str = "rail.provisional_source";

/// Index patterns used when none are configured.
pub fn default_index_paths() -> Vec<String> {
    vec!["marker.*.id".to_string()]
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectError {
    #[error("object {0} not found")]
    NotFound(ObjectId),
    #[error("invalid attribute path {0:?}")]
    InvalidPath(String),
    #[error("cannot set {path:?}: {blocking:?} holds a non-map value")]
    TypeClash { path: String, blocking: String },
    #[error("invalid predicate: {0}")]
    InvalidPredicate(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(#[from] GeometryError),
    #[error("provisional objects must carry attribute {PROVISIONAL_SOURCE_ATTR}")]
    MissingProvisionalSource,
    #[error("replicated event out of order: expected seq {expected}, got {got}")]
    ReplicationGap { expected: u64, got: u64 },
    #[error("event does not belong to the objects store")]
    ForeignEvent,
}

/// Dotted attribute path such as `marker.QR.id`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AttrPath(Vec<String>);

impl AttrPath {
    pub fn parse(path: &str) -> Result<Self, ObjectError> {
        let segments: Vec<String> = path.split('.').map(str::to_owned).collect();
        if segments.iter().any(String::is_empty) {
            return Err(ObjectError::InvalidPath(path.to_owned()));
        }
        Ok(Self(segments))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    pub fn dotted(&self) -> String {
        self.0.join(".")
    }

    /// `*` in a pattern matches exactly one segment.
    pub fn matches_pattern(&self, pattern: &[String]) -> bool {
        self.0.len() == pattern.len() && self.0.iter().zip(pattern).all(|(s, p)| p == "*" || s == p)
    }
}

pub fn lookup<'a>(attrs: &'a Map<String, Value>, path: &AttrPath) -> Option<&'a Value> {
    let (last, parents) = path.0.split_last()?;
    let mut map = attrs;
    for seg in parents {
        map = map.get(seg)?.as_object()?;
    }
    map.get(last)
}

fn set_path(attrs: &mut Map<String, Value>, path: &AttrPath, value: Value) -> Result<(), ObjectError> {
    let (last, parents) = path.0.split_last().expect("parsed paths are non-empty");
    let mut map = attrs;
    for (i, seg) in parents.iter().enumerate() {
        let slot = map.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
        map = match slot {
            Value::Object(m) => m,
            _ => {
                return Err(ObjectError::TypeClash {
                    path: path.dotted(),
                    blocking: path.0[..=i].join("."),
                })
            }
        };
    }
    map.insert(last.clone(), value);
    Ok(())
}

fn delete_path(attrs: &mut Map<String, Value>, path: &AttrPath) {
    let (last, parents) = path.0.split_last().expect("parsed paths are non-empty");
    let mut map = attrs;
    for seg in parents {
        match map.get_mut(seg) {
            Some(Value::Object(m)) => map = m,
            _ => return,
        }
    }
    map.remove(last);
}

/// Visits every leaf (non-map value) with its path.
fn for_each_leaf(attrs: &Map<String, Value>, prefix: &mut Vec<String>, f: &mut impl FnMut(&[String], &Value)) {
    for (k, v) in attrs {
        prefix.push(k.clone());
        match v {
            Value::Object(m) => for_each_leaf(m, prefix, f),
            other => f(prefix, other),
        }
        prefix.pop();
    }
}

/// Equality key under which `1` and `1.0` coincide.
pub fn canonical_value_key(v: &Value) -> String {
    fn normalize(v: &Value) -> Value {
        match v {
            Value::Number(n) => n
                .as_f64()
                .and_then(serde_json::Number::from_f64)
                .map(Value::Number)
                .unwrap_or_else(|| v.clone()),
            Value::Array(a) => Value::Array(a.iter().map(normalize).collect()),
            Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), normalize(v))).collect()),
            other => other.clone(),
        }
    }
    normalize(v).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectDocument {
    pub id: ObjectId,
    pub attributes: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryPrimitive>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub blobs: BTreeMap<String, BlobRef>,
    pub rev: u64,
    #[serde(default)]
    pub provisional: bool,
}

impl ObjectDocument {
    pub fn new(id: ObjectId) -> Self {
        Self {
            id,
            attributes: Map::new(),
            geometry: None,
            blobs: BTreeMap::new(),
            rev: 0,
            provisional: false,
        }
    }

    pub fn get(&self, path: &str) -> Option<&Value> {
        AttrPath::parse(path).ok().and_then(|p| lookup(&self.attributes, &p))
    }

    /// Content equality ignoring the revision.
    pub fn same_content(&self, other: &ObjectDocument) -> bool {
        self.id == other.id
            && self.attributes == other.attributes
            && self.geometry == other.geometry
            && self.blobs == other.blobs
            && self.provisional == other.provisional
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AttributeMutation {
    Set { path: String, value: Value },
    Delete { path: String },
}

impl AttributeMutation {
    pub fn set(path: impl Into<String>, value: impl Into<Value>) -> Self {
        AttributeMutation::Set { path: path.into(), value: value.into() }
    }

    pub fn delete(path: impl Into<String>) -> Self {
        AttributeMutation::Delete { path: path.into() }
    }

    fn path(&self) -> &str {
        match self {
            AttributeMutation::Set { path, .. } | AttributeMutation::Delete { path } => path,
        }
    }
}

/// One upsert call: path-level mutations plus optional geometry, blob
/// references and provisional flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectUpsert {
    pub mutations: Vec<AttributeMutation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryPrimitive>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub blobs: BTreeMap<String, BlobRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provisional: Option<bool>,
}

impl ObjectUpsert {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, path: impl Into<String>, value: impl Into<Value>) -> Self {
        self.mutations.push(AttributeMutation::set(path, value));
        self
    }

    pub fn delete(mut self, path: impl Into<String>) -> Self {
        self.mutations.push(AttributeMutation::delete(path));
        self
    }

    pub fn geometry(mut self, g: GeometryPrimitive) -> Self {
        self.geometry = Some(g);
        self
    }

    pub fn blob(mut self, role: impl Into<String>, r: BlobRef) -> Self {
        self.blobs.insert(role.into(), r);
        self
    }

    pub fn provisional(mut self, p: bool) -> Self {
        self.provisional = Some(p);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseOp {
    Eq,
    Exists,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub path: String,
    pub op: ClauseOp,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub value: Value,
}

/// Conjunction of clauses; empty matches everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributePredicate {
    pub clauses: Vec<Clause>,
}

impl AttributePredicate {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn eq(path: impl Into<String>, value: impl Into<Value>) -> Self {
        Self::all().and(path, ClauseOp::Eq, value)
    }

    pub fn and(mut self, path: impl Into<String>, op: ClauseOp, value: impl Into<Value>) -> Self {
        self.clauses.push(Clause { path: path.into(), op, value: value.into() });
        self
    }

    pub fn validate(&self) -> Result<(), ObjectError> {
        for c in &self.clauses {
            AttrPath::parse(&c.path)?;
            match c.op {
                ClauseOp::Lt | ClauseOp::Le | ClauseOp::Gt | ClauseOp::Ge if !c.value.is_number() => {
                    return Err(ObjectError::InvalidPredicate(format!(
                        "{:?} on {:?} requires a numeric value",
                        c.op, c.path
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn matches(&self, doc: &ObjectDocument) -> bool {
        self.clauses.iter().all(|c| clause_matches(c, doc))
    }
}

fn clause_matches(c: &Clause, doc: &ObjectDocument) -> bool {
    let Some(actual) = doc.get(&c.path) else {
        return false;
    };
    match c.op {
        ClauseOp::Exists => true,
        ClauseOp::Eq => canonical_value_key(actual) == canonical_value_key(&c.value),
        op => {
            let (Some(a), Some(b)) = (actual.as_f64(), c.value.as_f64()) else {
                return false;
            };
            match op {
                ClauseOp::Lt => a < b,
                ClauseOp::Le => a <= b,
                ClauseOp::Gt => a > b,
                ClauseOp::Ge => a >= b,
                ClauseOp::Eq | ClauseOp::Exists => unreachable!(),
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct EqualityIndex {
    patterns: Vec<Vec<String>>,
    entries: BTreeMap<(String, String), BTreeSet<ObjectId>>,
}

impl EqualityIndex {
    fn new(patterns: &[String]) -> Self {
        Self {
            patterns: patterns.iter().map(|p| p.split('.').map(str::to_owned).collect()).collect(),
            entries: BTreeMap::new(),
        }
    }

    fn covers(&self, path: &AttrPath) -> bool {
        self.patterns.iter().any(|p| path.matches_pattern(p))
    }

    fn keys_of(&self, doc: &ObjectDocument) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for_each_leaf(&doc.attributes, &mut Vec::new(), &mut |segs, v| {
            if self.patterns.iter().any(|p| AttrPath(segs.to_vec()).matches_pattern(p)) {
                out.push((segs.join("."), canonical_value_key(v)));
            }
        });
        out
    }

    fn insert(&mut self, doc: &ObjectDocument) {
        for key in self.keys_of(doc) {
            self.entries.entry(key).or_default().insert(doc.id.clone());
        }
    }

    fn remove(&mut self, doc: &ObjectDocument) {
        for key in self.keys_of(doc) {
            if let Some(set) = self.entries.get_mut(&key) {
                set.remove(&doc.id);
                if set.is_empty() {
                    self.entries.remove(&key);
                }
            }
        }
    }
}

/// Pure document-store contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjectState {
    docs: BTreeMap<ObjectId, ObjectDocument>,
    /// Highest revision ever issued per id, surviving deletes.
    last_rev: BTreeMap<ObjectId, u64>,
    index: EqualityIndex,
}

impl ObjectState {
    pub fn new(index_paths: &[String]) -> Self {
        Self {
            docs: BTreeMap::new(),
            last_rev: BTreeMap::new(),
            index: EqualityIndex::new(index_paths),
        }
    }

    pub fn get(&self, id: &ObjectId) -> Option<&ObjectDocument> {
        self.docs.get(id)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> impl Iterator<Item = &ObjectDocument> {
        self.docs.values()
    }

    /// Documents satisfying `p`, ascending by id. Equality clauses on
    /// indexed paths narrow the candidate set first.
    pub fn find(&self, p: &AttributePredicate) -> Vec<ObjectDocument> {
        let mut candidates: Option<BTreeSet<&ObjectId>> = None;
        for c in p.clauses.iter().filter(|c| c.op == ClauseOp::Eq) {
            let Ok(path) = AttrPath::parse(&c.path) else { continue };
            if !self.index.covers(&path) {
                continue;
            }
            let hits: BTreeSet<&ObjectId> = self
                .index
                .entries
                .get(&(path.dotted(), canonical_value_key(&c.value)))
                .map(|s| s.iter().collect())
                .unwrap_or_default();
            candidates = Some(match candidates {
                None => hits,
                Some(prev) => prev.intersection(&hits).copied().collect(),
            });
        }
        match candidates {
            Some(ids) => ids
                .into_iter()
                .filter_map(|id| self.docs.get(id))
                .filter(|d| p.matches(d))
                .cloned()
                .collect(),
            None => self.docs.values().filter(|d| p.matches(d)).cloned().collect(),
        }
    }

    fn next_rev(&self, id: &ObjectId) -> u64 {
        self.last_rev.get(id).copied().unwrap_or(0) + 1
    }

    /// Computes the post-state of an upsert without committing it.
    fn prepare(&self, id: &ObjectId, up: &ObjectUpsert) -> Result<ObjectDocument, ObjectError> {
        let mut doc = self.docs.get(id).cloned().unwrap_or_else(|| ObjectDocument::new(id.clone()));
        for m in &up.mutations {
            let path = AttrPath::parse(m.path())?;
            match m {
                AttributeMutation::Set { value, .. } => set_path(&mut doc.attributes, &path, value.clone())?,
                AttributeMutation::Delete { .. } => delete_path(&mut doc.attributes, &path),
            }
        }
        if let Some(g) = up.geometry {
            g.validate()?;
            doc.geometry = Some(g);
        }
        for (role, r) in &up.blobs {
            doc.blobs.insert(role.clone(), r.clone());
        }
        if let Some(p) = up.provisional {
            doc.provisional = p;
        }
        if doc.provisional && doc.get(PROVISIONAL_SOURCE_ATTR).is_none() {
            return Err(ObjectError::MissingProvisionalSource);
        }
        doc.rev = self.next_rev(id);
        Ok(doc)
    }

    fn commit(&mut self, doc: ObjectDocument) -> Option<ObjectDocument> {
        let pre = self.docs.remove(&doc.id);
        if let Some(p) = &pre {
            self.index.remove(p);
        }
        self.index.insert(&doc);
        self.last_rev.insert(doc.id.clone(), doc.rev);
        self.docs.insert(doc.id.clone(), doc);
        pre
    }

    fn remove(&mut self, id: &ObjectId) -> Option<ObjectDocument> {
        let pre = self.docs.remove(id)?;
        self.index.remove(&pre);
        Some(pre)
    }

    pub fn apply_event(&mut self, event: &ChangeEvent) -> Result<(), ObjectError> {
        match &event.payload {
            ChangePayload::ObjectUpsert { post, .. } => {
                self.commit((**post).clone());
                Ok(())
            }
            ChangePayload::ObjectDelete { pre } => {
                self.remove(&pre.id);
                Ok(())
            }
            _ => Err(ObjectError::ForeignEvent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCommit {
    pub rev: u64,
    pub seq: u64,
}

#[derive(Debug)]
pub struct ObjectStore {
    state: RwLock<ObjectState>,
    log: Arc<ChangeLog>,
    queries: AtomicU64,
}

impl Default for ObjectStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::with_config(&default_index_paths(), crate::feed::DEFAULT_RETENTION)
    }

    pub fn with_config(index_paths: &[String], retention: usize) -> Self {
        Self {
            state: RwLock::new(ObjectState::new(index_paths)),
            log: Arc::new(ChangeLog::new(StoreKind::Objects, retention)),
            queries: AtomicU64::new(0),
        }
    }

    pub fn log(&self) -> &Arc<ChangeLog> {
        &self.log
    }

    pub fn upsert_object(&self, id: &ObjectId, up: ObjectUpsert) -> Result<ObjectCommit, ObjectError> {
        let mut state = self.state.write();
        let doc = state.prepare(id, &up)?;
        let rev = doc.rev;
        let pre = state.commit(doc.clone());
        let seq = self.log.append(ChangePayload::ObjectUpsert {
            pre: pre.map(Box::new),
            post: Box::new(doc),
        });
        Ok(ObjectCommit { rev, seq })
    }

    /// Replaces a document's content wholesale, keeping at least `doc.rev`.
    /// No-op (returns `None`) when the stored content is already identical.
    pub fn put_document(&self, mut doc: ObjectDocument) -> Result<Option<ObjectCommit>, ObjectError> {
        if let Some(g) = &doc.geometry {
            g.validate()?;
        }
        if doc.provisional && doc.get(PROVISIONAL_SOURCE_ATTR).is_none() {
            return Err(ObjectError::MissingProvisionalSource);
        }
        let mut state = self.state.write();
        if state.docs.get(&doc.id).is_some_and(|cur| cur.same_content(&doc)) {
            return Ok(None);
        }
        doc.rev = doc.rev.max(state.next_rev(&doc.id));
        let rev = doc.rev;
        let pre = state.commit(doc.clone());
        let seq = self.log.append(ChangePayload::ObjectUpsert {
            pre: pre.map(Box::new),
            post: Box::new(doc),
        });
        Ok(Some(ObjectCommit { rev, seq }))
    }

    pub fn get_object(&self, id: &ObjectId) -> Result<ObjectDocument, ObjectError> {
        self.state.read().get(id).cloned().ok_or_else(|| ObjectError::NotFound(id.clone()))
    }

    pub fn find_objects(&self, p: &AttributePredicate) -> Result<Vec<ObjectDocument>, ObjectError> {
        Ok(self.find_objects_at(p)?.0)
    }

    /// Like [`ObjectStore::find_objects`], also returning the commit cursor
    /// the result reflects.
    pub fn find_objects_at(&self, p: &AttributePredicate) -> Result<(Vec<ObjectDocument>, u64), ObjectError> {
        p.validate()?;
        self.queries.fetch_add(1, Ordering::Relaxed);
        let state = self.state.read();
        Ok((state.find(p), self.log.head()))
    }

    /// Number of `find_objects` calls served so far.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    /// Removes a document, returning the revision it held. Graph frames of
    /// the same id are untouched.
    pub fn delete_object(&self, id: &ObjectId) -> Result<ObjectCommit, ObjectError> {
        let mut state = self.state.write();
        let pre = state.remove(id).ok_or_else(|| ObjectError::NotFound(id.clone()))?;
        let rev = pre.rev;
        let seq = self.log.append(ChangePayload::ObjectDelete { pre: Box::new(pre) });
        Ok(ObjectCommit { rev, seq })
    }

    pub fn read(&self) -> RwLockReadGuard<'_, ObjectState> {
        self.state.read()
    }

    pub fn head(&self) -> u64 {
        self.log.head()
    }

    pub fn changes(&self, cursor: u64) -> Result<FeedStream, FeedError> {
        FeedStream::open(self.log.clone(), cursor)
    }

    /// Change feed restricted to events relevant to `filter`: upserts whose
    /// post-state matches, deletes whose pre-state matched.
    pub fn object_changes(
        &self,
        cursor: u64,
        filter: Option<AttributePredicate>,
    ) -> Result<ObjectFeed, FeedError> {
        Ok(ObjectFeed { inner: self.changes(cursor)?, filter })
    }

    pub fn apply_replicated(&self, event: &ChangeEvent) -> Result<(), ObjectError> {
        if event.store != StoreKind::Objects {
            return Err(ObjectError::ForeignEvent);
        }
        let mut state = self.state.write();
        let expected = self.log.head() + 1;
        if event.seq != expected {
            return Err(ObjectError::ReplicationGap { expected, got: event.seq });
        }
        state.apply_event(event)?;
        self.log
            .append_replicated(event)
            .map_err(|head| ObjectError::ReplicationGap { expected: head + 1, got: event.seq })
    }
}

#[derive(Debug, Clone)]
pub struct ObjectFeed {
    inner: FeedStream,
    filter: Option<AttributePredicate>,
}

impl ObjectFeed {
    pub fn cursor(&self) -> u64 {
        self.inner.cursor()
    }

    fn passes(&self, ev: &ChangeEvent) -> bool {
        let Some(f) = &self.filter else { return true };
        match &ev.payload {
            ChangePayload::ObjectUpsert { post, .. } => f.matches(post),
            ChangePayload::ObjectDelete { pre } => f.matches(pre),
            _ => false,
        }
    }

    pub fn drain(&mut self) -> Result<Vec<Arc<ChangeEvent>>, FeedError> {
        let batch = self.inner.drain()?;
        Ok(batch.into_iter().filter(|e| self.passes(e)).collect())
    }

    pub fn next_timeout(&mut self, timeout: std::time::Duration) -> Result<Option<Arc<ChangeEvent>>, FeedError> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            match self.inner.next_timeout(left)? {
                Some(ev) if self.passes(&ev) => return Ok(Some(ev)),
                Some(_) => continue,
                None => return Ok(None),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn oid(s: &str) -> ObjectId {
        ObjectId::new(s).unwrap()
    }

    #[test]
    fn first_upsert_creates_rev_1() {
        let s = ObjectStore::new();
        let c = s.upsert_object(&oid("agv7"), ObjectUpsert::new().set("name", "AGV-7")).unwrap();
        assert_eq!(c.rev, 1);
        let d = s.get_object(&oid("agv7")).unwrap();
        assert_eq!(d.rev, 1);
        assert_eq!(d.get("name"), Some(&json!("AGV-7")));
    }

    #[test]
    fn identical_upserts_bump_rev_only() {
        let s = ObjectStore::new();
        let up = ObjectUpsert::new().set("name", "AGV-7");
        s.upsert_object(&oid("a"), up.clone()).unwrap();
        let c = s.upsert_object(&oid("a"), up).unwrap();
        assert_eq!(c.rev, 2);
        assert_eq!(s.get_object(&oid("a")).unwrap().get("name"), Some(&json!("AGV-7")));
    }

    #[test]
    fn marker_lookup_by_dotted_path() {
        let s = ObjectStore::new();
        s.upsert_object(&oid("bar-obj"), ObjectUpsert::new().set("marker.QR.id", "bar")).unwrap();
        s.upsert_object(&oid("other"), ObjectUpsert::new().set("marker.QR.id", "baz")).unwrap();
        let hits = s.find_objects(&AttributePredicate::eq("marker.QR.id", "bar")).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, oid("bar-obj"));
    }

    #[test]
    fn invalid_path_and_type_clash() {
        let s = ObjectStore::new();
        assert!(matches!(
            s.upsert_object(&oid("a"), ObjectUpsert::new().set("a..b", 1)),
            Err(ObjectError::InvalidPath(_))
        ));
        s.upsert_object(&oid("a"), ObjectUpsert::new().set("x", 1)).unwrap();
        assert!(matches!(
            s.upsert_object(&oid("a"), ObjectUpsert::new().set("x.y", 2)),
            Err(ObjectError::TypeClash { .. })
        ));
        // A failed call commits nothing.
        assert_eq!(s.get_object(&oid("a")).unwrap().rev, 1);
        assert_eq!(s.head(), 1);
    }

    #[test]
    fn delete_mutation_and_missing_get() {
        let s = ObjectStore::new();
        s.upsert_object(&oid("a"), ObjectUpsert::new().set("x.y", 1).set("x.z", 2)).unwrap();
        s.upsert_object(&oid("a"), ObjectUpsert::new().delete("x.y").delete("nope.nope")).unwrap();
        let d = s.get_object(&oid("a")).unwrap();
        assert_eq!(d.attributes, json!({"x": {"z": 2}}).as_object().unwrap().clone());
        assert!(matches!(s.get_object(&oid("zzz")), Err(ObjectError::NotFound(_))));
    }

    #[test]
    fn empty_predicate_returns_all_sorted() {
        let s = ObjectStore::new();
        for id in ["c", "a", "b"] {
            s.upsert_object(&oid(id), ObjectUpsert::new().set("k", id)).unwrap();
        }
        let ids: Vec<String> = s
            .find_objects(&AttributePredicate::all())
            .unwrap()
            .into_iter()
            .map(|d| d.id.to_string())
            .collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn numeric_clauses() {
        let s = ObjectStore::new();
        s.upsert_object(&oid("a"), ObjectUpsert::new().set("load", 5)).unwrap();
        s.upsert_object(&oid("b"), ObjectUpsert::new().set("load", 7.5)).unwrap();
        s.upsert_object(&oid("c"), ObjectUpsert::new().set("load", "heavy")).unwrap();
        let p = AttributePredicate::all().and("load", ClauseOp::Gt, 5);
        assert_eq!(s.find_objects(&p).unwrap().len(), 1);
        let p = AttributePredicate::all().and("load", ClauseOp::Ge, 5.0);
        assert_eq!(s.find_objects(&p).unwrap().len(), 2);
        let p = AttributePredicate::eq("load", 5.0);
        assert_eq!(s.find_objects(&p).unwrap()[0].id, oid("a"));
        let bad = AttributePredicate::all().and("load", ClauseOp::Lt, "x");
        assert!(matches!(s.find_objects(&bad), Err(ObjectError::InvalidPredicate(_))));
    }

    #[test]
    fn index_follows_updates_and_deletes() {
        let s = ObjectStore::new();
        s.upsert_object(&oid("a"), ObjectUpsert::new().set("marker.QR.id", "bar")).unwrap();
        s.upsert_object(&oid("a"), ObjectUpsert::new().set("marker.QR.id", "baz")).unwrap();
        assert!(s.find_objects(&AttributePredicate::eq("marker.QR.id", "bar")).unwrap().is_empty());
        assert_eq!(s.find_objects(&AttributePredicate::eq("marker.QR.id", "baz")).unwrap().len(), 1);
        s.delete_object(&oid("a")).unwrap();
        assert!(s.find_objects(&AttributePredicate::eq("marker.QR.id", "baz")).unwrap().is_empty());
    }

    #[test]
    fn delete_semantics() {
        let s = ObjectStore::new();
        s.upsert_object(&oid("a"), ObjectUpsert::new().set("k", 1)).unwrap();
        assert_eq!(s.delete_object(&oid("a")).unwrap().rev, 1);
        assert!(matches!(s.get_object(&oid("a")), Err(ObjectError::NotFound(_))));
        assert!(matches!(s.delete_object(&oid("a")), Err(ObjectError::NotFound(_))));
        // Revisions keep increasing across delete and re-create.
        assert_eq!(s.upsert_object(&oid("a"), ObjectUpsert::new()).unwrap().rev, 2);
    }

    #[test]
    fn provisional_requires_source_attribute() {
        let s = ObjectStore::new();
        assert_eq!(
            s.upsert_object(&oid("p"), ObjectUpsert::new().provisional(true)),
            Err(ObjectError::MissingProvisionalSource)
        );
        let ok = ObjectUpsert::new().set(PROVISIONAL_SOURCE_ATTR, "cam").provisional(true);
        s.upsert_object(&oid("p"), ok).unwrap();
        assert!(s.get_object(&oid("p")).unwrap().provisional);
    }

    #[test]
    fn filtered_feed_counts_matches() {
        let s = ObjectStore::new();
        for i in 0..10 {
            let kind = if i % 3 == 0 { "AGV" } else { "rack" };
            s.upsert_object(&oid(&format!("o{i}")), ObjectUpsert::new().set("type", kind)).unwrap();
        }
        let mut feed = s.object_changes(0, Some(AttributePredicate::eq("type", "AGV"))).unwrap();
        assert_eq!(feed.drain().unwrap().len(), 4);
        let mut feed = s.object_changes(0, Some(AttributePredicate::eq("type", "forklift"))).unwrap();
        assert!(feed.drain().unwrap().is_empty());
        s.delete_object(&oid("o0")).unwrap();
        let mut feed = s.object_changes(10, Some(AttributePredicate::eq("type", "AGV"))).unwrap();
        assert_eq!(feed.drain().unwrap().len(), 1);
        assert!(feed.next_timeout(std::time::Duration::from_millis(5)).unwrap().is_none());
    }

    #[test]
    fn put_document_is_idempotent() {
        let s = ObjectStore::new();
        let mut doc = ObjectDocument::new(oid("a"));
        doc.attributes.insert("k".into(), json!(1));
        doc.rev = 4;
        assert_eq!(s.put_document(doc.clone()).unwrap().unwrap().rev, 4);
        assert!(s.put_document(doc).unwrap().is_none());
        assert_eq!(s.head(), 1);
    }

    #[test]
    fn replication_reproduces_state() {
        let m = ObjectStore::new();
        m.upsert_object(&oid("a"), ObjectUpsert::new().set("marker.QR.id", "x")).unwrap();
        m.upsert_object(&oid("b"), ObjectUpsert::new().set("k", 1)).unwrap();
        m.delete_object(&oid("a")).unwrap();
        let s = ObjectStore::new();
        for ev in m.changes(0).unwrap().drain().unwrap() {
            s.apply_replicated(&ev).unwrap();
        }
        assert_eq!(*s.read(), *m.read());
    }
}
