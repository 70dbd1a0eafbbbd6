//! The spatial database: a directed multigraph of frames whose edges are
//! weighted transform observations.
//!
//! Each edge carries a scalar positional uncertainty `sigma` (1σ, meters)
//! and a `resolution` (meters, larger is coarser). Along a path sigma
//! combines as root-sum-square and resolution as the maximum. Path search
//! minimizes, lexicographically, accumulated sigma, path resolution, hop
//! count and finally the sequence of edge keys.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feed::{ChangeEvent, ChangeLog, ChangePayload, FeedError, FeedStream, StoreKind};
use crate::geometry::Pose6D;

pub const MAX_ID_BYTES: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid id {0:?}: must be 1..=128 bytes without whitespace")]
pub struct InvalidId(pub String);

/// Identifier of a frame. Objects share this namespace: every object owns
/// exactly one frame with the same id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FrameId(String);

pub type ObjectId = FrameId;

impl FrameId {
    pub fn new(id: impl Into<String>) -> Result<Self, InvalidId> {
        let id = id.into();
        if id.is_empty() || id.len() > MAX_ID_BYTES || id.chars().any(char::is_whitespace) {
            return Err(InvalidId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for FrameId {
    type Error = InvalidId;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        FrameId::new(s)
    }
}

impl TryFrom<&str> for FrameId {
    type Error = InvalidId;
    fn try_from(s: &str) -> Result<Self, Self::Error> {
        FrameId::new(s)
    }
}

impl From<FrameId> for String {
    fn from(f: FrameId) -> String {
        f.0
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for FrameId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// One sample of the transform between two frames, as seen by one provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformObservation {
    pub parent: FrameId,
    pub child: FrameId,
    pub provider: String,
    /// The child frame expressed in the parent frame.
    pub pose: Pose6D,
    pub sigma: f64,
    pub resolution: f64,
    pub time_us: u64,
    pub seq: u64,
}

impl TransformObservation {
    pub fn key(&self) -> EdgeKey {
        EdgeKey {
            parent: self.parent.clone(),
            child: self.child.clone(),
            provider: self.provider.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.parent == self.child {
            return Err(GraphError::InvalidObservation("parent equals child"));
        }
        if self.provider.is_empty() {
            return Err(GraphError::InvalidObservation("empty provider id"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(GraphError::InvalidObservation("sigma must be finite and >= 0"));
        }
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(GraphError::InvalidObservation("resolution must be finite and > 0"));
        }
        Ok(())
    }

    /// Whether `self` replaces `live` under last-write-wins on (time, seq).
    pub fn supersedes(&self, live: &TransformObservation) -> bool {
        (self.time_us, self.seq) > (live.time_us, live.seq)
    }
}

/// Identity of a live edge: at most one observation per key is retained.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub parent: FrameId,
    pub child: FrameId,
    pub provider: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathEdge {
    pub key: EdgeKey,
    pub direction: Direction,
}

/// Which edge weight dominates the path ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathPriority {
    #[default]
    SigmaFirst,
    ResolutionFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConstraints {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_resolution: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_age_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_hops: Option<u32>,
    /// Reference time for `max_age_us`; defaults to the newest observation
    /// time held by the graph.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub now_us: Option<u64>,
    #[serde(skip_serializing_if = "is_default_priority")]
    pub priority: PathPriority,
}

fn is_default_priority(p: &PathPriority) -> bool {
    *p == PathPriority::SigmaFirst
}

impl PathConstraints {
    pub fn validate(&self) -> Result<(), PathError> {
        let bad_f = |v: Option<f64>| v.is_some_and(|v| !(v.is_finite() && v > 0.0));
        if bad_f(self.max_sigma)
            || bad_f(self.max_resolution)
            || self.max_age_us == Some(0)
            || self.max_hops == Some(0)
        {
            return Err(PathError::InvalidConstraints);
        }
        Ok(())
    }

    pub fn with_max_hops(mut self, hops: u32) -> Self {
        self.max_hops = Some(hops);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    /// Maps coordinates of the destination frame into the source frame.
    pub pose: Pose6D,
    pub sigma: f64,
    pub resolution: f64,
    pub hops: u32,
    pub edges: Vec<PathEdge>,
    pub oldest_time_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoPathReason {
    UnknownFrame,
    Disconnected,
    ConstraintFiltered,
}

impl NoPathReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoPathReason::UnknownFrame => "unknown_frame",
            NoPathReason::Disconnected => "disconnected",
            NoPathReason::ConstraintFiltered => "constraint_filtered",
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PathError {
    #[error("no path ({})", .0.as_str())]
    NoPath(NoPathReason),
    #[error("path constraints must be > 0 when present")]
    InvalidConstraints,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid observation: {0}")]
    InvalidObservation(&'static str),
    #[error("replicated event out of order: expected seq {expected}, got {got}")]
    ReplicationGap { expected: u64, got: u64 },
    #[error("event does not belong to the graph store")]
    ForeignEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeUpdate {
    Applied { seq: u64 },
    Superseded,
}

impl EdgeUpdate {
    pub fn is_applied(&self) -> bool {
        matches!(self, EdgeUpdate::Applied { .. })
    }
}

/// Pure graph contents. Cloneable so that readers and subscription contexts
/// can hold private copies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphState {
    edges: BTreeMap<EdgeKey, TransformObservation>,
    adjacency: BTreeMap<FrameId, BTreeSet<EdgeKey>>,
    latest_time_us: u64,
}

impl GraphState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn frame_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn has_frame(&self, f: &FrameId) -> bool {
        self.adjacency.contains_key(f)
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameId> {
        self.adjacency.keys()
    }

    pub fn edges(&self) -> impl Iterator<Item = &TransformObservation> {
        self.edges.values()
    }

    pub fn edge(&self, key: &EdgeKey) -> Option<&TransformObservation> {
        self.edges.get(key)
    }

    pub fn latest_time_us(&self) -> u64 {
        self.latest_time_us
    }

    /// Applies last-write-wins. Returns whether the state changed.
    pub fn upsert(&mut self, obs: &TransformObservation) -> bool {
        let key = obs.key();
        if let Some(live) = self.edges.get(&key) {
            if !obs.supersedes(live) {
                return false;
            }
        }
        self.adjacency.entry(obs.parent.clone()).or_default().insert(key.clone());
        self.adjacency.entry(obs.child.clone()).or_default().insert(key.clone());
        self.latest_time_us = self.latest_time_us.max(obs.time_us);
        self.edges.insert(key, obs.clone());
        true
    }

    /// Removes an edge. Its frames stay known even when left without edges.
    pub fn remove(&mut self, key: &EdgeKey) -> Option<TransformObservation> {
        let obs = self.edges.remove(key)?;
        for f in [&key.parent, &key.child] {
            if let Some(set) = self.adjacency.get_mut(f) {
                set.remove(key);
            }
        }
        Some(obs)
    }

    /// Registers a frame without edges.
    pub fn touch_frame(&mut self, f: &FrameId) {
        self.adjacency.entry(f.clone()).or_default();
    }

    pub fn apply_event(&mut self, event: &ChangeEvent) -> Result<(), GraphError> {
        match &event.payload {
            ChangePayload::EdgeUpsert(obs) => {
                self.upsert(obs);
                Ok(())
            }
            ChangePayload::EdgeRemove(obs) => {
                self.remove(&obs.key());
                Ok(())
            }
            _ => Err(GraphError::ForeignEvent),
        }
    }

    fn reachable(&self, src: &FrameId, dst: &FrameId) -> bool {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([src]);
        seen.insert(src);
        while let Some(f) = queue.pop_front() {
            if f == dst {
                return true;
            }
            for key in self.adjacency.get(f).into_iter().flatten() {
                let other = if &key.parent == f { &key.child } else { &key.parent };
                if seen.insert(other) {
                    queue.push_back(other);
                }
            }
        }
        false
    }

    /// Finds the optimal simple path from `src` to `dst`.
    ///
    /// The search is best-first over partial-path labels ordered by the full
    /// lexicographic objective. A label is discarded when another label at the
    /// same frame is no worse in sigma, resolution and hops and strictly
    /// better in hops or edge-key sequence; extending both by the same suffix
    /// preserves that relation, so the first label to reach `dst` is optimal.
    pub fn best_path(
        &self,
        src: &FrameId,
        dst: &FrameId,
        c: &PathConstraints,
    ) -> Result<PathResult, PathError> {
        c.validate()?;
        if !self.has_frame(src) || !self.has_frame(dst) {
            return Err(PathError::NoPath(NoPathReason::UnknownFrame));
        }
        if src == dst {
            return Ok(PathResult {
                pose: Pose6D::identity(),
                sigma: 0.0,
                resolution: 0.0,
                hops: 0,
                edges: Vec::new(),
                oldest_time_us: None,
            });
        }

        let ranked = RankedGraph::build(self, c);
        let (Some(s), Some(d)) = (ranked.frame_index(src), ranked.frame_index(dst)) else {
            return Err(PathError::NoPath(NoPathReason::UnknownFrame));
        };
        let sigma_cap = c.max_sigma;
        let res_cap = c.max_resolution;
        let hop_cap = c.max_hops.unwrap_or(u32::MAX);

        let mut labels: Vec<Label> = vec![Label {
            node: s,
            sq_sigma: 0.0,
            resolution: 0.0,
            hops: 0,
            edges: Vec::new(),
            nodes: vec![s],
        }];
        let mut accepted: Vec<Vec<usize>> = vec![Vec::new(); ranked.nodes.len()];
        accepted[s].push(0);
        let mut frontier: BinaryHeap<FrontierKey> = BinaryHeap::new();
        frontier.push(FrontierKey::of(&labels[0], 0, c.priority));

        while let Some(FrontierKey { label: li, .. }) = frontier.pop() {
            let node = labels[li].node;
            if node == d {
                return Ok(ranked.materialize(&labels[li]));
            }
            if labels[li].hops >= hop_cap {
                continue;
            }
            for &(edge_rank, other, sq) in &ranked.nodes[node] {
                if labels[li].nodes.contains(&other) {
                    continue;
                }
                let e = &ranked.edges[edge_rank];
                let cand_sq = labels[li].sq_sigma + sq;
                let cand_res = labels[li].resolution.max(e.resolution);
                if sigma_cap.is_some_and(|m| cand_sq.sqrt() > m) || res_cap.is_some_and(|m| cand_res > m) {
                    continue;
                }
                let mut edges = labels[li].edges.clone();
                edges.push(edge_rank);
                let cand = Label {
                    node: other,
                    sq_sigma: cand_sq,
                    resolution: cand_res,
                    hops: labels[li].hops + 1,
                    edges,
                    nodes: {
                        let mut n = labels[li].nodes.clone();
                        n.push(other);
                        n
                    },
                };
                if accepted[other].iter().any(|&a| labels[a].dominates(&cand)) {
                    continue;
                }
                let idx = labels.len();
                frontier.push(FrontierKey::of(&cand, idx, c.priority));
                labels.push(cand);
                accepted[other].push(idx);
            }
        }

        if self.reachable(src, dst) {
            Err(PathError::NoPath(NoPathReason::ConstraintFiltered))
        } else {
            Err(PathError::NoPath(NoPathReason::Disconnected))
        }
    }
}

struct RankedEdge<'a> {
    obs: &'a TransformObservation,
    resolution: f64,
}

/// Edges that pass the per-edge (age) filter, indexed by rank in key order,
/// so integer comparison of ranks equals comparison of edge keys.
struct RankedGraph<'a> {
    edges: Vec<RankedEdge<'a>>,
    frame_ids: BTreeMap<&'a FrameId, usize>,
    /// Per node: (edge rank, neighbour node, squared sigma), sorted by rank.
    nodes: Vec<Vec<(usize, usize, f64)>>,
}

impl<'a> RankedGraph<'a> {
    fn build(g: &'a GraphState, c: &PathConstraints) -> Self {
        let now = c.now_us.unwrap_or(g.latest_time_us);
        let frame_ids: BTreeMap<&FrameId, usize> =
            g.adjacency.keys().enumerate().map(|(i, f)| (f, i)).collect();
        let mut nodes = vec![Vec::new(); frame_ids.len()];
        let mut edges = Vec::new();
        for obs in g.edges.values() {
            if let Some(max_age) = c.max_age_us {
                if now.saturating_sub(obs.time_us) > max_age {
                    continue;
                }
            }
            let rank = edges.len();
            let p = frame_ids[&obs.parent];
            let ch = frame_ids[&obs.child];
            let sq = obs.sigma * obs.sigma;
            nodes[p].push((rank, ch, sq));
            nodes[ch].push((rank, p, sq));
            edges.push(RankedEdge { obs, resolution: obs.resolution });
        }
        Self { edges, frame_ids, nodes }
    }

    fn frame_index(&self, f: &FrameId) -> Option<usize> {
        self.frame_ids.get(f).copied()
    }

    fn materialize(&self, label: &Label) -> PathResult {
        let mut pose = Pose6D::identity();
        let mut out = Vec::with_capacity(label.edges.len());
        let mut oldest = u64::MAX;
        for (i, &rank) in label.edges.iter().enumerate() {
            let obs = self.edges[rank].obs;
            let at = label.nodes[i];
            let forward = self.frame_ids[&obs.parent] == at;
            let step = if forward { obs.pose } else { obs.pose.inverse() };
            pose = pose.compose(&step);
            oldest = oldest.min(obs.time_us);
            out.push(PathEdge {
                key: obs.key(),
                direction: if forward { Direction::Forward } else { Direction::Inverse },
            });
        }
        PathResult {
            pose,
            sigma: label.sq_sigma.sqrt(),
            resolution: label.resolution,
            hops: label.hops,
            edges: out,
            oldest_time_us: Some(oldest),
        }
    }
}

#[derive(Debug, Clone)]
struct Label {
    node: usize,
    sq_sigma: f64,
    resolution: f64,
    hops: u32,
    edges: Vec<usize>,
    nodes: Vec<usize>,
}

impl Label {
    fn dominates(&self, o: &Label) -> bool {
        self.sq_sigma <= o.sq_sigma
            && self.resolution <= o.resolution
            && self.hops <= o.hops
            && (self.hops < o.hops || self.edges < o.edges)
    }
}

/// Min-heap key over the lexicographic objective.
struct FrontierKey {
    primary: f64,
    secondary: f64,
    hops: u32,
    edges: Vec<usize>,
    label: usize,
}

impl FrontierKey {
    fn of(l: &Label, label: usize, priority: PathPriority) -> Self {
        let (primary, secondary) = match priority {
            PathPriority::SigmaFirst => (l.sq_sigma, l.resolution),
            PathPriority::ResolutionFirst => (l.resolution, l.sq_sigma),
        };
        Self { primary, secondary, hops: l.hops, edges: l.edges.clone(), label }
    }

    fn objective(&self, o: &Self) -> Ordering {
        self.primary
            .total_cmp(&o.primary)
            .then(self.secondary.total_cmp(&o.secondary))
            .then(self.hops.cmp(&o.hops))
            .then_with(|| self.edges.cmp(&o.edges))
    }
}

impl PartialEq for FrontierKey {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for FrontierKey {}
impl PartialOrd for FrontierKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for FrontierKey {
    fn cmp(&self, o: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap.
        o.objective(self).then(o.label.cmp(&self.label))
    }
}

/// Thread-safe graph store with a change feed.
#[derive(Debug)]
pub struct GraphStore {
    state: RwLock<GraphState>,
    log: Arc<ChangeLog>,
}

impl Default for GraphStore {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphStore {
    pub fn new() -> Self {
        Self::with_retention(crate::feed::DEFAULT_RETENTION)
    }

    pub fn with_retention(retention: usize) -> Self {
        Self {
            state: RwLock::new(GraphState::new()),
            log: Arc::new(ChangeLog::new(StoreKind::Graph, retention)),
        }
    }

    pub fn log(&self) -> &Arc<ChangeLog> {
        &self.log
    }

    pub fn upsert_edge(&self, obs: TransformObservation) -> Result<EdgeUpdate, GraphError> {
        obs.validate()?;
        let mut state = self.state.write();
        if !state.upsert(&obs) {
            return Ok(EdgeUpdate::Superseded);
        }
        let seq = self.log.append(ChangePayload::EdgeUpsert(obs));
        Ok(EdgeUpdate::Applied { seq })
    }

    pub fn remove_edge(&self, key: &EdgeKey) -> Option<u64> {
        let mut state = self.state.write();
        let obs = state.remove(key)?;
        Some(self.log.append(ChangePayload::EdgeRemove(obs)))
    }

    /// Removes every edge contributed by `provider`, one event per edge.
    pub fn remove_provider(&self, provider: &str) -> usize {
        let mut state = self.state.write();
        let keys: Vec<EdgeKey> = state.edges.keys().filter(|k| k.provider == provider).cloned().collect();
        for key in &keys {
            if let Some(obs) = state.remove(key) {
                self.log.append(ChangePayload::EdgeRemove(obs));
            }
        }
        keys.len()
    }

    pub fn best_path(
        &self,
        src: &FrameId,
        dst: &FrameId,
        c: &PathConstraints,
    ) -> Result<PathResult, PathError> {
        self.state.read().best_path(src, dst, c)
    }

    /// Consistent read access. The published cursor is stable while the
    /// guard is held.
    pub fn read(&self) -> RwLockReadGuard<'_, GraphState> {
        self.state.read()
    }

    pub fn snapshot(&self) -> (GraphState, u64) {
        let state = self.state.read();
        (state.clone(), self.log.head())
    }

    /// Subscribes to every mutation committed after `cursor`.
    pub fn changes(&self, cursor: u64) -> Result<FeedStream, FeedError> {
        FeedStream::open(self.log.clone(), cursor)
    }

    pub fn head(&self) -> u64 {
        self.log.head()
    }

    /// Applies an event committed by a master store, preserving its sequence.
    pub fn apply_replicated(&self, event: &ChangeEvent) -> Result<(), GraphError> {
        if event.store != StoreKind::Graph {
            return Err(GraphError::ForeignEvent);
        }
        let mut state = self.state.write();
        let expected = self.log.head() + 1;
        if event.seq != expected {
            return Err(GraphError::ReplicationGap { expected, got: event.seq });
        }
        state.apply_event(event)?;
        self.log
            .append_replicated(event)
            .map_err(|head| GraphError::ReplicationGap { expected: head + 1, got: event.seq })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fid(s: &str) -> FrameId {
        FrameId::new(s).unwrap()
    }

    fn edge(p: &str, c: &str, sigma: f64, res: f64) -> TransformObservation {
        TransformObservation {
            parent: fid(p),
            child: fid(c),
            provider: "test".into(),
            pose: Pose6D::from_translation(1.0, 0.0, 0.0),
            sigma,
            resolution: res,
            time_us: 100,
            seq: 1,
        }
    }

    #[test]
    fn frame_id_rules() {
        assert!(FrameId::new("").is_err());
        assert!(FrameId::new("a b").is_err());
        assert!(FrameId::new("x".repeat(129)).is_err());
        assert!(FrameId::new("x".repeat(128)).is_ok());
    }

    #[test]
    fn upsert_creates_frames() {
        let g = GraphStore::new();
        assert!(g.upsert_edge(edge("A", "B", 0.1, 0.1)).unwrap().is_applied());
        assert_eq!(g.read().frame_count(), 2);
        assert_eq!(g.read().edge_count(), 1);
    }

    #[test]
    fn duplicate_delivery_is_superseded() {
        let g = GraphStore::new();
        let o = edge("A", "B", 0.1, 0.1);
        g.upsert_edge(o.clone()).unwrap();
        let before = g.read().clone();
        assert_eq!(g.upsert_edge(o).unwrap(), EdgeUpdate::Superseded);
        assert_eq!(*g.read(), before);
        assert_eq!(g.head(), 1);
    }

    #[test]
    fn older_observation_is_superseded() {
        let g = GraphStore::new();
        let mut newer = edge("A", "B", 0.1, 0.1);
        newer.pose = Pose6D::from_translation(5.0, 0.0, 0.0);
        let mut older = edge("A", "B", 0.1, 0.1);
        older.time_us = 50;
        older.seq = 9;
        g.upsert_edge(newer.clone()).unwrap();
        assert_eq!(g.upsert_edge(older).unwrap(), EdgeUpdate::Superseded);
        assert_eq!(g.read().edge(&newer.key()).unwrap().time_us, 100);
        let mut same_time_higher_seq = newer.clone();
        same_time_higher_seq.seq = 2;
        assert!(g.upsert_edge(same_time_higher_seq).unwrap().is_applied());
    }

    #[test]
    fn invalid_observations_rejected() {
        let g = GraphStore::new();
        assert!(g.upsert_edge(edge("A", "A", 0.1, 0.1)).is_err());
        assert!(g.upsert_edge(edge("A", "B", -0.1, 0.1)).is_err());
        assert!(g.upsert_edge(edge("A", "B", 0.1, 0.0)).is_err());
    }

    #[test]
    fn remove_provider_counts() {
        let g = GraphStore::new();
        assert_eq!(g.remove_provider("nobody"), 0);
        for (i, (p, c)) in [("A", "B"), ("B", "C"), ("C", "D")].iter().enumerate() {
            let mut o = edge(p, c, 0.1, 0.1);
            o.provider = "cam1".into();
            o.seq = i as u64;
            g.upsert_edge(o).unwrap();
        }
        for (p, c) in [("A", "E"), ("E", "F")] {
            let mut o = edge(p, c, 0.1, 0.1);
            o.provider = "cam2".into();
            g.upsert_edge(o).unwrap();
        }
        assert_eq!(g.remove_provider("cam1"), 3);
        assert_eq!(g.read().edge_count(), 2);
        assert_eq!(
            g.best_path(&fid("A"), &fid("D"), &PathConstraints::default()),
            Err(PathError::NoPath(NoPathReason::Disconnected))
        );
        assert!(g.best_path(&fid("A"), &fid("F"), &PathConstraints::default()).is_ok());
    }

    #[test]
    fn empty_path_to_self() {
        let g = GraphStore::new();
        g.upsert_edge(edge("A", "B", 0.1, 0.1)).unwrap();
        let r = g.best_path(&fid("A"), &fid("A"), &PathConstraints::default()).unwrap();
        assert_eq!(r.hops, 0);
        assert_eq!(r.sigma, 0.0);
        assert_eq!(r.resolution, 0.0);
        assert_eq!(r.pose, Pose6D::identity());
    }

    fn triangle() -> GraphStore {
        let g = GraphStore::new();
        g.upsert_edge(edge("A", "B", 0.01, 0.001)).unwrap();
        g.upsert_edge(edge("B", "C", 0.02, 0.005)).unwrap();
        g.upsert_edge(edge("A", "C", 0.05, 0.01)).unwrap();
        g
    }

    #[test]
    fn two_hop_path_beats_noisy_direct_edge() {
        let r = triangle().best_path(&fid("A"), &fid("C"), &PathConstraints::default()).unwrap();
        assert_eq!(r.hops, 2);
        assert!((r.sigma - (0.01f64.powi(2) + 0.02f64.powi(2)).sqrt()).abs() < 1e-12);
        assert!((r.sigma - 0.02236).abs() < 1e-5);
        assert_eq!(r.resolution, 0.005);
        assert_eq!(r.edges[0].key.child, fid("B"));
    }

    #[test]
    fn hop_limit_forces_direct_edge() {
        let c = PathConstraints::default().with_max_hops(1);
        let r = triangle().best_path(&fid("A"), &fid("C"), &c).unwrap();
        assert_eq!(r.hops, 1);
        assert_eq!(r.sigma, 0.05);
    }

    #[test]
    fn resolution_priority_prefers_fine_chain() {
        let g = GraphStore::new();
        g.upsert_edge(edge("A", "B", 0.05, 0.001)).unwrap();
        g.upsert_edge(edge("B", "C", 0.05, 0.001)).unwrap();
        g.upsert_edge(edge("A", "C", 0.01, 0.01)).unwrap();
        let sigma_first = g.best_path(&fid("A"), &fid("C"), &PathConstraints::default()).unwrap();
        assert_eq!(sigma_first.hops, 1);
        let c = PathConstraints { priority: PathPriority::ResolutionFirst, ..Default::default() };
        let res_first = g.best_path(&fid("A"), &fid("C"), &c).unwrap();
        assert_eq!(res_first.hops, 2);
    }

    #[test]
    fn inverse_traversal() {
        let g = triangle();
        let r = g.best_path(&fid("C"), &fid("A"), &PathConstraints::default()).unwrap();
        assert!(r.edges.iter().all(|e| e.direction == Direction::Inverse));
        assert!((r.pose.translation()[0] + 2.0).abs() < 1e-9);
    }

    #[test]
    fn no_path_reasons() {
        let g = triangle();
        let d = PathConstraints::default();
        assert_eq!(
            g.best_path(&fid("A"), &fid("Z"), &d),
            Err(PathError::NoPath(NoPathReason::UnknownFrame))
        );
        let tight = PathConstraints { max_sigma: Some(0.001), ..d };
        assert_eq!(
            g.best_path(&fid("A"), &fid("C"), &tight),
            Err(PathError::NoPath(NoPathReason::ConstraintFiltered))
        );
        let bad = PathConstraints { max_hops: Some(0), ..d };
        assert_eq!(g.best_path(&fid("A"), &fid("C"), &bad), Err(PathError::InvalidConstraints));
    }

    #[test]
    fn age_filter_uses_reference_time() {
        let g = GraphStore::new();
        let mut old = edge("A", "B", 0.01, 0.01);
        old.time_us = 1_000;
        let mut fresh = edge("B", "C", 0.01, 0.01);
        fresh.time_us = 10_000;
        g.upsert_edge(old).unwrap();
        g.upsert_edge(fresh).unwrap();
        let c = PathConstraints { max_age_us: Some(5_000), ..Default::default() };
        assert_eq!(
            g.best_path(&fid("A"), &fid("C"), &c),
            Err(PathError::NoPath(NoPathReason::ConstraintFiltered))
        );
        assert!(g.best_path(&fid("B"), &fid("C"), &c).is_ok());
        let c = PathConstraints { now_us: Some(5_500), ..c };
        assert!(g.best_path(&fid("A"), &fid("C"), &c).is_ok());
    }

    #[test]
    fn change_feed_counts_commits() {
        let g = GraphStore::new();
        for i in 0..5 {
            let mut o = edge("A", "B", 0.1, 0.1);
            o.seq = i + 10;
            g.upsert_edge(o).unwrap();
        }
        let mut feed = g.changes(0).unwrap();
        let seqs: Vec<u64> = feed.drain().unwrap().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn replica_follows_master() {
        let master = triangle();
        master.remove_provider("test");
        let slave = GraphStore::new();
        for ev in master.changes(0).unwrap().drain().unwrap() {
            slave.apply_replicated(&ev).unwrap();
        }
        assert_eq!(*slave.read(), *master.read());
        assert_eq!(slave.head(), master.head());
        let stray = master.changes(0).unwrap().drain().unwrap()[0].clone();
        assert!(matches!(slave.apply_replicated(&stray), Err(GraphError::ReplicationGap { .. })));
    }
}
