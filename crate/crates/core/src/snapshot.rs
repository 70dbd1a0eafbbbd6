//! Map snapshot files: every object document, every live edge and the blob
//! manifest in one canonical JSON document (sorted keys, compact).
//!
//! Import is idempotent: documents with identical content are skipped and
//! edges go through last-write-wins, so loading a file twice leaves the same
//! state as loading it once.

use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::blobs::{sha256_hex, BlobRef};
use crate::graph::TransformObservation;
use crate::model::EnvironmentModel;
use crate::objects::ObjectDocument;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    #[serde(flatten)]
    pub blob: BlobRef,
    /// Base64 (standard alphabet) content; omitted in manifest-only exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSnapshot {
    pub version: u32,
    #[serde(default)]
    pub objects: Vec<ObjectDocument>,
    #[serde(default)]
    pub edges: Vec<TransformObservation>,
    #[serde(default)]
    pub blobs: Vec<BlobEntry>,
}

impl Default for MapSnapshot {
    fn default() -> Self {
        Self { version: SNAPSHOT_VERSION, objects: Vec::new(), edges: Vec::new(), blobs: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportCounts {
    pub objects: usize,
    pub edges: usize,
    pub blobs: usize,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot at line {line}, column {column}, field `{field}`: {message}")]
    Malformed { line: usize, column: usize, field: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl SnapshotError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        SnapshotError::Malformed { line: 0, column: 0, field: field.into(), message: message.into() }
    }
}

pub fn export_snapshot(model: &EnvironmentModel, include_blob_data: bool) -> MapSnapshot {
    let snap = model.snapshot();
    let objects = snap.objects.documents().cloned().collect();
    let edges = snap.graph.edges().cloned().collect();
    drop(snap);
    let blobs = model
        .blobs
        .refs()
        .into_iter()
        .map(|blob| {
            let data = include_blob_data
                .then(|| model.blobs.get_blob(&blob.hash).ok())
                .flatten()
                .map(|bytes| base64::engine::general_purpose::STANDARD.encode(bytes.as_slice()));
            BlobEntry { blob, data }
        })
        .collect();
    MapSnapshot { version: SNAPSHOT_VERSION, objects, edges, blobs }
}

/// Canonical serialization: keys sorted, no insignificant whitespace,
/// trailing newline.
pub fn to_canonical_json(s: &MapSnapshot) -> String {
    let mut out = crate::canonical_json(s);
    out.push('\n');
    out
}

pub fn parse_snapshot(text: &str) -> Result<MapSnapshot, SnapshotError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let snap: MapSnapshot = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        SnapshotError::Malformed {
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    if snap.version != SNAPSHOT_VERSION {
        return Err(SnapshotError::field("version", format!("unsupported version {}", snap.version)));
    }
    Ok(snap)
}

pub fn import_snapshot(model: &EnvironmentModel, snap: &MapSnapshot) -> Result<ImportCounts, SnapshotError> {
    let mut counts = ImportCounts::default();
    for (i, entry) in snap.blobs.iter().enumerate() {
        let Some(data) = &entry.data else { continue };
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|e| SnapshotError::field(format!("blobs[{i}].data"), e.to_string()))?;
        if sha256_hex(&bytes) != entry.blob.hash {
            return Err(SnapshotError::field(format!("blobs[{i}].hash"), "content does not match hash"));
        }
        model
            .blobs
            .put_blob(&bytes, &entry.blob.media_type)
            .map_err(|e| SnapshotError::field(format!("blobs[{i}]"), e.to_string()))?;
        counts.blobs += 1;
    }
    for (i, doc) in snap.objects.iter().enumerate() {
        model
            .objects
            .put_document(doc.clone())
            .map_err(|e| SnapshotError::field(format!("objects[{i}]"), e.to_string()))?;
        counts.objects += 1;
    }
    for (i, edge) in snap.edges.iter().enumerate() {
        model
            .graph
            .upsert_edge(edge.clone())
            .map_err(|e| SnapshotError::field(format!("edges[{i}]"), e.to_string()))?;
        counts.edges += 1;
    }
    Ok(counts)
}

pub fn import_map(model: &EnvironmentModel, path: &Path) -> Result<ImportCounts, SnapshotError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| SnapshotError::Io { path: path.display().to_string(), source })?;
    import_snapshot(model, &parse_snapshot(&text)?)
}

pub fn export_map(model: &EnvironmentModel, path: &Path, include_blob_data: bool) -> Result<(), SnapshotError> {
    std::fs::write(path, to_canonical_json(&export_snapshot(model, include_blob_data)))
        .map_err(|source| SnapshotError::Io { path: path.display().to_string(), source })
}

/// Content hash of the canonical graph + objects + blob manifest.
pub fn model_digest(model: &EnvironmentModel) -> String {
    let canonical = to_canonical_json(&export_snapshot(model, false));
    hex::encode(Sha256::digest(canonical.as_bytes()))
}
