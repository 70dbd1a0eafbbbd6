//! The environmental model: spatial graph, objects database and blob store
//! bundled behind one handle, plus the write fence used after promotions.

use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLockReadGuard;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobs::BlobStore;
use crate::config::StoreConfig;
use crate::graph::{GraphState, GraphStore};
use crate::objects::{ObjectState, ObjectStore};

/// Feed cursors identifying one consistent state of both stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct AsOf {
    pub graph: u64,
    pub objects: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("write from epoch {writer} rejected; stores are fenced at epoch {fence}")]
pub struct Fenced {
    pub writer: u64,
    pub fence: u64,
}

#[derive(Debug)]
pub struct EnvironmentModel {
    pub graph: GraphStore,
    pub objects: ObjectStore,
    pub blobs: BlobStore,
    fence: AtomicU64,
}

impl Default for EnvironmentModel {
    fn default() -> Self {
        Self::new(&StoreConfig::default())
    }
}

impl EnvironmentModel {
    pub fn new(cfg: &StoreConfig) -> Self {
        Self {
            graph: GraphStore::with_retention(cfg.feed_retention),
            objects: ObjectStore::with_config(&cfg.index_paths, cfg.feed_retention),
            blobs: BlobStore::new(cfg.blob_limit_bytes),
            fence: AtomicU64::new(0),
        }
    }

    /// Read access to both stores at once. Graph is locked before objects;
    /// every multi-store reader follows that order.
    pub fn snapshot(&self) -> ModelSnapshot<'_> {
        let graph = self.graph.read();
        let objects = self.objects.read();
        let as_of = AsOf { graph: self.graph.head(), objects: self.objects.head() };
        ModelSnapshot { graph, objects, as_of }
    }

    pub fn as_of(&self) -> AsOf {
        AsOf { graph: self.graph.head(), objects: self.objects.head() }
    }

    /// Rejects writers from masters older than the fence.
    pub fn admit(&self, writer_epoch: u64) -> Result<(), Fenced> {
        let fence = self.fence.load(Ordering::Acquire);
        if writer_epoch < fence {
            Err(Fenced { writer: writer_epoch, fence })
        } else {
            Ok(())
        }
    }

    pub fn raise_fence(&self, epoch: u64) {
        self.fence.fetch_max(epoch, Ordering::AcqRel);
    }

    pub fn fence_epoch(&self) -> u64 {
        self.fence.load(Ordering::Acquire)
    }

    pub fn set_gated(&self, gated: bool) {
        self.graph.log().set_gated(gated);
        self.objects.log().set_gated(gated);
    }
}

pub struct ModelSnapshot<'a> {
    pub graph: RwLockReadGuard<'a, GraphState>,
    pub objects: RwLockReadGuard<'a, ObjectState>,
    pub as_of: AsOf,
}
