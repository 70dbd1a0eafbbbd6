//! Master/slave mirroring over the stores' change feeds, and promotion.
//!
//! In sync mode the master's feeds are gated: a commit becomes visible to
//! subscribers only once the slave has applied it, so anything a consumer
//! has seen survives a promotion. Async mode publishes immediately and the
//! slave trails by the reported lag.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::{Announcement, Role};
use crate::feed::FeedError;
use crate::graph::GraphError;
use crate::model::EnvironmentModel;
use crate::objects::ObjectError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationMode {
    #[default]
    Sync,
    Async,
}

#[derive(Debug, Error)]
pub enum ReplicationError {
    #[error(transparent)]
    Feed(#[from] FeedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objects(#[from] ObjectError),
    #[error("no live slave for role {}", .0.as_str())]
    NoSlaveAvailable(Role),
}

/// Commits the slave has not applied yet, per store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lag {
    pub graph: u64,
    pub objects: u64,
}

impl Lag {
    pub fn total(&self) -> u64 {
        self.graph + self.objects
    }
}

#[derive(Debug)]
pub struct ReplicationLink {
    master: Arc<EnvironmentModel>,
    slave: Arc<EnvironmentModel>,
    mode: ReplicationMode,
    blob_offset: usize,
}

impl ReplicationLink {
    /// The slave must hold a prefix of the master's logs (typically it is
    /// empty).
    pub fn new(master: Arc<EnvironmentModel>, slave: Arc<EnvironmentModel>, mode: ReplicationMode) -> Self {
        if mode == ReplicationMode::Sync {
            master.set_gated(true);
        }
        Self { master, slave, mode, blob_offset: 0 }
    }

    pub fn mode(&self) -> ReplicationMode {
        self.mode
    }

    pub fn master(&self) -> &Arc<EnvironmentModel> {
        &self.master
    }

    pub fn slave(&self) -> &Arc<EnvironmentModel> {
        &self.slave
    }

    pub fn lag(&self) -> Lag {
        Lag {
            graph: self.master.graph.head().saturating_sub(self.slave.graph.head()),
            objects: self.master.objects.head().saturating_sub(self.slave.objects.head()),
        }
    }

    /// Ships up to `max` commits per store; returns how many were applied.
    pub fn pump_limited(&mut self, max: usize) -> Result<usize, ReplicationError> {
        for (blob, bytes) in self.master.blobs.journal_since(self.blob_offset) {
            self.blob_offset += 1;
            if !self.slave.blobs.contains(&blob.hash) {
                // Limits match on both sides, so this cannot fail.
                let _ = self.slave.blobs.put_blob(&bytes, &blob.media_type);
            }
        }
        let mut applied = 0;
        let graph = self.master.graph.log().read_committed(self.slave.graph.head(), max)?;
        for ev in &graph {
            self.slave.graph.apply_replicated(ev)?;
            applied += 1;
        }
        let objects = self.master.objects.log().read_committed(self.slave.objects.head(), max)?;
        for ev in &objects {
            self.slave.objects.apply_replicated(ev)?;
            applied += 1;
        }
        if self.mode == ReplicationMode::Sync {
            self.master.graph.log().publish(self.slave.graph.head());
            self.master.objects.log().publish(self.slave.objects.head());
        }
        Ok(applied)
    }

    pub fn pump(&mut self) -> Result<usize, ReplicationError> {
        self.pump_limited(usize::MAX)
    }

    /// Stops gating the master, e.g. when its slave is gone for good.
    pub fn detach(self) {
        self.master.set_gated(false);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotionRecord {
    pub role: Role,
    pub old_master: String,
    pub new_master: String,
    pub old_epoch: u64,
    pub new_epoch: u64,
    pub mode: ReplicationMode,
    /// Master commits the slave never received.
    pub lost: Lag,
    /// Graph and objects heads the promoted store starts from.
    pub graph_head: u64,
    pub objects_head: u64,
    pub announcement: Announcement,
}

#[derive(Debug, Clone)]
pub struct Replica {
    pub node: String,
    pub addr: String,
    pub model: Arc<EnvironmentModel>,
}

/// A singleton role served by one master, optionally mirrored by one slave.
#[derive(Debug)]
pub struct ReplicaGroup {
    pub role: Role,
    epoch: u64,
    master: Replica,
    slave: Option<(Replica, ReplicationLink)>,
}

impl ReplicaGroup {
    pub fn new(role: Role, master: Replica, epoch: u64) -> Self {
        Self { role, epoch, master, slave: None }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn master(&self) -> &Replica {
        &self.master
    }

    pub fn slave(&self) -> Option<&Replica> {
        self.slave.as_ref().map(|(r, _)| r)
    }

    pub fn link_mut(&mut self) -> Option<&mut ReplicationLink> {
        self.slave.as_mut().map(|(_, l)| l)
    }

    pub fn announcement(&self) -> Announcement {
        Announcement::new(self.role, self.master.addr.clone(), self.epoch, self.master.node.clone())
    }

    pub fn attach_slave(&mut self, slave: Replica, mode: ReplicationMode) {
        if let Some((_, old)) = self.slave.take() {
            old.detach();
        }
        let link = ReplicationLink::new(self.master.model.clone(), slave.model.clone(), mode);
        self.slave = Some((slave, link));
    }

    pub fn drop_slave(&mut self) {
        if let Some((_, link)) = self.slave.take() {
            link.detach();
        }
    }

    /// Makes the slave the master at its replicated prefix. The old master's
    /// stores are fenced so a surviving instance cannot commit again.
    pub fn promote_slave(&mut self) -> Result<PromotionRecord, ReplicationError> {
        let (slave, link) = self.slave.take().ok_or(ReplicationError::NoSlaveAvailable(self.role))?;
        let lost = link.lag();
        let mode = link.mode();
        let new_epoch = self.epoch + 1;
        self.master.model.raise_fence(new_epoch);
        slave.model.set_gated(false);
        let old = std::mem::replace(&mut self.master, slave);
        let old_epoch = self.epoch;
        self.epoch = new_epoch;
        Ok(PromotionRecord {
            role: self.role,
            old_master: old.node,
            new_master: self.master.node.clone(),
            old_epoch,
            new_epoch,
            mode,
            lost,
            graph_head: self.master.model.graph.head(),
            objects_head: self.master.model.objects.head(),
            announcement: self.announcement(),
        })
    }
}
