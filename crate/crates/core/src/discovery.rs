//! Endpoint announcements broadcast on the discovery port, and the
//! consumer-side table that turns them into a lookup service.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DISCOVERY_PORT: u16 = 47474;
pub const ANNOUNCEMENT_VERSION: u64 = 1;
/// An endpoint is forgotten after this many announcement intervals of silence.
pub const STALE_AFTER_INTERVALS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ingest,
    Query,
    Mgmt,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Ingest, Role::Query, Role::Mgmt];

    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Ingest => "ingest",
            Role::Query => "query",
            Role::Mgmt => "mgmt",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ingest" => Ok(Role::Ingest),
            "query" => Ok(Role::Query),
            "mgmt" => Ok(Role::Mgmt),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Announcement {
    pub v: u64,
    pub role: Role,
    pub addr: String,
    pub epoch: u64,
    pub node: String,
}

impl Announcement {
    pub fn new(role: Role, addr: impl Into<String>, epoch: u64, node: impl Into<String>) -> Self {
        Self { v: ANNOUNCEMENT_VERSION, role, addr: addr.into(), epoch, node: node.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed announcement: {0}")]
pub struct MalformedAnnouncement(pub String);

pub fn encode_announcement(a: &Announcement) -> Vec<u8> {
    crate::canonical_json(a).into_bytes()
}

pub fn decode_announcement(bytes: &[u8]) -> Result<Announcement, MalformedAnnouncement> {
    let a: Announcement = serde_json::from_slice(bytes).map_err(|e| MalformedAnnouncement(e.to_string()))?;
    if a.v != ANNOUNCEMENT_VERSION {
        return Err(MalformedAnnouncement(format!("unsupported version {}", a.v)));
    }
    if a.addr.is_empty() || a.node.is_empty() {
        return Err(MalformedAnnouncement("empty addr or node".into()));
    }
    Ok(a)
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("no {} endpoint known", .0.as_str())]
pub struct NoEndpointKnown(pub Role);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryEntry {
    pub announcement: Announcement,
    pub last_seen_us: u64,
}

/// Keeps, per role, the announcement with the highest epoch. Equal epochs
/// resolve to the greatest `(addr, node)` so the outcome does not depend on
/// arrival order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiscoveryTable {
    entries: BTreeMap<Role, DiscoveryEntry>,
    interval_us: u64,
}

impl DiscoveryTable {
    pub fn new(announce_interval_us: u64) -> Self {
        Self { entries: BTreeMap::new(), interval_us: announce_interval_us.max(1) }
    }

    /// Records a received announcement; returns whether it became the
    /// current entry for its role.
    pub fn observe(&mut self, a: Announcement, now_us: u64) -> bool {
        match self.entries.get_mut(&a.role) {
            Some(cur) => {
                let cur_key = (cur.announcement.epoch, &cur.announcement.addr, &cur.announcement.node);
                let new_key = (a.epoch, &a.addr, &a.node);
                if new_key > cur_key {
                    *cur = DiscoveryEntry { announcement: a, last_seen_us: now_us };
                    true
                } else if new_key == cur_key {
                    cur.last_seen_us = cur.last_seen_us.max(now_us);
                    true
                } else {
                    false
                }
            }
            None => {
                self.entries.insert(a.role, DiscoveryEntry { announcement: a, last_seen_us: now_us });
                true
            }
        }
    }

    pub fn entry(&self, role: Role) -> Option<&DiscoveryEntry> {
        self.entries.get(&role)
    }

    pub fn lookup(&self, role: Role, now_us: u64) -> Result<&Announcement, NoEndpointKnown> {
        let e = self.entries.get(&role).ok_or(NoEndpointKnown(role))?;
        if now_us.saturating_sub(e.last_seen_us) > STALE_AFTER_INTERVALS * self.interval_us {
            return Err(NoEndpointKnown(role));
        }
        Ok(&e.announcement)
    }

    pub fn lookup_query_endpoint(&self, now_us: u64) -> Result<String, NoEndpointKnown> {
        self.lookup(Role::Query, now_us).map(|a| a.addr.clone())
    }

    pub fn entries(&self) -> impl Iterator<Item = &DiscoveryEntry> {
        self.entries.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_wire_shape() {
        let a = Announcement::new(Role::Ingest, "10.0.0.5:47400", 3, "n1");
        let bytes = encode_announcement(&a);
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"addr":"10.0.0.5:47400","epoch":3,"node":"n1","role":"ingest","v":1}"#
        );
        assert_eq!(decode_announcement(&bytes).unwrap(), a);
    }

    #[test]
    fn truncated_is_rejected() {
        let bytes = encode_announcement(&Announcement::new(Role::Query, "h:1", 1, "n"));
        for cut in 0..bytes.len() {
            assert!(decode_announcement(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn highest_epoch_wins() {
        let mut t = DiscoveryTable::new(1_000_000);
        t.observe(Announcement::new(Role::Query, "a:1", 3, "n1"), 0);
        t.observe(Announcement::new(Role::Query, "b:1", 5, "n2"), 10);
        t.observe(Announcement::new(Role::Query, "a:1", 3, "n1"), 20);
        assert_eq!(t.lookup_query_endpoint(20).unwrap(), "b:1");
    }

    #[test]
    fn silence_expires_entry() {
        let mut t = DiscoveryTable::new(1_000);
        assert_eq!(t.lookup_query_endpoint(0), Err(NoEndpointKnown(Role::Query)));
        t.observe(Announcement::new(Role::Query, "a:1", 1, "n1"), 0);
        assert!(t.lookup_query_endpoint(3_000).is_ok());
        assert!(t.lookup_query_endpoint(3_001).is_err());
    }
}
