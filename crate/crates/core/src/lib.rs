//! Dynamic semantic spatial model of indoor environments.
//!
//! Sensors push relative 6D transform observations and object attributes
//! through a session-less datagram interface; consumers query poses,
//! objects and spatial ranges and subscribe to change feeds. Stores are
//! mirrored master/slave and endpoints are found through broadcast
//! announcements.

use serde::Serialize;

pub mod blobs;
pub mod config;
pub mod discovery;
pub mod feed;
pub mod framing;
pub mod geometry;
pub mod graph;
pub mod health;
pub mod ingest;
pub mod model;
pub mod objects;
pub mod query;
pub mod replication;
pub mod server;
pub mod sim;
pub mod snapshot;
pub mod wire;

/// Compact JSON with object keys in sorted order.
pub fn canonical_json<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).expect("value serializes to JSON").to_string()
}
