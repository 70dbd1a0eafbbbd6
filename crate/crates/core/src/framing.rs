//! Consumer protocol: 4-byte big-endian length prefix followed by one
//! canonical JSON document.
//!
//! ```text
//! request       {"id":7,"op":"get_transform","src":"A","dst":"C","constraints":{"max_hops":4},"follow":false}
//! response      {"id":7,"ok":true,"result":{...},"as_of":{"graph":123,"objects":456}}
//! error         {"id":7,"ok":false,"error":"NoPath","reason":"constraint_filtered"}
//! subscription  {"sub":7,"seq":{"graph":124},"delta":"changed","payload":{...}}
//! overflow      {"sub":7,"ok":false,"error":"SubscriptionOverflow"}
//! ```
//!
//! Besides queries the same connection accepts the map administration
//! operations used by `rail mapctl`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::GeometryPrimitive;
use crate::graph::{ObjectId, TransformObservation};
use crate::model::AsOf;
use crate::objects::AttributeMutation;
use crate::query::{Delta, Query, QueryError};
use crate::snapshot::MapSnapshot;

pub const DEFAULT_MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds limit of {limit}")]
    TooLarge { len: usize, limit: usize },
    #[error("connection closed mid-frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> Result<(), FrameError> {
    let len = u32::try_from(body.len()).map_err(|_| FrameError::TooLarge { len: body.len(), limit: u32::MAX as usize })?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read, limit: usize) -> Result<Option<Vec<u8>>, FrameError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > limit {
        return Err(FrameError::TooLarge { len, limit });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Truncated,
        _ => FrameError::Io(e),
    })?;
    Ok(Some(body))
}

pub fn write_json<T: Serialize>(w: &mut impl Write, v: &T) -> Result<(), FrameError> {
    write_frame(w, crate::canonical_json(v).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdminOp {
    Import {
        snapshot: MapSnapshot,
    },
    Export {
        #[serde(default)]
        include_data: bool,
    },
    AddObject {
        object: ObjectId,
        #[serde(default)]
        mutations: Vec<AttributeMutation>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        geometry: Option<GeometryPrimitive>,
    },
    AddEdge {
        edge: TransformObservation,
    },
    PutBlob {
        /// Base64 content.
        data: String,
        media_type: String,
    },
    /// Turns the connection into a replication stream starting after the
    /// given cursors (slave to master).
    Replicate {
        #[serde(default)]
        graph_after: u64,
        #[serde(default)]
        objects_after: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RequestBody {
    Query(Query),
    Admin(AdminOp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub body: RequestBody,
    #[serde(default)]
    pub follow: bool,
}

impl Request {
    pub fn query(id: u64, q: Query, follow: bool) -> Self {
        Self { id, body: RequestBody::Query(q), follow }
    }

    pub fn admin(id: u64, op: AdminOp) -> Self {
        Self { id, body: RequestBody::Admin(op), follow: false }
    }
}

/// Splits a request frame into its id (when recoverable) and the parse
/// result, so malformed requests can still be answered by id.
pub fn parse_request(bytes: &[u8]) -> (u64, Result<Request, QueryError>) {
    let value: Value = match serde_json::from_slice(bytes) {
        Ok(v) => v,
        Err(e) => return (0, Err(QueryError::MalformedQuery(e.to_string()))),
    };
    let id = value.get("id").and_then(Value::as_u64).unwrap_or(0);
    let r = serde_json::from_value::<Request>(value).map_err(|e| QueryError::MalformedQuery(e.to_string()));
    (id, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_of: Option<AsOf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Response {
    pub fn ok(id: u64, result: Value, as_of: Option<AsOf>) -> Self {
        Self { id, ok: true, result: Some(result), as_of, error: None, reason: None }
    }

    pub fn err(id: u64, e: &QueryError) -> Self {
        Self { id, ok: false, result: None, as_of: None, error: Some(e.code().into()), reason: Some(e.reason()) }
    }

    pub fn err_code(id: u64, code: &str, reason: impl Into<String>) -> Self {
        Self { id, ok: false, result: None, as_of: None, error: Some(code.into()), reason: Some(reason.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverflowFrame {
    pub sub: u64,
    pub ok: bool,
    pub error: String,
}

impl OverflowFrame {
    pub fn new(sub: u64) -> Self {
        Self { sub, ok: false, error: "SubscriptionOverflow".into() }
    }
}

/// Any frame a server may send.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ServerFrame {
    Response(Response),
    Delta(Delta),
    Overflow(OverflowFrame),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FrameId, NoPathReason, PathConstraints};

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        write_frame(&mut buf, b"[1]").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 2]);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r, 16).unwrap().unwrap(), b"{}");
        assert_eq!(read_frame(&mut r, 16).unwrap().unwrap(), b"[1]");
        assert!(read_frame(&mut r, 16).unwrap().is_none());
    }

    #[test]
    fn oversized_and_truncated_frames() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &[b'x'; 32]).unwrap();
        assert!(matches!(read_frame(&mut &buf[..], 8), Err(FrameError::TooLarge { len: 32, .. })));
        assert!(matches!(read_frame(&mut &buf[..10], 64), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut &buf[..2], 64), Err(FrameError::Truncated)));
    }

    #[test]
    fn request_and_error_shapes() {
        let text = r#"{"id":7,"op":"get_transform","src":"A","dst":"C","constraints":{"max_hops":4},"follow":false}"#;
        let (id, req) = parse_request(text.as_bytes());
        assert_eq!(id, 7);
        let req = req.unwrap();
        let expect = Query::GetTransform {
            src: FrameId::new("A").unwrap(),
            dst: FrameId::new("C").unwrap(),
            constraints: PathConstraints::default().with_max_hops(4),
        };
        assert_eq!(req, Request::query(7, expect, false));
        let e = Response::err(7, &QueryError::NoPath(NoPathReason::ConstraintFiltered));
        assert_eq!(
            crate::canonical_json(&e),
            r#"{"error":"NoPath","id":7,"ok":false,"reason":"constraint_filtered"}"#
        );
        let (id, bad) = parse_request(br#"{"id":9,"op":"teleport"}"#);
        assert_eq!(id, 9);
        assert!(bad.is_err());
    }

    #[test]
    fn every_query_round_trips_inside_a_request() {
        let f = |s: &str| FrameId::new(s).unwrap();
        let queries = [
            Query::GetObject { id: f("rack-3") },
            Query::FindObjects { predicate: Default::default() },
            Query::GetTransform { src: f("A"), dst: f("B"), constraints: PathConstraints::default() },
            Query::RangeQuery { frame: f("A"), center: [1.0, 2.0, 3.0], radius: 0.5, predicate: Default::default() },
            Query::GetBlob { hash: "00".repeat(32) },
        ];
        for q in queries {
            let req = Request::query(42, q, true);
            let text = crate::canonical_json(&req);
            let (id, back) = parse_request(text.as_bytes());
            assert_eq!(id, 42, "{text}");
            assert_eq!(back.unwrap(), req, "{text}");
        }
        let (id, r) = parse_request(br#"{"id":3,"op":"get_object","object":"rack-3"}"#);
        assert_eq!((id, r.unwrap().body), (3, RequestBody::Query(Query::GetObject { id: FrameId::new("rack-3").unwrap() })));
    }

    #[test]
    fn admin_requests_parse() {
        let (_, r) = parse_request(br#"{"id":1,"op":"add_object","object":"x","mutations":[{"op":"set","path":"a","value":1}]}"#);
        assert!(matches!(r.unwrap().body, RequestBody::Admin(AdminOp::AddObject { .. })));
        let (_, r) = parse_request(br#"{"id":1,"op":"export","include_data":true}"#);
        assert_eq!(r.unwrap().body, RequestBody::Admin(AdminOp::Export { include_data: true }));
    }
}
