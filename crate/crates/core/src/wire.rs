//! Session-less provider datagrams.
//!
//! One JSON message per UDP datagram (or per line over the TCP fallback):
//!
//! ```json
//! {"v":1,"provider":{"id":"foo","type":"camera"},"seq":12,"time_us":1700000000000000,
//!  "observations":[{"item":"detection","kind":"marker.QR","ext_id":"bar",
//!                   "pose":{"t":[0.1,0.2,0.3],"q":[1.0,0.0,0.0,0.0]},"sigma":0.01,"res":0.001}]}
//! ```
//!
//! A detection may carry `"tf_mat"` (16 numbers, row-major homogeneous
//! matrix) instead of `"pose"`. Decoding never panics; every failure is a
//! [`WireError`].

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{GeometryPrimitive, Pose6D};
use crate::objects::AttributeMutation;

pub const PROTOCOL_VERSION: u64 = 1;
pub const MAX_OBSERVATIONS: usize = 64;
pub const MAX_DATAGRAM_BYTES: usize = 60 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("encoded message is {0} bytes, above the single-datagram limit")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderInfo {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProviderMessage {
    pub v: u64,
    pub provider: ProviderInfo,
    pub seq: u64,
    pub time_us: u64,
    pub observations: Vec<ObservationItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "item", rename_all = "snake_case")]
pub enum ObservationItem {
    Detection(Detection),
    AttributeUpsert(AttributeUpsertItem),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub kind: String,
    pub ext_id: String,
    /// The detected entity expressed in the sensor frame.
    pub pose: Pose6D,
    pub sigma: f64,
    pub res: f64,
}

/// Addresses an object directly or through an external identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObjectRef {
    Id(String),
    External { kind: String, ext_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeUpsertItem {
    pub object: ObjectRef,
    #[serde(default)]
    pub mutations: Vec<AttributeMutation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryPrimitive>,
}

impl ProviderMessage {
    pub fn new(provider_id: &str, provider_type: &str, seq: u64, time_us: u64) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            provider: ProviderInfo { id: provider_id.into(), kind: provider_type.into() },
            seq,
            time_us,
            observations: Vec::new(),
        }
    }

    pub fn with_detection(mut self, kind: &str, ext_id: &str, pose: Pose6D, sigma: f64, res: f64) -> Self {
        self.observations.push(ObservationItem::Detection(Detection {
            kind: kind.into(),
            ext_id: ext_id.into(),
            pose,
            sigma,
            res,
        }));
        self
    }

    pub fn with_item(mut self, item: ObservationItem) -> Self {
        self.observations.push(item);
        self
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMessage {
    v: u64,
    provider: ProviderInfo,
    seq: u64,
    time_us: u64,
    #[serde(default)]
    observations: Vec<RawItem>,
}

#[derive(Deserialize)]
#[serde(tag = "item", rename_all = "snake_case")]
enum RawItem {
    Detection(RawDetection),
    AttributeUpsert(AttributeUpsertItem),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    kind: String,
    ext_id: String,
    #[serde(default)]
    pose: Option<RawPose>,
    #[serde(default)]
    tf_mat: Option<Vec<f64>>,
    sigma: f64,
    res: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    t: [f64; 3],
    q: [f64; 4],
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::MalformedMessage(msg.into())
}

pub fn decode_provider_message(bytes: &[u8]) -> Result<ProviderMessage, WireError> {
    if bytes.is_empty() {
        return Err(malformed("empty datagram"));
    }
    if bytes.len() > MAX_DATAGRAM_BYTES {
        return Err(malformed(format!("{} bytes exceeds datagram limit", bytes.len())));
    }
    let value: Value = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
    match value.get("v") {
        Some(v) => match v.as_u64() {
            Some(PROTOCOL_VERSION) => {}
            Some(other) => return Err(WireError::UnsupportedVersion(other)),
            None => return Err(malformed("field `v` must be an unsigned integer")),
        },
        None => return Err(malformed("missing field `v`")),
    }
    let raw: RawMessage = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if raw.provider.id.is_empty() {
        return Err(malformed("provider.id must be non-empty"));
    }
    if raw.observations.len() > MAX_OBSERVATIONS {
        return Err(malformed(format!("{} observations exceed limit of {MAX_OBSERVATIONS}", raw.observations.len())));
    }
    let mut observations = Vec::with_capacity(raw.observations.len());
    for item in raw.observations {
        observations.push(match item {
            RawItem::Detection(d) => ObservationItem::Detection(convert_detection(d)?),
            RawItem::AttributeUpsert(a) => ObservationItem::AttributeUpsert(a),
        });
    }
    Ok(ProviderMessage {
        v: raw.v,
        provider: raw.provider,
        seq: raw.seq,
        time_us: raw.time_us,
        observations,
    })
}

fn convert_detection(d: RawDetection) -> Result<Detection, WireError> {
    let pose = match (d.pose, d.tf_mat) {
        (Some(p), None) => Pose6D::new(p.t, p.q).map_err(|e| WireError::InvalidTransform(e.to_string()))?,
        (None, Some(m)) => {
            let m: [f64; 16] = m
                .try_into()
                .map_err(|v: Vec<f64>| malformed(format!("tf_mat needs 16 numbers, got {}", v.len())))?;
            Pose6D::from_row_major(&m).map_err(|e| WireError::InvalidTransform(e.to_string()))?
        }
        (Some(_), Some(_)) => return Err(malformed("detection carries both pose and tf_mat")),
        (None, None) => return Err(malformed("detection needs pose or tf_mat")),
    };
    Ok(Detection { kind: d.kind, ext_id: d.ext_id, pose, sigma: d.sigma, res: d.res })
}

/// Canonical encoding (sorted keys, compact). Fails if the result would not
/// fit one datagram.
pub fn encode_provider_message(m: &ProviderMessage) -> Result<Vec<u8>, WireError> {
    let bytes = crate::canonical_json(m).into_bytes();
    if bytes.len() > MAX_DATAGRAM_BYTES {
        return Err(WireError::TooLarge(bytes.len()));
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    pub const QR_EXAMPLE: &str = r#"{"v":1,"provider":{"id":"foo","type":"camera"},"seq":12,"time_us":1700000000000000,"observations":[{"item":"detection","kind":"marker.QR","ext_id":"bar","pose":{"t":[0.1,0.2,0.3],"q":[1.0,0.0,0.0,0.0]},"sigma":0.01,"res":0.001}]}"#;

    #[test]
    fn qr_example_round_trips_to_canonical_form() {
        let m = decode_provider_message(QR_EXAMPLE.as_bytes()).unwrap();
        assert_eq!(m.provider.id, "foo");
        assert_eq!(m.provider.kind, "camera");
        let ObservationItem::Detection(d) = &m.observations[0] else { panic!() };
        assert_eq!((d.kind.as_str(), d.ext_id.as_str()), ("marker.QR", "bar"));
        let canonical = serde_json::from_str::<Value>(QR_EXAMPLE).unwrap().to_string();
        assert_eq!(String::from_utf8(encode_provider_message(&m).unwrap()).unwrap(), canonical);
    }

    #[test]
    fn matrix_form_is_converted() {
        let mut v: Value = serde_json::from_str(QR_EXAMPLE).unwrap();
        let det = &mut v["observations"][0];
        det.as_object_mut().unwrap().remove("pose");
        det["tf_mat"] = json!([0, -1, 0, 1, 1, 0, 0, 2, 0, 0, 1, 3, 0, 0, 0, 1]);
        let m = decode_provider_message(v.to_string().as_bytes()).unwrap();
        let ObservationItem::Detection(d) = &m.observations[0] else { panic!() };
        assert_eq!(d.pose.translation(), [1.0, 2.0, 3.0]);
        let p = d.pose.transform_point([1.0, 0.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn error_classes() {
        assert!(matches!(decode_provider_message(b""), Err(WireError::MalformedMessage(_))));
        assert!(matches!(decode_provider_message(b"{not json"), Err(WireError::MalformedMessage(_))));
        let v2 = QR_EXAMPLE.replacen("\"v\":1", "\"v\":2", 1);
        assert_eq!(decode_provider_message(v2.as_bytes()), Err(WireError::UnsupportedVersion(2)));
        let shear = QR_EXAMPLE.replace(
            r#""pose":{"t":[0.1,0.2,0.3],"q":[1.0,0.0,0.0,0.0]}"#,
            r#""tf_mat":[1,0.5,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]"#,
        );
        assert!(matches!(decode_provider_message(shear.as_bytes()), Err(WireError::InvalidTransform(_))));
        let zero_q = QR_EXAMPLE.replace("[1.0,0.0,0.0,0.0]", "[0,0,0,0]");
        assert!(matches!(decode_provider_message(zero_q.as_bytes()), Err(WireError::InvalidTransform(_))));
        let no_id = QR_EXAMPLE.replace("\"id\":\"foo\"", "\"id\":\"\"");
        assert!(matches!(decode_provider_message(no_id.as_bytes()), Err(WireError::MalformedMessage(_))));
    }

    #[test]
    fn observation_limit() {
        let mut m = ProviderMessage::new("cam", "camera", 1, 1);
        for i in 0..=MAX_OBSERVATIONS {
            m = m.with_detection("marker.QR", &i.to_string(), Pose6D::identity(), 0.1, 0.1);
        }
        let bytes = encode_provider_message(&m).unwrap();
        assert!(matches!(decode_provider_message(&bytes), Err(WireError::MalformedMessage(_))));
    }

    #[test]
    fn attribute_upsert_items() {
        let text = r#"{"v":1,"provider":{"id":"mapper","type":"tool"},"seq":1,"time_us":5,"observations":[
            {"item":"attribute_upsert","object":"rack3","mutations":[{"op":"set","path":"type","value":"rack"}]},
            {"item":"attribute_upsert","object":{"kind":"marker.QR","ext_id":"bar"},"mutations":[{"op":"delete","path":"old"}],"geometry":{"shape":"sphere","radius":0.5}}]}"#;
        let m = decode_provider_message(text.as_bytes()).unwrap();
        assert_eq!(m.observations.len(), 2);
        let ObservationItem::AttributeUpsert(a) = &m.observations[1] else { panic!() };
        assert_eq!(a.object, ObjectRef::External { kind: "marker.QR".into(), ext_id: "bar".into() });
        assert_eq!(a.geometry, Some(GeometryPrimitive::Sphere { radius: 0.5 }));
        let again = decode_provider_message(&encode_provider_message(&m).unwrap()).unwrap();
        assert_eq!(again, m);
    }
}
