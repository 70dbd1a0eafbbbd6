mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use serde_json::{json, Value};

use common::*;
use rail::geometry::{GeometryPrimitive, Pose6D};
use rail::graph::{FrameId, GraphState, TransformObservation};
use rail::model::EnvironmentModel;
use rail::objects::ObjectUpsert;
use rail::sim::{provider_message, simulate, Scenario};
use rail::snapshot::{export_snapshot, import_snapshot, model_digest, parse_snapshot, to_canonical_json};
use rail::wire::{decode_provider_message, encode_provider_message};

const QR_MESSAGE: &str = r#"{"v":1,"provider":{"id":"foo","type":"camera"},"seq":12,"time_us":1700000000000000,"observations":[{"item":"detection","kind":"marker.QR","ext_id":"bar","pose":{"t":[0.1,0.2,0.3],"q":[1.0,0.0,0.0,0.0]},"sigma":0.01,"res":0.001}]}"#;

fn fid(s: &str) -> FrameId {
    FrameId::new(s).unwrap()
}

fn pose() -> impl Strategy<Value = Pose6D> {
    (prop::array::uniform3(-10.0..10.0f64), prop::array::uniform4(-1.0..1.0f64))
        .prop_filter("non-degenerate rotation", |(_, q)| q.iter().map(|v| v * v).sum::<f64>() > 0.01)
        .prop_map(|(t, q)| Pose6D::new(t, q).unwrap())
}

fn observation() -> impl Strategy<Value = TransformObservation> {
    (0..4usize, 1..4usize, 0..2usize, pose(), 0..5u64, 0..3u64).prop_map(|(a, d, p, pose, time, seq)| {
        TransformObservation {
            parent: fid(&format!("f{a}")),
            child: fid(&format!("f{}", (a + d) % 4)),
            provider: format!("p{p}"),
            pose,
            sigma: 0.01,
            resolution: 0.001,
            time_us: time,
            seq,
        }
    })
}

proptest! {
    #[test]
    fn compose_matches_matrix_product(a in pose(), b in pose()) {
        let got = mat_of(&a.compose(&b));
        prop_assert!(max_abs_diff(&got, &mul(&mat_of(&a), &mat_of(&b))) < 1e-9);
        prop_assert!(max_abs_diff(&mat_of(&a.inverse().compose(&a)), &identity()) < 1e-9);
    }

    #[test]
    fn row_major_round_trip(a in pose()) {
        let back = Pose6D::from_row_major(&a.to_row_major()).unwrap();
        prop_assert!(max_abs_diff(&mat_of(&back), &mat_of(&a)) < 1e-9);
    }

    #[test]
    fn point_distance_to_primitives(p in prop::array::uniform3(-5.0..5.0f64), r in 0.1..3.0f64, h in prop::array::uniform3(0.1..3.0f64)) {
        for g in [GeometryPrimitive::Point, GeometryPrimitive::Sphere { radius: r }, GeometryPrimitive::Box { half_extents: h }] {
            prop_assert!((g.distance_to_local(p) - primitive_distance(&g, p)).abs() < 1e-12);
        }
    }

    /// Final state depends only on the set of observations, not arrival order.
    /// A stamp identifies one message, so stamps are unique per key.
    #[test]
    fn last_writer_wins_is_order_independent(obs in prop::collection::vec(observation(), 1..24), seed in any::<u64>()) {
        let mut seen = std::collections::BTreeSet::new();
        let obs: Vec<_> = obs.into_iter().filter(|o| seen.insert((o.key(), o.time_us, o.seq))).collect();
        let mut shuffled = obs.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let (mut a, mut b) = (GraphState::new(), GraphState::new());
        obs.iter().for_each(|o| { a.upsert(o); });
        shuffled.iter().for_each(|o| { b.upsert(o); });
        let ea: Vec<_> = a.edges().cloned().collect();
        let eb: Vec<_> = b.edges().cloned().collect();
        prop_assert_eq!(&ea, &eb);
        // Oracle: the maximal (time, seq) per key.
        let mut want: BTreeMap<_, TransformObservation> = BTreeMap::new();
        for o in &obs {
            let cur = want.get(&o.key());
            if cur.is_none_or(|c| (o.time_us, o.seq) > (c.time_us, c.seq)) {
                want.insert(o.key(), o.clone());
            }
        }
        prop_assert_eq!(ea.len(), want.len());
        for e in &ea {
            let w = &want[&e.key()];
            prop_assert_eq!(e, w);
        }
    }

    /// Replaying the change feed from zero reproduces the store.
    #[test]
    fn feed_replay_reproduces_state(obs in prop::collection::vec(observation(), 1..24), removals in prop::collection::vec(0..24usize, 0..6)) {
        let m = EnvironmentModel::default();
        for o in &obs {
            m.graph.upsert_edge(o.clone()).unwrap();
        }
        for i in removals {
            let key = obs[i % obs.len()].key();
            m.graph.remove_edge(&key);
        }
        let mut replica = GraphState::new();
        for ev in m.graph.changes(0).unwrap().drain().unwrap() {
            replica.apply_event(&ev).unwrap();
        }
        let want: Vec<_> = m.graph.read().edges().cloned().collect();
        let got: Vec<_> = replica.edges().cloned().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode_provider_message(&bytes);
    }

    #[test]
    fn decoder_survives_qr_mutations(i in 0..QR_MESSAGE.len(), b in any::<u8>()) {
        let mut bytes = QR_MESSAGE.as_bytes().to_vec();
        bytes[i] = b;
        let _ = decode_provider_message(&bytes);
    }

    #[test]
    fn snapshot_round_trip(n in 1..12usize, obs in prop::collection::vec(observation(), 0..16)) {
        let m = EnvironmentModel::default();
        for i in 0..n {
            m.objects.upsert_object(&fid(&format!("o{i}")), ObjectUpsert::new().set("type", "rack").set("slot", i as u64)).unwrap();
        }
        for o in obs {
            m.graph.upsert_edge(o).unwrap();
        }
        let text = to_canonical_json(&export_snapshot(&m, true));
        let fresh = EnvironmentModel::default();
        import_snapshot(&fresh, &parse_snapshot(&text).unwrap()).unwrap();
        prop_assert_eq!(model_digest(&fresh), model_digest(&m));
        prop_assert_eq!(to_canonical_json(&export_snapshot(&fresh, true)), text);
    }
}

#[test]
fn qr_message_encodes_canonically() {
    let m = decode_provider_message(QR_MESSAGE.as_bytes()).unwrap();
    let bytes = encode_provider_message(&m).unwrap();
    let canonical = rail::canonical_json(&serde_json::from_str::<Value>(QR_MESSAGE).unwrap());
    assert_eq!(String::from_utf8(bytes).unwrap(), canonical);
}

#[test]
fn tf_mat_is_accepted_in_place_of_pose() {
    let text = QR_MESSAGE.replace(
        r#""pose":{"t":[0.1,0.2,0.3],"q":[1.0,0.0,0.0,0.0]}"#,
        r#""tf_mat":[1,0,0,0.1, 0,1,0,0.2, 0,0,1,0.3, 0,0,0,1]"#,
    );
    let a = decode_provider_message(QR_MESSAGE.as_bytes()).unwrap();
    let b = decode_provider_message(text.as_bytes()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn import_is_idempotent() {
    let m = EnvironmentModel::default();
    m.objects.upsert_object(&fid("rack-1"), ObjectUpsert::new().set("type", "rack")).unwrap();
    m.graph
        .upsert_edge(TransformObservation {
            parent: fid("world"),
            child: fid("rack-1"),
            provider: "survey".into(),
            pose: Pose6D::from_translation(1.0, 2.0, 0.0),
            sigma: 0.001,
            resolution: 0.001,
            time_us: 5,
            seq: 1,
        })
        .unwrap();
    let snap = export_snapshot(&m, true);
    let target = EnvironmentModel::default();
    import_snapshot(&target, &snap).unwrap();
    let (digest, heads) = (model_digest(&target), target.as_of());
    import_snapshot(&target, &snap).unwrap();
    assert_eq!(model_digest(&target), digest);
    assert_eq!(target.as_of(), heads, "a repeated import commits nothing");
}

/// One lossless provider: the simulated store equals writing every
/// observation straight into a fresh model.
#[test]
fn lossless_run_equals_direct_writes() {
    let s = Scenario::from_json(
        &json!({
            "seed": 4,
            "duration_us": 5_000_000,
            "topology": [{"node": "n1"}],
            "objects": [{"id": "pallet-17", "attributes": {"marker": {"QR": {"id": "bar"}}}}],
            "providers": [{"id": "foo", "type": "camera", "rate_hz": 20.0, "observations": [
                {"kind": "marker.QR", "ext_id": "bar", "pose": {"t": [1.0, 0.0, 0.0], "q": [1.0, 0.0, 0.0, 0.0]}, "sigma": 0.01, "res": 0.001}
            ]}]
        })
        .to_string(),
    )
    .unwrap();
    let out = simulate(&s).unwrap();
    assert_eq!(out.report.providers["foo"].sent, 100);
    assert_eq!(out.report.delivered.len(), 100);

    let direct = Arc::new(EnvironmentModel::default());
    for o in &s.objects {
        let mut up = ObjectUpsert::new();
        for (k, v) in &o.attributes {
            up = up.set(k.as_str(), v.clone());
        }
        direct.objects.upsert_object(&o.id, up).unwrap();
    }
    direct.objects.upsert_object(&fid("foo"), ObjectUpsert::new().set("sensor.type", "camera")).unwrap();
    for d in &out.report.delivered {
        let m = provider_message(&s.providers[0], d.seq, d.sent_us);
        let v = serde_json::to_value(&m).unwrap();
        let o = &v["observations"][0];
        direct
            .graph
            .upsert_edge(TransformObservation {
                parent: fid("foo"),
                child: fid("pallet-17"),
                provider: "foo".into(),
                pose: serde_json::from_value(o["pose"].clone()).unwrap(),
                sigma: o["sigma"].as_f64().unwrap(),
                resolution: o["res"].as_f64().unwrap(),
                time_us: d.sent_us,
                seq: d.seq,
            })
            .unwrap();
    }
    assert_eq!(out.report.digests["master"], model_digest(&direct));
}
