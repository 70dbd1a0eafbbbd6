//! Followed queries: an initial result, then entered/left/changed deltas as
//! commits land.

use rail::geometry::Pose6D;
use rail::graph::{FrameId, ObjectId, TransformObservation};
use rail::model::EnvironmentModel;
use rail::objects::{AttributePredicate, ObjectUpsert};
use rail::query::{open_subscription, Query, DEFAULT_SUBSCRIPTION_BUFFER};

fn main() {
    let m = EnvironmentModel::default();
    let forklifts = Query::FindObjects { predicate: AttributePredicate::eq("type", "forklift") };
    let (initial, mut sub) = open_subscription(&m, 1, forklifts, DEFAULT_SUBSCRIPTION_BUFFER).unwrap();
    println!("initial: {}", rail::canonical_json(&initial.unwrap().payload));

    let id = |s: &str| ObjectId::new(s).unwrap();
    m.objects.upsert_object(&id("fl-1"), ObjectUpsert::new().set("type", "forklift")).unwrap();
    m.objects.upsert_object(&id("fl-2"), ObjectUpsert::new().set("type", "forklift")).unwrap();
    m.objects.upsert_object(&id("crate-9"), ObjectUpsert::new().set("type", "crate")).unwrap();
    m.objects.upsert_object(&id("fl-1"), ObjectUpsert::new().set("battery", 0.8)).unwrap();
    m.objects.upsert_object(&id("fl-2"), ObjectUpsert::new().set("type", "retired")).unwrap();
    for d in sub.poll().unwrap() {
        println!("delta {:?} {} at {:?}", d.delta, d.key, d.seq);
    }

    // A transform subscription that starts before either frame exists.
    let q = Query::GetTransform {
        src: FrameId::new("world").unwrap(),
        dst: FrameId::new("fl-1").unwrap(),
        constraints: Default::default(),
    };
    let (initial, mut sub) = open_subscription(&m, 2, q, DEFAULT_SUBSCRIPTION_BUFFER).unwrap();
    println!("transform initially: {}", initial.unwrap_err());
    for x in [1.0, 2.0] {
        m.graph
            .upsert_edge(TransformObservation {
                parent: FrameId::new("world").unwrap(),
                child: FrameId::new("fl-1").unwrap(),
                provider: "uwb".into(),
                pose: Pose6D::from_translation(x, 0.0, 0.0),
                sigma: 0.1,
                resolution: 0.05,
                time_us: x as u64,
                seq: x as u64,
            })
            .unwrap();
    }
    for d in sub.poll().unwrap() {
        println!("delta {:?} {}", d.delta, rail::canonical_json(&d.payload));
    }
}
