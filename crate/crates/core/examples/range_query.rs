//! Objects near a point: every candidate is placed via the transform graph
//! and tested against its geometry.

use rail::geometry::{GeometryPrimitive, Pose6D};
use rail::graph::{FrameId, ObjectId, TransformObservation};
use rail::model::EnvironmentModel;
use rail::objects::{AttributePredicate, ObjectUpsert};
use rail::query::{execute_query, Query, QueryPayload};

fn main() {
    let m = EnvironmentModel::default();
    let shelves = [("shelf-a", 1.0, 0.3), ("shelf-b", 2.5, 0.5), ("shelf-c", 6.0, 0.5), ("bin-1", 1.2, 0.1)];
    for (i, (id, x, r)) in shelves.iter().enumerate() {
        let kind = if id.starts_with("shelf") { "shelf" } else { "bin" };
        let up = ObjectUpsert::new().set("type", kind).geometry(GeometryPrimitive::Sphere { radius: *r });
        m.objects.upsert_object(&ObjectId::new(*id).unwrap(), up).unwrap();
        m.graph
            .upsert_edge(TransformObservation {
                parent: FrameId::new("world").unwrap(),
                child: FrameId::new(*id).unwrap(),
                provider: "survey".into(),
                pose: Pose6D::from_translation(*x, 0.0, 0.0),
                sigma: 0.01,
                resolution: 0.01,
                time_us: 1,
                seq: i as u64,
            })
            .unwrap();
    }
    // An object without any pose is reported as unreachable, not as a miss.
    m.objects.upsert_object(&ObjectId::new("lost-shelf").unwrap(), ObjectUpsert::new().set("type", "shelf")).unwrap();

    for predicate in [AttributePredicate::all(), AttributePredicate::eq("type", "shelf")] {
        let q = Query::RangeQuery { frame: FrameId::new("world").unwrap(), center: [0.0; 3], radius: 2.2, predicate };
        let r = execute_query(&m, &q).unwrap();
        if let QueryPayload::Range(r) = r.payload {
            let hits: Vec<_> = r.hits.iter().map(|h| format!("{}@{:.1}", h.id.as_str(), h.distance)).collect();
            println!("hits {:?}, unreachable {}", hits, r.excluded_unreachable);
        }
    }
}
