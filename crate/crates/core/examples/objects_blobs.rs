//! Semantic objects with nested attributes, indexed lookup, content-addressed
//! blobs and canonical snapshot export.

use rail::geometry::GeometryPrimitive;
use rail::graph::ObjectId;
use rail::model::EnvironmentModel;
use rail::objects::{AttributePredicate, ObjectUpsert};
use rail::snapshot::{export_snapshot, model_digest, to_canonical_json};

fn main() {
    let m = EnvironmentModel::default();
    let cad = m.blobs.put_blob(b"solid pallet ... endsolid", "model/stl").unwrap();
    let again = m.blobs.put_blob(b"solid pallet ... endsolid", "model/stl").unwrap();
    println!("blob {} stored once: {}", &cad.hash[..12], cad == again && m.blobs.len() == 1);

    for (id, qr) in [("pallet-17", "bar"), ("pallet-18", "baz")] {
        let up = ObjectUpsert::new()
            .set("type", "pallet")
            .set("marker.QR.id", qr)
            .set("load.kg", 420)
            .geometry(GeometryPrimitive::Box { half_extents: [0.6, 0.4, 0.1] })
            .blob("cad", cad.clone());
        let c = m.objects.upsert_object(&ObjectId::new(id).unwrap(), up).unwrap();
        println!("{id}: rev {} at feed seq {}", c.rev, c.seq);
    }
    m.objects
        .upsert_object(&ObjectId::new("pallet-18").unwrap(), ObjectUpsert::new().delete("load"))
        .unwrap();

    let by_marker = m.objects.find_objects(&AttributePredicate::eq("marker.QR.id", "bar")).unwrap();
    println!("marker bar -> {:?}", by_marker.iter().map(|d| d.id.as_str()).collect::<Vec<_>>());
    let loaded = m.objects.find_objects(&AttributePredicate::eq("type", "pallet")).unwrap();
    for d in loaded {
        println!("{} rev {} load {:?}", d.id.as_str(), d.rev, d.get("load.kg"));
    }

    let snap = export_snapshot(&m, false);
    println!("snapshot: {} bytes, digest {}", to_canonical_json(&snap).len(), &model_digest(&m)[..16]);
}
