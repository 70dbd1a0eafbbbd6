//! Session-less ingest: a camera's QR detection datagram becomes a transform
//! edge, with the marker resolved to the object carrying its id.

use std::sync::Arc;

use rail::config::IngestConfig;
use rail::graph::{FrameId, ObjectId, PathConstraints};
use rail::ingest::{EntryPoint, IngestOutcome};
use rail::model::EnvironmentModel;
use rail::objects::ObjectUpsert;

const QR: &str = r#"{"v":1,"provider":{"id":"foo","type":"camera"},"seq":12,"time_us":1700000000000000,"observations":[{"item":"detection","kind":"marker.QR","ext_id":"bar","pose":{"t":[0.1,0.2,0.3],"q":[1.0,0.0,0.0,0.0]},"sigma":0.01,"res":0.001}]}"#;

fn main() {
    let model = Arc::new(EnvironmentModel::default());
    let pallet = ObjectId::new("pallet-17").unwrap();
    model.objects.upsert_object(&pallet, ObjectUpsert::new().set("marker.QR.id", "bar")).unwrap();

    let entry = EntryPoint::new(model.clone(), &IngestConfig::default(), 1);
    for attempt in ["first", "duplicate"] {
        match entry.ingest_datagram(QR.as_bytes()) {
            IngestOutcome::Applied { handler, report } => println!(
                "{attempt}: handler {} on {}, applied {} superseded {}",
                handler.id.0, handler.worker.0, report.edges_applied, report.edges_superseded
            ),
            IngestOutcome::Dropped(reason) => println!("{attempt}: dropped {reason:?}"),
        }
    }
    println!("garbage: {:?}", entry.ingest_datagram(b"\x00not json"));

    let t = model
        .graph
        .best_path(&FrameId::new("foo").unwrap(), &FrameId::new(pallet.as_str()).unwrap(), &PathConstraints::default())
        .unwrap();
    println!("foo -> pallet-17: {:?} sigma {}", t.pose.translation(), t.sigma);
    println!("handler stats: {:?}", entry.handler_stats("foo").unwrap());
    println!("counters: {}", rail::canonical_json(&entry.counters()));
}
