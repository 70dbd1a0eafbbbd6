//! A lossy, duplicating network with several providers and consumers, run
//! twice to show the report is reproducible byte for byte.

use rail::sim::{run_scenario, Scenario};

fn main() {
    let path = std::env::args().nth(1);
    let text = match &path {
        Some(p) => std::fs::read_to_string(p).expect("read scenario"),
        None => serde_json::json!({
            "seed": 2024,
            "duration_us": 3_000_000,
            "network": {"loss": 0.3, "duplicate": 0.2, "min_latency_us": 100, "max_latency_us": 20_000},
            "topology": [{"node": "n1"}, {"node": "n2"}],
            "providers": (0..4).map(|i| serde_json::json!({
                "id": format!("cam-{i}"), "type": "camera", "rate_hz": 30,
                "observations": [{"kind": "marker.QR", "ext_id": format!("m{}", i % 2),
                    "pose": {"t": [i as f64, 0.5, 0.0], "q": [1, 0, 0, 0]}, "sigma": 0.01, "res": 0.001}]
            })).collect::<Vec<_>>(),
            "consumers": [{"id": "lbs", "queries": [
                {"op": "find_objects", "predicate": [], "follow": true},
                {"op": "get_object", "object": "cam-0"}]}]
        })
        .to_string(),
    };
    let scenario = Scenario::from_json(&text).expect("valid scenario");
    let a = run_scenario(&scenario).expect("run").to_canonical_json();
    let b = run_scenario(&scenario).expect("run").to_canonical_json();
    let report = run_scenario(&scenario).unwrap();
    for (id, p) in &report.providers {
        println!(
            "{id}: sent {} lost {} dup {} delivered {} applied {} superseded {}",
            p.sent, p.lost_in_network, p.duplicated, p.delivered, p.edges_applied, p.edges_superseded
        );
    }
    println!("latency histogram (us bucket -> count): {:?}", report.latency_histogram_us);
    println!("master digest {}", report.digests.get("master").map(String::as_str).unwrap_or("-"));
    println!("identical reports: {} ({} bytes)", a == b, a.len());
}
