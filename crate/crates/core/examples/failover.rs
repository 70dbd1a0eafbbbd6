//! Master failure under sync replication: the management engine promotes the
//! slave, consumers and providers follow the new announcement, and nothing a
//! subscriber saw is lost.

use rail::sim::{run_scenario, Scenario};

fn main() {
    let scenario = Scenario::from_json(
        r#"{
        "seed": 11,
        "duration_us": 6000000,
        "network": {"loss": 0.05, "min_latency_us": 200, "max_latency_us": 3000},
        "replication": "sync",
        "topology": [{"node": "n1"}, {"node": "n2"}, {"node": "n3"}],
        "objects": [{"id": "pallet-17", "attributes": {"marker": {"QR": {"id": "bar"}}}}],
        "providers": [{"id": "foo", "type": "camera", "rate_hz": 25, "observations": [
            {"kind": "marker.QR", "ext_id": "bar", "pose": {"t": [1, 0, 0], "q": [1, 0, 0, 0]}, "sigma": 0.01, "res": 0.001}]}],
        "consumers": [{"id": "lbs", "queries": [
            {"op": "get_transform", "src": "foo", "dst": "pallet-17", "follow": true}]}],
        "faults": [{"time_us": 2000000, "kind": "kill_module", "target": "n1"}]
    }"#,
    )
    .unwrap();
    let r = run_scenario(&scenario).unwrap();
    for p in &r.promotions {
        println!(
            "t={}us {} -> {} epoch {} -> {}, lost {:?}, acked {:?}, durability violations {}",
            p.time_us,
            p.record.old_master,
            p.record.new_master,
            p.record.old_epoch,
            p.record.new_epoch,
            p.record.lost,
            p.acked,
            p.durability_violations
        );
    }
    for d in &r.decisions {
        println!("decision {}", rail::canonical_json(d));
    }
    let foo = &r.providers["foo"];
    println!("provider foo: sent {} delivered {} lost at dead module {}", foo.sent, foo.delivered, foo.lost_at_module);
    let lbs = &r.consumers["lbs"];
    println!("consumer lbs: {} deltas, {} resyncs, re-resolved within {}us", lbs.deltas, lbs.resyncs, lbs.max_reresolve_us);
    println!("master now {:?} at epoch {}", r.master, r.epoch);
}
