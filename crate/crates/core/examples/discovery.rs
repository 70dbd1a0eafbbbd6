//! Endpoint discovery from broadcast announcements, and the management
//! engine's failure detection.

use rail::config::HealthConfig;
use rail::discovery::{decode_announcement, encode_announcement, Announcement, DiscoveryTable, Role};
use rail::health::{HealthMonitor, ModuleKind};

fn main() {
    let interval = 1_000_000;
    let mut table = DiscoveryTable::new(interval);
    let a = Announcement::new(Role::Query, "10.0.0.5:47401", 3, "n1");
    let wire = encode_announcement(&a);
    println!("announcement: {}", String::from_utf8_lossy(&wire));
    table.observe(decode_announcement(&wire).unwrap(), 0);
    // A stale master from an older epoch does not win.
    table.observe(Announcement::new(Role::Query, "10.0.0.9:47401", 2, "n0"), 10);
    println!("t=0.5s query endpoint {:?}", table.lookup_query_endpoint(500_000));
    // A promotion announces a higher epoch and takes over immediately.
    table.observe(Announcement::new(Role::Query, "10.0.0.6:47401", 4, "n2"), 1_200_000);
    println!("t=1.2s query endpoint {:?}", table.lookup_query_endpoint(1_200_000));
    println!("t=5s   query endpoint {:?}", table.lookup_query_endpoint(5_000_000).map_err(|e| e.to_string()));

    let mut h = HealthMonitor::new(&HealthConfig::default());
    h.register("n1", ModuleKind::Master, Role::Query, "n1", 0);
    h.register("n2", ModuleKind::Slave, Role::Query, "n2", 0);
    h.register("n1/w0", ModuleKind::Handler, Role::Ingest, "n1", 0);
    h.set_hosted_providers("n1/w0", vec!["cam-1".into(), "cam-2".into()]).unwrap();
    for t in (500_000..=2_000_000).step_by(500_000) {
        h.process_heartbeat("n2", t).unwrap();
        for r in h.detect_failures(t) {
            println!("t={t}us {} failed", r.module);
        }
    }
    print!("{}", h.decision_log_lines());
}
