//! Transform queries over a multigraph of observations: the path with the
//! least accumulated uncertainty wins, constraints can rule edges out.

use rail::geometry::Pose6D;
use rail::graph::{FrameId, GraphStore, PathConstraints, PathError, TransformObservation};

fn edge(parent: &str, child: &str, provider: &str, x: f64, sigma: f64, res: f64) -> TransformObservation {
    TransformObservation {
        parent: FrameId::new(parent).unwrap(),
        child: FrameId::new(child).unwrap(),
        provider: provider.into(),
        pose: Pose6D::from_translation(x, 0.0, 0.0),
        sigma,
        resolution: res,
        time_us: 1,
        seq: 1,
    }
}

fn main() {
    let g = GraphStore::default();
    // Two routes from the world frame to a pallet: via a ceiling camera
    // (precise) or via a forklift's odometry (drifting).
    g.upsert_edge(edge("world", "camera", "calib", 5.0, 0.001, 0.001)).unwrap();
    g.upsert_edge(edge("camera", "pallet", "camera", 1.0, 0.02, 0.005)).unwrap();
    g.upsert_edge(edge("world", "forklift", "odom", 3.0, 0.10, 0.01)).unwrap();
    g.upsert_edge(edge("forklift", "pallet", "lidar", 3.0, 0.01, 0.02)).unwrap();

    let (w, p) = (FrameId::new("world").unwrap(), FrameId::new("pallet").unwrap());
    let best = g.best_path(&w, &p, &PathConstraints::default()).unwrap();
    let route: Vec<_> = best.edges.iter().map(|e| format!("{}->{}", e.key.parent.as_str(), e.key.child.as_str())).collect();
    println!("best: {} sigma={:.4} res={} hops={}", route.join(" "), best.sigma, best.resolution, best.hops);

    // Inverse direction traverses the same edges backwards.
    let back = g.best_path(&p, &w, &PathConstraints::default()).unwrap();
    println!("inverse translation {:?}", back.pose.translation());

    let strict = PathConstraints { max_sigma: Some(0.005), ..PathConstraints::default() };
    match g.best_path(&w, &p, &strict) {
        Err(PathError::NoPath(reason)) => println!("with max_sigma=0.005: no path ({})", reason.as_str()),
        other => println!("unexpected: {other:?}"),
    }
    let ghost = FrameId::new("ghost").unwrap();
    if let Err(PathError::NoPath(reason)) = g.best_path(&w, &ghost, &PathConstraints::default()) {
        println!("to an unknown frame: no path ({})", reason.as_str());
    }
}
