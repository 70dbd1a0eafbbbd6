//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls into the library's search, geometry or index code.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rail::geometry::{GeometryPrimitive, Point3, Pose6D};
use rail::graph::{EdgeKey, PathConstraints, PathPriority, TransformObservation};

pub type Mat4 = [[f64; 4]; 4];

pub fn identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// Homogeneous matrix from the pose's quaternion and translation.
pub fn mat_of(p: &Pose6D) -> Mat4 {
    let [w, x, y, z] = p.quaternion();
    let n = (w * w + x * x + y * y + z * z).sqrt();
    let (w, x, y, z) = (w / n, x / n, y / n, z / n);
    let t = p.translation();
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y), t[0]],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x), t[1]],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y), t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

pub fn mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Inverse of a rigid transform: transposed rotation, rotated negated translation.
pub fn rigid_inverse(a: &Mat4) -> Mat4 {
    let mut m = identity();
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
    }
    for i in 0..3 {
        m[i][3] = -(0..3).map(|k| a[k][i] * a[k][3]).sum::<f64>();
    }
    m
}

pub fn apply(m: &Mat4, p: Point3) -> Point3 {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
    }
    out
}

pub fn max_abs_diff(a: &Mat4, b: &Mat4) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            d = d.max((a[i][j] - b[i][j]).abs());
        }
    }
    d
}

pub fn norm(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Distance from a point in the primitive's own frame to the solid.
pub fn primitive_distance(g: &GeometryPrimitive, p: Point3) -> f64 {
    match g {
        GeometryPrimitive::Point => norm(p),
        GeometryPrimitive::Sphere { radius } => (norm(p) - radius).max(0.0),
        GeometryPrimitive::Box { half_extents } => {
            let mut closest = [0.0; 3];
            for i in 0..3 {
                closest[i] = p[i].clamp(-half_extents[i], half_extents[i]);
            }
            norm(sub(p, closest))
        }
    }
}

/// One simple path as found by exhaustive enumeration.
#[derive(Debug, Clone)]
pub struct OraclePath {
    pub sq_sigma: f64,
    pub resolution: f64,
    pub hops: u32,
    /// Edge keys in path order with `true` for parent-to-child traversal.
    pub edges: Vec<(EdgeKey, bool)>,
    pub pose: Mat4,
}

impl OraclePath {
    fn objective(&self, priority: PathPriority) -> (f64, f64) {
        match priority {
            PathPriority::SigmaFirst => (self.sq_sigma, self.resolution),
            PathPriority::ResolutionFirst => (self.resolution, self.sq_sigma),
        }
    }

    /// Strict preference of `self` over `other` under the tie-break rules.
    pub fn better_than(&self, other: &OraclePath, priority: PathPriority) -> bool {
        let (a1, a2) = self.objective(priority);
        let (b1, b2) = other.objective(priority);
        let ka: Vec<&EdgeKey> = self.edges.iter().map(|e| &e.0).collect();
        let kb: Vec<&EdgeKey> = other.edges.iter().map(|e| &e.0).collect();
        a1.total_cmp(&b1)
            .then(a2.total_cmp(&b2))
            .then(self.hops.cmp(&other.hops))
            .then(ka.cmp(&kb))
            .is_lt()
    }
}

/// Edges surviving the age filter.
pub fn age_filtered<'a>(edges: &'a [TransformObservation], c: &PathConstraints) -> Vec<&'a TransformObservation> {
    let latest = edges.iter().map(|e| e.time_us).max().unwrap_or(0);
    let now = c.now_us.unwrap_or(latest);
    edges
        .iter()
        .filter(|e| c.max_age_us.is_none_or(|a| now.saturating_sub(e.time_us) <= a))
        .collect()
}

fn admissible(p: &OraclePath, c: &PathConstraints) -> bool {
    c.max_sigma.is_none_or(|m| p.sq_sigma.sqrt() <= m)
        && c.max_resolution.is_none_or(|m| p.resolution <= m)
        && c.max_hops.is_none_or(|m| p.hops <= m)
}

/// Best admissible simple path from `src` to every reachable frame,
/// found by enumerating every simple path.
pub fn best_paths_from(
    edges: &[TransformObservation],
    src: &str,
    c: &PathConstraints,
) -> BTreeMap<String, OraclePath> {
    let usable = age_filtered(edges, c);
    let mut best: BTreeMap<String, OraclePath> = BTreeMap::new();
    let start = OraclePath { sq_sigma: 0.0, resolution: 0.0, hops: 0, edges: Vec::new(), pose: identity() };
    let mut visited = BTreeSet::from([src.to_owned()]);
    walk(&usable, src, &start, &mut visited, c, &mut best);
    best
}

fn walk(
    edges: &[&TransformObservation],
    at: &str,
    path: &OraclePath,
    visited: &mut BTreeSet<String>,
    c: &PathConstraints,
    best: &mut BTreeMap<String, OraclePath>,
) {
    for e in edges {
        let (forward, next) = if e.parent.as_str() == at {
            (true, e.child.as_str())
        } else if e.child.as_str() == at {
            (false, e.parent.as_str())
        } else {
            continue;
        };
        if visited.contains(next) {
            continue;
        }
        let step = if forward { mat_of(&e.pose) } else { rigid_inverse(&mat_of(&e.pose)) };
        let mut keys = path.edges.clone();
        keys.push((e.key(), forward));
        let cand = OraclePath {
            sq_sigma: path.sq_sigma + e.sigma * e.sigma,
            resolution: path.resolution.max(e.resolution),
            hops: path.hops + 1,
            edges: keys,
            pose: mul(&path.pose, &step),
        };
        // Extensions of an inadmissible prefix stay inadmissible.
        if !admissible(&cand, c) {
            continue;
        }
        if best.get(next).is_none_or(|b| cand.better_than(b, c.priority)) {
            best.insert(next.to_owned(), cand.clone());
        }
        visited.insert(next.to_owned());
        walk(edges, next, &cand, visited, c, best);
        visited.remove(next);
    }
}

/// Connectivity over all edges, ignoring every constraint.
pub fn connected(edges: &[TransformObservation], src: &str, dst: &str) -> bool {
    let mut seen = BTreeSet::from([src.to_owned()]);
    let mut stack = vec![src.to_owned()];
    while let Some(f) = stack.pop() {
        if f == dst {
            return true;
        }
        for e in edges {
            let other = if e.parent.as_str() == f {
                e.child.as_str()
            } else if e.child.as_str() == f {
                e.parent.as_str()
            } else {
                continue;
            };
            if seen.insert(other.to_owned()) {
                stack.push(other.to_owned());
            }
        }
    }
    false
}

pub fn frames_of(edges: &[TransformObservation]) -> BTreeSet<String> {
    edges.iter().flat_map(|e| [e.parent.to_string(), e.child.to_string()]).collect()
}

pub fn rand_pose(rng: &mut impl rand::Rng, span: f64) -> Pose6D {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if n < 0.1 {
            continue;
        }
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-span..span));
        return Pose6D::new(t, q.map(|v| v / n)).expect("finite unit quaternion");
    }
}
