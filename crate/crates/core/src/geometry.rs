//! Rigid 6D transforms and geometric primitives.
//!
//! Rotations are unit quaternions kept in a canonical hemisphere (`w >= 0`)
//! so that two poses describing the same transform compare equal
//! componentwise.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance used for every geometric comparison.
pub const GEOMETRY_TOLERANCE: f64 = 1e-9;

/// Tolerance for the orthonormality check of rotation blocks given as matrices.
pub const MATRIX_ORTHONORMAL_TOLERANCE: f64 = 1e-6;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
    #[error("non-finite component in transform")]
    NonFinite,
    #[error("rotation block is not orthonormal (error {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation block is not proper (determinant {0})")]
    NotProper(f64),
    #[error("bottom row of homogeneous matrix must be [0, 0, 0, 1]")]
    NotHomogeneous,
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(&'static str),
}

/// A rigid transform: rotation followed by translation.
///
/// Applied to a point `p` it yields `R·p + t`. When used as an edge of the
/// spatial graph it expresses the child frame in the parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6D {
    translation: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
}

impl Pose6D {
    pub fn identity() -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from a translation and a `(w, x, y, z)` quaternion.
    /// The quaternion is renormalized and canonicalized.
    pub fn new(t: Point3, q: [f64; 4]) -> Result<Self, GeometryError> {
        if t.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = raw.norm();
        if !norm.is_finite() || norm <= f64::EPSILON {
            return Err(GeometryError::DegenerateQuaternion);
        }
        // Already-unit input is kept bit-exact so serialization round-trips.
        let unit = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON { raw } else { raw / norm };
        Ok(Self::from_parts(Vector3::from(t), UnitQuaternion::new_unchecked(unit)))
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            translation: Vector3::new(x, y, z),
            rotation: UnitQuaternion::identity(),
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Point3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        Self::from_parts(Vector3::zeros(), UnitQuaternion::from_axis_angle(&axis, angle))
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], angle)
    }

    /// Converts a row-major 4×4 homogeneous matrix. The rotation block must be
    /// orthonormal within [`MATRIX_ORTHONORMAL_TOLERANCE`] with determinant +1.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let tol = MATRIX_ORTHONORMAL_TOLERANCE;
        if m[12].abs() > tol || m[13].abs() > tol || m[14].abs() > tol || (m[15] - 1.0).abs() > tol {
            return Err(GeometryError::NotHomogeneous);
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= tol) {
            return Err(GeometryError::NotOrthonormal(err));
        }
        let det = r.determinant();
        if det <= 0.0 {
            return Err(GeometryError::NotProper(det));
        }
        let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        Self::new([m[3], m[7], m[11]], [q.w, q.i, q.j, q.k])
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = self.rotation.to_rotation_matrix();
        let r = r.matrix();
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    fn from_parts(translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            translation,
            rotation: canonicalize(rotation),
        }
    }

    pub fn translation(&self) -> Point3 {
        self.translation.into()
    }

    /// Rotation as `(w, x, y, z)`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose6D) -> Pose6D {
        let rotation = self.rotation * other.rotation;
        let translation = self.translation + self.rotation * other.translation;
        Self::from_parts(translation, renormalize(rotation))
    }

    pub fn inverse(&self) -> Pose6D {
        let rotation = self.rotation.inverse();
        let translation = -(rotation * self.translation);
        Self::from_parts(translation, rotation)
    }

    pub fn transform_point(&self, p: Point3) -> Point3 {
        (self.rotation * Vector3::from(p) + self.translation).into()
    }

    /// Componentwise comparison, treating `q` and `-q` as equal.
    pub fn approx_eq(&self, other: &Pose6D, tol: f64) -> bool {
        let dt = (self.translation - other.translation).abs().max();
        let a = self.rotation.quaternion().coords;
        let b = other.rotation.quaternion().coords;
        let dq = (a - b).abs().max().min((a + b).abs().max());
        dt <= tol && dq <= tol
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.quaternion().norm()
    }
}

impl Default for Pose6D {
    fn default() -> Self {
        Self::identity()
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Chooses the `w >= 0` representative. Near `w = 0` the first clearly
/// non-zero vector component decides, so both halves of the double cover
/// map to the same tuple.
fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    const EPS: f64 = 1e-12;
    let c = q.quaternion();
    let flip = if c.w.abs() > EPS {
        c.w < 0.0
    } else {
        [c.i, c.j, c.k]
            .into_iter()
            .find(|v| v.abs() > EPS)
            .is_some_and(|v| v < 0.0)
    };
    if flip {
        UnitQuaternion::new_unchecked(-c)
    } else {
        q
    }
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    t: Point3,
    q: [f64; 4],
}

impl Serialize for Pose6D {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr {
            t: self.translation(),
            q: self.quaternion(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose6D {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = PoseRepr::deserialize(d)?;
        Pose6D::new(repr.t, repr.q).map_err(serde::de::Error::custom)
    }
}

/// Extent of an object, expressed in the object's own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum GeometryPrimitive {
    #[default]
    Point,
    Sphere { radius: f64 },
    /// Axis-aligned in the owning object's frame.
    Box { half_extents: Point3 },
}

impl GeometryPrimitive {
    pub fn validate(&self) -> Result<(), GeometryError> {
        match self {
            GeometryPrimitive::Point => Ok(()),
            GeometryPrimitive::Sphere { radius } => {
                if radius.is_finite() && *radius > 0.0 {
                    Ok(())
                } else {
                    Err(GeometryError::InvalidPrimitive("sphere radius must be > 0"))
                }
            }
            GeometryPrimitive::Box { half_extents } => {
                if half_extents.iter().all(|h| h.is_finite() && *h > 0.0) {
                    Ok(())
                } else {
                    Err(GeometryError::InvalidPrimitive("box half extents must be > 0"))
                }
            }
        }
    }

    /// Euclidean distance from `p` (in the primitive's frame) to the closest
    /// point of the solid primitive; zero inside.
    pub fn distance_to_local(&self, p: Point3) -> f64 {
        let v = Vector3::from(p);
        match self {
            GeometryPrimitive::Point => v.norm(),
            GeometryPrimitive::Sphere { radius } => (v.norm() - radius).max(0.0),
            GeometryPrimitive::Box { half_extents } => {
                let h = Vector3::from(*half_extents);
                let outside = v.abs() - h;
                outside.map(|c| c.max(0.0)).norm()
            }
        }
    }
}

/// True iff the primitive placed at `prim_pose` touches the closed ball
/// `(center, radius)`. Both are expressed in the same reference frame.
pub fn intersects_sphere(
    prim: &GeometryPrimitive,
    prim_pose: &Pose6D,
    center: Point3,
    radius: f64,
) -> bool {
    let local = prim_pose.inverse().transform_point(center);
    prim.distance_to_local(local) <= radius
}

pub fn distance(a: Point3, b: Point3) -> f64 {
    (Vector3::from(a) - Vector3::from(b)).norm()
}
