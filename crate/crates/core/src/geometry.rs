//! Rotations, poses and the continuous 6D rotation encoding.
//!
//! The canonical rotation form is a 3x3 orthonormal matrix. Quaternions are
//! only used at file and observation boundaries, always with `w >= 0`.

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// A proper rotation (orthonormal columns, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

/// First two columns of a rotation matrix, concatenated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Rotation,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix the caller guarantees is a proper rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let u = Unit::new_unchecked(axis / n);
        Rotation(*nalgebra::Rotation3::from_axis_angle(&u, angle).matrix())
    }

    /// Uniformly distributed rotation.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // Shoemake's subgroup algorithm.
        let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let tau = std::f64::consts::TAU;
        let q = Quaternion {
            w: (1.0 - u1).sqrt() * (tau * u2).sin(),
            x: (1.0 - u1).sqrt() * (tau * u2).cos(),
            y: u1.sqrt() * (tau * u3).sin(),
            z: u1.sqrt() * (tau * u3).cos(),
        };
        quat_to_rotation(&q)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Largest deviation from orthonormality and from determinant +1.
    pub fn validity_error(&self) -> f64 {
        let e = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

impl Quaternion {
    pub fn identity() -> Self {
        Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion { w: a[0], x: a[1], y: a[2], z: a[3] }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: Rotation) -> Self {
        Self { position, orientation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Rotation::identity())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.position + self.orientation.apply(&other.position),
            orientation: self.orientation.compose(&other.orientation),
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.orientation.transpose();
        Pose {
            position: -rt.apply(&self.position),
            orientation: rt,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation.apply(p)
    }

    /// Position followed by the `w >= 0` quaternion.
    pub fn to_array7(&self) -> [f64; 7] {
        let q = rotation_to_quat(&self.orientation);
        [self.position.x, self.position.y, self.position.z, q.w, q.x, q.y, q.z]
    }

    pub fn from_array7(a: &[f64; 7]) -> Pose {
        Pose {
            position: Vector3::new(a[0], a[1], a[2]),
            orientation: quat_to_rotation(&Quaternion { w: a[3], x: a[4], y: a[5], z: a[6] }),
        }
    }
}

pub fn rot_to_6d(r: &Rotation) -> Rot6D {
    let m = &r.0;
    Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Gram-Schmidt on the two 3-vectors, third column by cross product. Works on
/// any non-degenerate input, so raw network outputs can be decoded.
pub fn rot_from_6d(v: &Rot6D) -> Result<Rotation> {
    let a = Vector3::new(v.0[0], v.0[1], v.0[2]);
    let b = Vector3::new(v.0[3], v.0[4], v.0[5]);
    let na = a.norm();
    if !(na > 1e-8) {
        return Err(Error::DegenerateRotation);
    }
    let c1 = a / na;
    let b_perp = b - c1 * c1.dot(&b);
    let nb = b_perp.norm();
    if !(nb > 1e-8) {
        return Err(Error::DegenerateRotation);
    }
    let c2 = b_perp / nb;
    let c3 = c1.cross(&c2);
    Ok(Rotation(Matrix3::from_columns(&[c1, c2, c3])))
}

/// Renormalizes `q`, converts it, and treats `q` and `-q` alike.
pub fn quat_to_rotation(q: &Quaternion) -> Rotation {
    let n = q.norm();
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n));
    Rotation(*uq.to_rotation_matrix().matrix())
}

/// Quaternion with `w >= 0`; when `w == 0` the first non-zero vector
/// component is made positive.
pub fn rotation_to_quat(r: &Rotation) -> Quaternion {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(r.0);
    let uq = UnitQuaternion::from_rotation_matrix(&rot);
    let mut q = Quaternion {
        w: uq.w,
        x: uq.i,
        y: uq.j,
        z: uq.k,
    };
    let flip = if q.w != 0.0 {
        q.w < 0.0
    } else if q.x != 0.0 {
        q.x < 0.0
    } else if q.y != 0.0 {
        q.y < 0.0
    } else {
        q.z < 0.0
    };
    if flip {
        q = Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
    }
    q
}

/// Angle of the relative rotation `a^T b`, in radians.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let t = (a.0.transpose() * b.0).trace();
    ((t - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
