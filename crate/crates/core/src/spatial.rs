//! 3D vectors, unit-quaternion rotations and rigid transforms.
//!
//! Right-handed frame; in the simulator `+z` points up, out of the tissue.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Tolerance used when checking that a quaternion is a unit quaternion.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction, or `None` for a (near) zero vector.
    pub fn try_normalize(self) -> Option<Vec3> {
        let n = self.norm();
        if n > f64::MIN_POSITIVE && n.is_finite() {
            Some(self * (1.0 / n))
        } else {
            None
        }
    }

    pub fn lerp(self, o: Vec3, s: f64) -> Vec3 {
        self + (o - self) * s
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    /// Any unit vector perpendicular to `self` (which must be non-zero).
    pub fn any_orthogonal(self) -> Vec3 {
        let pick = if self.x.abs() <= self.y.abs() && self.x.abs() <= self.z.abs() {
            Vec3::X
        } else if self.y.abs() <= self.z.abs() {
            Vec3::Y
        } else {
            Vec3::Z
        };
        self.cross(pick).try_normalize().unwrap_or(Vec3::X)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Unit quaternion, canonicalized so that `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rotation {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Rotation {
    fn default() -> Self {
        Rotation::IDENTITY
    }
}

impl Rotation {
    pub const IDENTITY: Rotation = Rotation {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes an arbitrary non-zero quaternion.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Option<Rotation> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > f64::MIN_POSITIVE) {
            return None;
        }
        Some(
            Rotation {
                w: w / n,
                x: x / n,
                y: y / n,
                z: z / n,
            }
            .canonical(),
        )
    }

    /// Accepts a quaternion that is already unit-norm (within
    /// [`UNIT_NORM_TOLERANCE`]) without touching its bits, except for the
    /// sign flip that enforces `w >= 0`.
    pub fn from_unit_wxyz(q: [f64; 4]) -> Option<Rotation> {
        let n2 = q.iter().map(|c| c * c).sum::<f64>();
        if !q.iter().all(|c| c.is_finite()) || (n2.sqrt() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return None;
        }
        Some(
            Rotation {
                w: q[0],
                x: q[1],
                y: q[2],
                z: q[3],
            }
            .canonical(),
        )
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Option<Rotation> {
        let axis = axis.try_normalize()?;
        let (s, c) = (0.5 * angle).sin_cos();
        Rotation::from_wxyz(c, axis.x * s, axis.y * s, axis.z * s)
    }

    /// Rotation from a rotation vector (axis scaled by angle in radians).
    pub fn from_rotation_vector(v: Vec3) -> Rotation {
        let angle = v.norm();
        if angle < 1e-12 {
            // first-order expansion keeps tiny rotations exact enough
            return Rotation::from_wxyz(1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z)
                .unwrap_or(Rotation::IDENTITY);
        }
        Rotation::from_axis_angle(v, angle).unwrap_or(Rotation::IDENTITY)
    }

    pub fn rot_x(angle: f64) -> Rotation {
        Rotation::from_axis_angle(Vec3::X, angle).expect("unit axis")
    }

    pub fn rot_y(angle: f64) -> Rotation {
        Rotation::from_axis_angle(Vec3::Y, angle).expect("unit axis")
    }

    pub fn rot_z(angle: f64) -> Rotation {
        Rotation::from_axis_angle(Vec3::Z, angle).expect("unit axis")
    }

    /// Proper rotation matrix (row-major) to quaternion, Shepperd's method.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Option<Rotation> {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z) = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            (
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            (
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            (
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        Rotation::from_wxyz(w, x, y, z)
    }

    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Rotation { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Minimal-angle rotation taking direction `from` onto direction `to`.
    /// Antiparallel inputs produce a half turn about an arbitrary
    /// perpendicular axis.
    pub fn between(from: Vec3, to: Vec3) -> Option<Rotation> {
        let a = from.try_normalize()?;
        let b = to.try_normalize()?;
        let d = a.dot(b);
        if d < -1.0 + 1e-12 {
            return Rotation::from_axis_angle(a.any_orthogonal(), std::f64::consts::PI);
        }
        let c = a.cross(b);
        Rotation::from_wxyz(1.0 + d, c.x, c.y, c.z)
    }

    pub fn wxyz(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn inverse(self) -> Rotation {
        Rotation {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn apply(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Hamilton product `self * other` (apply `other` first). Not renormalized.
    pub fn compose_raw(self, o: Rotation) -> Rotation {
        Rotation {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
        .canonical()
    }

    /// Hamilton product with lazy renormalization: the result is only
    /// rescaled once its norm drifts past [`UNIT_NORM_TOLERANCE`] / 10.
    pub fn compose(self, o: Rotation) -> Rotation {
        let r = self.compose_raw(o);
        if (r.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE * 0.1 {
            r.renormalized()
        } else {
            r
        }
    }

    pub fn renormalized(self) -> Rotation {
        let n = self.norm();
        Rotation {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    /// Rotation angle in `[0, pi]`, numerically stable near zero.
    pub fn angle(self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Angle of the relative rotation between `self` and `o`.
    pub fn angle_to(self, o: Rotation) -> f64 {
        self.inverse().compose_raw(o).angle()
    }

    /// Axis scaled by angle.
    pub fn to_rotation_vector(self) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let s = v.norm();
        if s < 1e-15 {
            return v * 2.0;
        }
        v * (self.angle() / s)
    }

    /// Spherical interpolation along the shorter arc.
    pub fn slerp(self, o: Rotation, s: f64) -> Rotation {
        let delta = self.inverse().compose_raw(o).to_rotation_vector();
        self.compose(Rotation::from_rotation_vector(delta * s))
    }

    fn canonical(self) -> Rotation {
        if self.w < 0.0 {
            Rotation {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }
}

impl TryFrom<[f64; 4]> for Rotation {
    type Error = String;
    fn try_from(q: [f64; 4]) -> Result<Self, Self::Error> {
        Rotation::from_unit_wxyz(q).ok_or_else(|| format!("not a unit quaternion: {q:?}"))
    }
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        r.wxyz()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, o: Rotation) -> Rotation {
        self.compose(o)
    }
}

/// `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    #[serde(rename = "rotation_wxyz")]
    pub rotation: Rotation,
    #[serde(rename = "translation_m")]
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Rotation::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Rotation::IDENTITY,
            translation: t,
        }
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self {
            rotation: r,
            translation: Vec3::ZERO,
        }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn transform_vector(&self, v: Vec3) -> Vec3 {
        self.rotation.apply(v)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(other.rotation),
            translation: self.transform_point(other.translation),
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let r = self.rotation.inverse();
        RigidTransform {
            rotation: r,
            translation: -r.apply(self.translation),
        }
    }
}

pub fn transform_point(t: &RigidTransform, p: Vec3) -> Vec3 {
    t.transform_point(p)
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.invert()
}

/// Position plus orientation of a rigid body (probe, end effector).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Rotation,
}

impl Pose {
    pub fn new(position: Vec3, orientation: Rotation) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_position(position: Vec3) -> Self {
        Self {
            position,
            orientation: Rotation::IDENTITY,
        }
    }

    pub fn as_transform(&self) -> RigidTransform {
        RigidTransform::new(self.orientation, self.position)
    }
}

impl From<RigidTransform> for Pose {
    fn from(t: RigidTransform) -> Self {
        Pose {
            position: t.translation,
            orientation: t.rotation,
        }
    }
}
