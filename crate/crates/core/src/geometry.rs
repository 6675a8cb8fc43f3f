//! Quaternion and rigid-transform algebra in 64-bit reals.
//!
//! A [`RigidTransform`] maps points of an earlier frame into a later frame:
//! `p' = R(q)·p + t`. Composition `a ∘ b` applies `b` first.

use std::fmt;
use std::ops::Mul;

use crate::error::{Error, Result};
use crate::nn::tape::{hamilton, rotation_entries, UNIT_NORM_SLACK};

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Point, angle: f64) -> Self {
        let n = norm3(axis);
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn norm(self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    /// Unit-norm representative with `w ≥ 0`; when `w == 0` the first nonzero
    /// component is made positive. Already-unit inputs are only sign-fixed, so
    /// the operation is idempotent.
    pub fn normalize(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 1e-12) {
            return Err(Error::DegenerateQuaternion { norm: n });
        }
        let q = if (n - 1.0).abs() <= UNIT_NORM_SLACK {
            self
        } else {
            Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
        };
        Ok(q.canonical())
    }

    /// Sign choice only; does not touch the norm.
    pub fn canonical(self) -> Self {
        let a = self.to_array();
        match a.iter().find(|v| **v != 0.0) {
            Some(v) if *v < 0.0 => Self::new(-self.w, -self.x, -self.y, -self.z),
            _ => self,
        }
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product, renormalized when both factors are unit.
    pub fn multiply(self, other: Quaternion) -> Self {
        let raw = Self::from_array(hamilton(self.to_array(), other.to_array()));
        if self.is_unit(1e-9) && other.is_unit(1e-9) {
            let n = raw.norm();
            if (n - 1.0).abs() <= UNIT_NORM_SLACK {
                raw
            } else {
                Self::new(raw.w / n, raw.x / n, raw.y / n, raw.z / n)
            }
        } else {
            raw
        }
    }

    /// Row-major rotation matrix; assumes unit norm.
    pub fn rotation_matrix(self) -> [[f64; 3]; 3] {
        let e = rotation_entries(self.to_array());
        [[e[0], e[1], e[2]], [e[3], e[4], e[5]], [e[6], e[7], e[8]]]
    }

    pub fn rotate(self, p: Point) -> Point {
        mat_vec(&self.rotation_matrix(), p)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(self) -> f64 {
        rotation_angle(&self.rotation_matrix())
    }

    /// Quaternion of an orthonormal, right-handed rotation matrix.
    pub fn from_rotation_matrix(m: &[[f64; 3]; 3]) -> Result<Self> {
        let deviation = orthonormal_deviation(m);
        if deviation > 1e-6 {
            return Err(Error::NotOrthonormal { deviation });
        }
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        q.normalize()
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Quaternion) -> Quaternion {
        self.multiply(rhs)
    }
}

#[derive(Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub q: Quaternion,
    pub t: Point,
}

impl fmt::Debug for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "RigidTransform(q=[{:.6}, {:.6}, {:.6}, {:.6}], t=[{:.6}, {:.6}, {:.6}])",
            self.q.w, self.q.x, self.q.y, self.q.z, self.t[0], self.t[1], self.t[2]
        )
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        q: Quaternion::IDENTITY,
        t: [0.0; 3],
    };

    /// Normalizes and canonicalizes `q`.
    pub fn new(q: Quaternion, t: Point) -> Result<Self> {
        Ok(Self {
            q: q.normalize()?,
            t,
        })
    }

    pub fn from_translation(t: Point) -> Self {
        Self {
            q: Quaternion::IDENTITY,
            t,
        }
    }

    pub fn from_axis_angle(axis: Point, angle: f64, t: Point) -> Self {
        Self {
            q: Quaternion::from_axis_angle(axis, angle)
                .normalize()
                .expect("axis-angle quaternions are unit"),
            t,
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let r = self.q.rotate(p);
        [r[0] + self.t[0], r[1] + self.t[1], r[2] + self.t[2]]
    }

    /// Maps every point; order and count are preserved.
    pub fn apply_all(&self, points: &[Point]) -> Vec<Point> {
        let m = self.q.rotation_matrix();
        points
            .iter()
            .map(|&p| {
                let r = mat_vec(&m, p);
                [r[0] + self.t[0], r[1] + self.t[1], r[2] + self.t[2]]
            })
            .collect()
    }

    /// `residual ∘ base`: apply `base`, then `residual`.
    pub fn compose(residual: &RigidTransform, base: &RigidTransform) -> RigidTransform {
        let q = residual
            .q
            .multiply(base.q)
            .normalize()
            .expect("product of unit quaternions is unit");
        let rt = residual.q.rotate(base.t);
        RigidTransform {
            q,
            t: [
                rt[0] + residual.t[0],
                rt[1] + residual.t[1],
                rt[2] + residual.t[2],
            ],
        }
    }

    /// `self ∘ other`.
    pub fn then_after(&self, other: &RigidTransform) -> RigidTransform {
        Self::compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        let qi = self.q.conjugate().canonical();
        let rt = qi.rotate(self.t);
        RigidTransform {
            q: qi,
            t: [-rt[0], -rt[1], -rt[2]],
        }
    }

    /// Row-major `[R | t]`.
    pub fn to_matrix(&self) -> [f64; 12] {
        let r = self.q.rotation_matrix();
        [
            r[0][0], r[0][1], r[0][2], self.t[0], r[1][0], r[1][1], r[1][2], self.t[1], r[2][0],
            r[2][1], r[2][2], self.t[2],
        ]
    }

    pub fn from_matrix(m: &[f64; 12]) -> Result<RigidTransform> {
        let r = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]];
        Ok(RigidTransform {
            q: Quaternion::from_rotation_matrix(&r)?,
            t: [m[3], m[7], m[11]],
        })
    }

    pub fn rotation_angle(&self) -> f64 {
        self.q.angle()
    }

    pub fn translation_norm(&self) -> f64 {
        norm3(self.t)
    }

    pub fn approx_eq(&self, other: &RigidTransform, tol: f64) -> bool {
        let dq = self
            .q
            .to_array()
            .iter()
            .zip(other.q.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dq_neg = self
            .q
            .to_array()
            .iter()
            .zip(other.q.to_array())
            .map(|(a, b)| (a + b).abs())
            .fold(0.0, f64::max);
        let dt = (0..3).map(|i| (self.t[i] - other.t[i]).abs()).fold(0.0, f64::max);
        dq.min(dq_neg) <= tol && dt <= tol
    }
}

/// Transform carrying frame-`a` coordinates into frame `b`, given the world
/// poses of both frames: `T_world_b⁻¹ ∘ T_world_a`.
pub fn relative_gt(world_a: &RigidTransform, world_b: &RigidTransform) -> RigidTransform {
    RigidTransform::compose(&world_b.inverse(), world_a)
}

pub fn norm3(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn mat_vec(m: &[[f64; 3]; 3], p: Point) -> Point {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// `arccos((trace(R) − 1) / 2)` with the argument clamped to `[−1, 1]`.
pub fn rotation_angle(m: &[[f64; 3]; 3]) -> f64 {
    let c = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Largest entry of `|RᵀR − I|`, also counting `|det R − 1|`.
fn orthonormal_deviation(m: &[[f64; 3]; 3]) -> f64 {
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - target).abs());
        }
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    dev.max((det - 1.0).abs())
}
