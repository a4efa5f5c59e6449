//! Rotations, projected rigid poses and axis-aligned boxes.
//!
//! Rotations are composed as `A = Rz(roll) * Rx(pitch) * Ry(yaw)`. With the
//! face looking down the `z` axis, yaw turns the head left/right about the
//! vertical `y` axis, pitch nods about `x`, and roll spins in the image plane.
//! Every module that converts between matrices and angles goes through
//! [`rpy_to_rotation`] and [`rotation_to_rpy`].

use nalgebra::{Matrix3, Matrix3xX, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

/// Tolerance for orthonormality and determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// Below this `|cos(pitch)|` roll and yaw are not separable.
pub const GIMBAL_LOCK_TOL: f64 = 1e-8;

/// Orthographic projection onto the image plane.
#[inline]
pub fn project(p: &Point3) -> Point2 {
    Point2::new(p.x, p.y)
}

/// Roll-pitch-yaw angles in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Rpy {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }
}

/// A proper 3D rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps `m` after checking `m^T m = I` and `det(m) = +1`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("rotation has non-finite entries".into()));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidInput(format!(
                "not a proper rotation (orthogonality error {ortho:e}, det {det})"
            )));
        }
        Ok(Self(m))
    }

    /// Wraps `m` without validation. Callers guarantee it is a proper rotation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn to_rpy(&self) -> Result<Rpy> {
        rotation_to_rpy(self)
    }
}

impl From<Rotation3> for [[f64; 3]; 3] {
    fn from(r: Rotation3) -> Self {
        let m = r.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation3 {
    type Error = Error;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Rotation3::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `A = Rz(roll) * Rx(pitch) * Ry(yaw)`.
pub fn rpy_to_rotation(r: Rpy) -> Rotation3 {
    Rotation3(rot_z(r.roll) * rot_x(r.pitch) * rot_y(r.yaw))
}

/// Inverse of [`rpy_to_rotation`], with pitch in `[-pi/2, pi/2]`.
///
/// The bottom row of `A` is `(-cos p sin y, sin p, cos p cos y)` and the
/// middle column is `(-sin r cos p, cos r cos p, sin p)`.
pub fn rotation_to_rpy(a: &Rotation3) -> Result<Rpy> {
    let m = a.matrix();
    let sp = m[(2, 1)].clamp(-1.0, 1.0);
    let cp = (m[(2, 0)].powi(2) + m[(2, 2)].powi(2)).sqrt();
    if cp <= GIMBAL_LOCK_TOL {
        return Err(Error::GimbalLock { cos_pitch: cp });
    }
    Ok(Rpy {
        roll: (-m[(0, 1)]).atan2(m[(1, 1)]),
        pitch: sp.atan2(cp),
        yaw: (-m[(2, 0)]).atan2(m[(2, 2)]),
    })
}

/// Projected rigid transform `T(x) = u + s * pi(A x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose6 {
    pub u: Vector2<f64>,
    pub s: f64,
    pub rotation: Rotation3,
}

impl Pose6 {
    pub fn new(u: Vector2<f64>, s: f64, rotation: Rotation3) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidInput(format!("pose scale must be positive, got {s}")));
        }
        if !(u.x.is_finite() && u.y.is_finite()) {
            return Err(Error::InvalidInput("pose translation is not finite".into()));
        }
        Ok(Self { u, s, rotation })
    }

    pub fn from_rpy(u: Vector2<f64>, s: f64, rpy: Rpy) -> Result<Self> {
        Self::new(u, s, rpy_to_rotation(rpy))
    }

    pub fn identity() -> Self {
        Self { u: Vector2::zeros(), s: 1.0, rotation: Rotation3::identity() }
    }

    pub fn rpy(&self) -> Result<Rpy> {
        rotation_to_rpy(&self.rotation)
    }

    /// Yaw angle, the parameter of the face scorer.
    pub fn yaw(&self) -> f64 {
        let m = self.rotation.matrix();
        (-m[(2, 0)]).atan2(m[(2, 2)])
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point2 {
        let q = self.rotation.matrix() * p.coords;
        Point2::new(self.u.x + self.s * q.x, self.u.y + self.s * q.y)
    }

    /// The `2x3` linear part `s * pi(A)`.
    pub fn linear_part(&self) -> nalgebra::Matrix2x3<f64> {
        self.rotation.matrix().fixed_rows::<2>(0) * self.s
    }
}

/// Applies `pose` to every column of a `3xL` point matrix.
pub fn apply_pose(pose: &Pose6, points: &Matrix3xX<f64>) -> Vec<Point2> {
    points
        .column_iter()
        .map(|c| pose.apply(&Point3::from(Vector3::new(c[0], c[1], c[2]))))
        .collect()
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub min: Point2,
    pub max: Point2,
}

impl Box2 {
    pub fn new(min: Point2, max: Point2) -> Result<Self> {
        if !(max.x >= min.x && max.y >= min.y) {
            return Err(Error::InvalidInput(format!("box corners out of order: {min} {max}")));
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point2 {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn intersection_area(&self, other: &Box2) -> f64 {
        let w = self.max.x.min(other.max.x) - self.min.x.max(other.min.x);
        let h = self.max.y.min(other.max.y) - self.min.y.max(other.min.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union. Two zero-area boxes overlap fully only when equal.
pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest box containing `points`, `None` when empty.
pub fn bounding_box(points: &[Point2]) -> Option<Box2> {
    let first = points.first()?;
    let (mut min, mut max) = (*first, *first);
    for p in &points[1..] {
        min.x = min.x.min(p.x);
        min.y = min.y.min(p.y);
        max.x = max.x.max(p.x);
        max.y = max.y.max(p.y);
    }
    Some(Box2 { min, max })
}
