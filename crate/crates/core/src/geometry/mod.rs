//! Orientations, rotations and the roto-translation group acting on
//! positions and orientations.

pub mod sh;
pub mod tessellation;

use std::ops::Neg;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct UnitVector(Vec3);

impl UnitVector {
    pub const EX: UnitVector = UnitVector(Vec3::new(1.0, 0.0, 0.0));
    pub const EY: UnitVector = UnitVector(Vec3::new(0.0, 1.0, 0.0));
    pub const EZ: UnitVector = UnitVector(Vec3::new(0.0, 0.0, 1.0));

    /// Normalizes `v`. Fails on zero or non-finite input.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid(format!("cannot normalize vector {v:?}")));
        }
        Ok(UnitVector(v / n))
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(Vec3::new(x, y, z))
    }

    /// Wraps a vector that is already of unit length.
    pub(crate) fn new_unchecked(v: Vec3) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "not unit: {v:?}");
        UnitVector(v)
    }

    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn into_vec(self) -> Vec3 {
        self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.0.dot(&other.0)
    }

    /// Angle in radians, in `[0, pi]`.
    pub fn angle_to(&self, other: &UnitVector) -> f64 {
        // atan2 form is accurate near 0 and pi, unlike acos.
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }

    /// Angle between the axes `±self` and `±other`, in `[0, pi/2]`.
    pub fn axis_angle_to(&self, other: &UnitVector) -> f64 {
        let a = self.angle_to(other);
        a.min(std::f64::consts::PI - a)
    }
}

impl Neg for UnitVector {
    type Output = UnitVector;
    fn neg(self) -> UnitVector {
        UnitVector(-self.0)
    }
}

impl TryFrom<[f64; 3]> for UnitVector {
    type Error = Error;
    fn try_from(v: [f64; 3]) -> Result<Self> {
        UnitVector::new(Vec3::from(v))
    }
}

impl From<UnitVector> for [f64; 3] {
    fn from(v: UnitVector) -> [f64; 3] {
        v.0.into()
    }
}

/// A proper rotation of three-space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Accepts `m` if it is orthonormal with determinant +1 (tolerance 1e-9).
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("matrix is not a proper rotation"));
        }
        Ok(Rotation(m))
    }

    /// Right-handed rotation by `angle` radians about the unit `axis`.
    pub fn about_axis(axis: &UnitVector, angle: f64) -> Self {
        let k = axis.as_vec();
        let kx = cross_matrix(k);
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::identity() + kx * s + kx * kx * (1.0 - c))
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn apply_inverse(&self, v: &Vec3) -> Vec3 {
        self.0.tr_mul(v)
    }

    pub fn rotate(&self, n: &UnitVector) -> UnitVector {
        UnitVector(self.0 * n.0)
    }

    pub fn rotate_inverse(&self, n: &UnitVector) -> UnitVector {
        UnitVector(self.0.tr_mul(&n.0))
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

fn cross_matrix(k: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0)
}

/// The canonical rotation taking the north pole `e_z` onto `n`.
///
/// This is the minimal-angle rotation about `e_z × n`. At the south pole the
/// axis is undefined and the half turn about `e_x` is used.
pub fn rotation_to_north(n: &UnitVector) -> Rotation {
    let (x, y, z) = (n.x(), n.y(), n.z());
    let rho2 = x * x + y * y;
    // R = I + K + K^2 / (1 + z) with K the cross matrix of (-y, x, 0).
    // For z < 0 the factor is rewritten as (1 - z) / (x^2 + y^2) which is
    // exact for unit input and keeps R e_z == n free of cancellation.
    let f = if z >= 0.0 {
        1.0 / (1.0 + z)
    } else if rho2 > 0.0 {
        (1.0 - z) / rho2
    } else {
        return Rotation(Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0));
    };
    Rotation(Matrix3::new(
        1.0 - f * x * x,
        -f * x * y,
        x,
        -f * x * y,
        1.0 - f * y * y,
        y,
        -x,
        -y,
        1.0 - f * rho2,
    ))
}

/// An element of the roto-translation group: a translation and a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub translation: Vec3,
    pub rotation: Rotation,
}

impl RigidMotion {
    pub fn new(translation: Vec3, rotation: Rotation) -> Self {
        Self {
            translation,
            rotation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), Rotation::identity())
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.translation + self.rotation.apply(p)
    }
}

/// Shift-twist product `(y, R)(y', R') = (y + R y', R R')`.
pub fn group_product(a: &RigidMotion, b: &RigidMotion) -> RigidMotion {
    RigidMotion {
        translation: a.translation + a.rotation.apply(&b.translation),
        rotation: a.rotation.compose(&b.rotation),
    }
}
