//! SO(3) and its Lie algebra.
//!
//! Rotations are stored as full 3x3 matrices. Tangent vectors are coefficient
//! triples in the basis `E_a = hat(e_a)`, which is orthonormal under
//! `<A, B> = ½ tr(AᵀB)`, so `‖hat(v)‖ = ‖v‖` and the geodesic distance of
//! `exp(v)` from the identity is `‖v‖` for `‖v‖ ≤ π`.
//!
//! Tangent vectors at a rotation `R` are always expressed in the body frame:
//! the coefficient vector `v` stands for the direction `R·hat(v)`, and moving
//! along it means right-multiplying by `exp(hat(v))`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Below this angle exp/log switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-4;

/// Tolerance used when validating user-supplied rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Lie-algebra coefficients (radians along `E_1, E_2, E_3`).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TangentVector(pub Vector3<f64>);

impl TangentVector {
    pub const ZERO: TangentVector = TangentVector(Vector3::new(0.0, 0.0, 0.0));

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        TangentVector(Vector3::new(x, y, z))
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn dot(&self, other: &TangentVector) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    pub fn hat(&self) -> Matrix3<f64> {
        hat(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl Add for TangentVector {
    type Output = TangentVector;
    fn add(self, rhs: TangentVector) -> TangentVector {
        TangentVector(self.0 + rhs.0)
    }
}

impl AddAssign for TangentVector {
    fn add_assign(&mut self, rhs: TangentVector) {
        self.0 += rhs.0;
    }
}

impl Sub for TangentVector {
    type Output = TangentVector;
    fn sub(self, rhs: TangentVector) -> TangentVector {
        TangentVector(self.0 - rhs.0)
    }
}

impl Neg for TangentVector {
    type Output = TangentVector;
    fn neg(self) -> TangentVector {
        TangentVector(-self.0)
    }
}

impl Mul<f64> for TangentVector {
    type Output = TangentVector;
    fn mul(self, rhs: f64) -> TangentVector {
        TangentVector(self.0 * rhs)
    }
}

impl From<Vector3<f64>> for TangentVector {
    fn from(v: Vector3<f64>) -> Self {
        TangentVector(v)
    }
}

/// Skew-symmetric matrix of `v`, so that `hat(v)·w = v × w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; reads the skew part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// The generators `E_1, E_2, E_3` of 𝔰𝔬(3).
pub fn basis() -> [Matrix3<f64>; 3] {
    [
        hat(&Vector3::x()),
        hat(&Vector3::y()),
        hat(&Vector3::z()),
    ]
}

/// `<A, B> = ½ tr(AᵀB)`.
pub fn inner(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    0.5 * (a.transpose() * b).trace()
}

/// An element of SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after checking `RᵀR = I` and `det R = 1` within `tol`.
    pub fn from_matrix(m: Matrix3<f64>, tol: f64) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotation matrix"));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if ortho > tol || (det - 1.0).abs() > tol {
            return Err(Error::invalid(
                "rotation",
                format!("orthogonality error {ortho:.3e}, det {det}"),
            ));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix without validation. The caller guarantees it is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Builds a rotation from 9 row-major entries, validating at `tol` and
    /// then snapping back onto the group.
    pub fn from_row_major(entries: &[f64], tol: f64) -> Result<Self> {
        if entries.len() != 9 {
            return Err(Error::invalid(
                "rotation",
                format!("expected 9 entries, got {}", entries.len()),
            ));
        }
        let m = Matrix3::from_row_slice(entries);
        Ok(Rotation::from_matrix(m, tol)?.renormalized())
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_unit_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(q.to_rotation_matrix().into_inner())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        log_map(self).norm()
    }

    /// Largest deviation from the rotation invariants.
    pub fn invariant_error(&self) -> f64 {
        let ortho = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max();
        ortho.max((self.0.determinant() - 1.0).abs())
    }

    /// One Newton step of the polar decomposition, `R ← ½(R + R⁻ᵀ)`.
    /// Quadratically removes accumulated drift from a nearly orthogonal matrix.
    pub fn renormalized(&self) -> Rotation {
        match self.0.try_inverse() {
            Some(inv) => Rotation(0.5 * (self.0 + inv.transpose())),
            None => *self,
        }
    }

    /// `R·exp(hat(v))`, the body-frame retraction.
    pub fn retract(&self, v: &TangentVector) -> Rotation {
        Rotation(self.0 * exp_map(v).0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Rodrigues' formula.
pub fn exp_map(v: &TangentVector) -> Rotation {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = v.hat();
    let (a, b) = if theta < SMALL_ANGLE {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Principal logarithm, angle in `[0, π]`.
pub fn log_map(r: &Rotation) -> TangentVector {
    let m = r.matrix();
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // skew = sin(ω)·n
    let skew = vee(m);
    let sin = skew.norm();
    let omega = sin.atan2(cos);

    if omega < SMALL_ANGLE {
        let w2 = omega * omega;
        return TangentVector(skew * (1.0 + w2 / 6.0 + 7.0 * w2 * w2 / 360.0));
    }
    if cos > -0.9 {
        return TangentVector(skew * (omega / sin));
    }

    // Near π the skew part vanishes; read the axis from the symmetric part
    // (R + Rᵀ)/2 - cos·I = (1 - cos)·n nᵀ.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos;
    let diag = sym.diagonal();
    let i = diag.imax();
    let one_minus_cos = 1.0 - cos;
    let n_i = (diag[i].max(0.0) / one_minus_cos).sqrt();
    let mut axis: Vector3<f64> = sym.column(i) / (one_minus_cos * n_i);
    axis.normalize_mut();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    TangentVector(axis * omega)
}

/// `‖log(R1ᵀR2)‖`.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    log_map(&(r1.transpose() * *r2)).norm()
}

/// Uniform (Haar) rotation via a normalized Gaussian quaternion.
pub fn sample_haar<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let q = Quaternion::new(w, x, y, z);
        if q.norm() > 1e-12 {
            return Rotation::from_unit_quaternion(&UnitQuaternion::from_quaternion(q));
        }
    }
}

/// Uniformly distributed unit vector.
pub fn sample_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Right Jacobian of the exponential: `exp(v + δ) ≈ exp(v)·exp(J_r(v)·δ)`.
pub fn right_jacobian(v: &TangentVector) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let k = v.hat();
    let (a, b) = if theta < SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}
