//! Infinite planes as unit-normal homogeneous 4-vectors.
//!
//! For optimization a plane is viewed as a point on the unit 3-sphere with
//! antipodal points identified, `q = π/‖π‖`, and updated by quaternion
//! right-multiplication `q ⊗ exp(δ)`.

use nalgebra::{Matrix3, Matrix3x4, Matrix4x3, Quaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::se3::Pose;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    coeffs: Vector4<f64>,
}

impl Plane {
    /// Plane `a·x + b·y + c·z + d = 0`, rescaled so `‖(a, b, c)‖ = 1`.
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        Self::from_coeffs(Vector4::new(a, b, c, d))
    }

    pub fn from_coeffs(coeffs: Vector4<f64>) -> Result<Self> {
        if !coeffs.iter().all(|v| v.is_finite()) {
            return Err(invalid("plane coefficients are not finite"));
        }
        let n = coeffs.fixed_rows::<3>(0).norm();
        if n < 1e-12 {
            return Err(invalid("plane normal is zero"));
        }
        Ok(Self { coeffs: coeffs / n })
    }

    pub fn from_normal_and_point(normal: Vector3<f64>, point: Vector3<f64>) -> Result<Self> {
        Self::from_coeffs(Vector4::new(normal.x, normal.y, normal.z, -normal.dot(&point)))
    }

    pub fn coeffs(&self) -> &Vector4<f64> {
        &self.coeffs
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.coeffs.fixed_rows::<3>(0).into_owned()
    }

    /// Signed offset `d`; the origin lies at signed distance `d` from the plane.
    pub fn offset(&self) -> f64 {
        self.coeffs[3]
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal().dot(x) + self.offset()
    }

    /// Closest point of the plane to the origin.
    pub fn anchor_point(&self) -> Vector3<f64> {
        -self.offset() * self.normal()
    }

    pub fn negated(&self) -> Self {
        Self { coeffs: -self.coeffs }
    }

    /// Image of the plane under the rigid transform `t` (which maps points of
    /// the plane's frame to the target frame).
    pub fn transform(&self, t: &Pose) -> Self {
        let c = t.plane_matrix() * self.coeffs;
        // rigid maps preserve the normal norm; renormalize only against round-off
        Self::from_coeffs(c).expect("rigid transform of a valid plane")
    }

    pub fn quaternion(&self) -> Quaternion<f64> {
        let q = self.coeffs / self.coeffs.norm();
        Quaternion::new(q[3], q[0], q[1], q[2])
    }

    fn from_quaternion(q: &Quaternion<f64>) -> Result<Self> {
        Self::new(q.i, q.j, q.k, q.w)
    }

    /// `q ⊗ exp(δ)` with `exp(δ) = (cos‖δ‖, sin‖δ‖ δ/‖δ‖)`.
    pub fn retract(&self, delta: &Vector3<f64>) -> Result<Self> {
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(invalid("plane update is not finite"));
        }
        let q = self.quaternion() * sphere_exp(delta);
        Self::from_quaternion(&q)
    }

    /// Tangent vector taking `self` to `other` in the chart at `self`, with the
    /// sign of `other` chosen to minimize the angle.
    pub fn local(&self, other: &Plane) -> Vector3<f64> {
        let q = self.quaternion();
        let mut o = other.quaternion();
        if q.coords.dot(&o.coords) < 0.0 {
            o = -o;
        }
        sphere_log(&(q.conjugate() * o))
    }

    /// Derivative of the unit-normal coefficients with respect to the retraction
    /// parameter at zero (4×3).
    pub fn retraction_jacobian(&self) -> Matrix4x3<f64> {
        let s = self.coeffs.norm();
        let q = self.quaternion();
        let n = self.normal();
        let mut out = Matrix4x3::zeros();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            let dq = q * Quaternion::from_imag(e);
            let dqv = Vector4::new(dq.i, dq.j, dq.k, dq.w);
            let dn = Vector3::new(dq.i, dq.j, dq.k);
            let col = (dqv - self.coeffs * n.dot(&dn)) * s;
            out.set_column(k, &col);
        }
        out
    }

    /// Derivative of [`Plane::local`]`(self, obs)` with respect to the raw
    /// (unnormalized) coefficients of `self`, evaluated at `self` (3×4).
    pub fn local_jacobian(&self, obs: &Plane) -> Matrix3x4<f64> {
        let r = self.local(obs);
        let norm = self.coeffs.norm();
        let q = self.coeffs / norm;
        // d q / d π for q = π / ‖π‖
        let dq_dpi = (nalgebra::Matrix4::identity() - q * q.transpose()) / norm;
        // chart coordinates of a tangent displacement: vec(q⁻¹ ⊗ dq)
        let qq = self.quaternion().conjugate();
        let mut chart = Matrix3x4::zeros();
        for k in 0..4 {
            let mut e = Vector4::zeros();
            e[k] = 1.0;
            let p = qq * Quaternion::new(e[3], e[0], e[1], e[2]);
            chart.set_column(k, &Vector3::new(p.i, p.j, p.k));
        }
        -(sphere_log_jacobian(&r) * chart * dq_dpi)
    }
}

pub(crate) fn sphere_exp(delta: &Vector3<f64>) -> Quaternion<f64> {
    let t = delta.norm();
    if t < 1e-12 {
        Quaternion::new(1.0, delta.x, delta.y, delta.z)
    } else {
        let s = t.sin() / t;
        Quaternion::new(t.cos(), delta.x * s, delta.y * s, delta.z * s)
    }
}

pub(crate) fn sphere_log(q: &Quaternion<f64>) -> Vector3<f64> {
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    if n < 1e-12 {
        v / w
    } else {
        v * (n.atan2(w) / n)
    }
}

// d log(exp(−ε) ⊗ exp(r)) / dε at ε = 0, up to sign: the inverse left Jacobian
// of SO(3) at rotation vector 2r.
fn sphere_log_jacobian(r: &Vector3<f64>) -> Matrix3<f64> {
    super::se3::so3::left_jacobian_inv(&(2.0 * r))
}
