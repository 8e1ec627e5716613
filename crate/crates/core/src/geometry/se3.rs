//! Rigid transforms and the SO(3)/SE(3) exponential maps.
//!
//! Tangent vectors are ordered rotation first: `(ω, v)`. Retraction is a right
//! perturbation, `T · exp(δ)`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const SMALL_ANGLE: f64 = 1e-5;

pub mod so3 {
    use super::*;

    #[rustfmt::skip]
    pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::new(
            0.0, -w.z, w.y,
            w.z, 0.0, -w.x,
            -w.y, w.x, 0.0,
        )
    }

    pub fn exp(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(w);
        let (a, b) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Matrix3::identity() + k * a + k * k * b
    }

    /// Rotation vector of `r`. At an angle of exactly π either antipodal branch may
    /// be returned.
    pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
        let (mut w, mut v) = (q.w, q.imag());
        if w < 0.0 {
            w = -w;
            v = -v;
        }
        let n = v.norm();
        if n < 1e-8 {
            // 2·atan2(n, w)/n expanded around n = 0
            v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
        } else {
            v * (2.0 * n.atan2(w) / n)
        }
    }

    pub fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(w);
        let (a, b) = if theta < SMALL_ANGLE {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
        };
        Matrix3::identity() + k * a + k * k * b
    }

    pub fn left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(w);
        let c = if theta < SMALL_ANGLE {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
        };
        Matrix3::identity() - k * 0.5 + k * k * c
    }

    /// Closest rotation matrix in the Frobenius sense.
    pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut d = Matrix3::identity();
            d[(2, 2)] = -1.0;
            r = u * d * vt;
        }
        r
    }
}

/// Twist hat operator: the 4×4 generator of the tangent vector `(ω, v)`.
pub fn twist_hat(xi: &Vector6<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3::hat(&w));
    m[(0, 3)] = xi[3];
    m[(1, 3)] = xi[4];
    m[(2, 3)] = xi[5];
    m
}

/// Generator for the k-th tangent basis direction.
pub fn generator(k: usize) -> Matrix4<f64> {
    let mut e = Vector6::zeros();
    e[k] = 1.0;
    twist_hat(&e)
}

/// Rigid transform in SE(3). Maps points of its source frame into its target
/// frame: `x_target = R · x_source + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from a rotation matrix, rejecting matrices that are not
    /// orthonormal with determinant +1 (tolerance 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(invalid("pose has non-finite entries"));
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if err > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("rotation is not orthonormal (|RᵀR−I| = {err:e}, det = {det})")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_rotation_vector(w: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self { rotation: so3::exp(&w), translation: t }
    }

    /// Camera pose at `eye` looking at `target`; camera axes are x right,
    /// y down, z forward. `up` must not be parallel to the viewing direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = target - eye;
        if z.norm() < 1e-12 {
            return Err(invalid("look_at target coincides with eye"));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(invalid("look_at up vector is parallel to view direction"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Ok(Self { rotation: r, translation: eye })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Inverse-transpose of the homogeneous matrix, the action on plane
    /// coordinates.
    pub fn plane_matrix(&self) -> Matrix4<f64> {
        let rt = self.rotation;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        let row = -(self.translation.transpose() * rt);
        m.fixed_view_mut::<1, 3>(3, 0).copy_from(&row);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `inverse(self) · other`
    pub fn between(&self, other: &Pose) -> Self {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn transform_homogeneous(&self, p: &Vector4<f64>) -> Vector4<f64> {
        self.matrix() * p
    }

    pub fn exp(xi: &Vector6<f64>) -> Self {
        let w = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        Self { rotation: so3::exp(&w), translation: so3::left_jacobian(&w) * v }
    }

    /// Logarithm `(ω, v)`; inverse of [`Pose::exp`] for rotation angles below π.
    pub fn log(&self) -> Vector6<f64> {
        let w = so3::log(&self.rotation);
        let v = so3::left_jacobian_inv(&w) * self.translation;
        Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
    }

    /// Right retraction `self · exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Result<Self> {
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(invalid("pose update is not finite"));
        }
        let mut out = self.compose(&Self::exp(delta));
        // keep the rotation on the manifold despite accumulated round-off
        if (out.rotation.transpose() * out.rotation - Matrix3::identity()).amax() > 1e-12 {
            out.rotation = so3::orthonormalize(&out.rotation);
        }
        Ok(out)
    }

    /// Tangent vector `log(self⁻¹ · other)`.
    pub fn local(&self, other: &Pose) -> Vector6<f64> {
        self.between(other).log()
    }

    /// Adjoint in `(ω, v)` ordering: `T exp(ξ) T⁻¹ = exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(so3::hat(&self.translation) * self.rotation));
        ad
    }

    pub fn is_valid(&self) -> bool {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        err <= 1e-9 && (self.rotation.determinant() - 1.0).abs() <= 1e-9
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// SE(3) left Jacobian in `(ω, v)` ordering:
/// `exp(ξ + ε) ≈ exp(J_l(ξ) ε) · exp(ξ)`.
pub fn se3_left_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let j = so3::left_jacobian(&w);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&se3_q(&v, &w));
    out
}

pub fn se3_left_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let ji = so3::left_jacobian_inv(&w);
    let q = se3_q(&v, &w);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(ji * q * ji)));
    out
}

/// `J_r(ξ) = J_l(−ξ)`
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

// Coupling block of the SE(3) Jacobian for translation part `rho` and
// rotation part `phi`.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = so3::hat(phi);
    let r = so3::hat(rho);
    let (c1, c2, c3) = if theta < 1e-4 {
        (1.0 / 6.0 - theta2 / 120.0, 1.0 / 24.0 - theta2 / 720.0, 1.0 / 120.0 - theta2 / 2520.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        (
            (theta - s) / t3,
            (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * t3),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut impl Rng, scale: f64) -> Vector6<f64> {
        Vector6::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn identity_retract() {
        let p = Pose::identity().retract(&Vector6::zeros()).unwrap();
        assert_eq!(p, Pose::identity());
    }

    #[test]
    fn pure_translation_retract() {
        let p = Pose::identity().retract(&Vector6::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0)).unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn non_finite_delta_rejected() {
        let d = Vector6::new(0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0);
        assert!(Pose::identity().retract(&d).is_err());
    }

    #[test]
    fn log_of_translation() {
        let p = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(p.log(), Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0));
        assert_eq!(Pose::identity().log(), Vector6::zeros());
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let mut xi = random_twist(&mut rng, 2.0);
            let w = xi.fixed_rows::<3>(0).norm();
            if w > 2.0 {
                xi.fixed_rows_mut::<3>(0).scale_mut(2.0 / w);
            }
            let p = Pose::exp(&xi);
            let back = Pose::identity().retract(&p.log()).unwrap();
            assert!((back.matrix() - p.matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn retract_then_local_recovers_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = Pose::exp(&random_twist(&mut rng, 2.0));
            let mut d = random_twist(&mut rng, 1.0);
            if d.norm() > 0.5 {
                d *= 0.5 / d.norm();
            }
            let q = p.retract(&d).unwrap();
            assert!((p.local(&q) - d).amax() < 1e-9);
        }
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = Pose::exp(&random_twist(&mut rng, 3.0));
            let e = p.compose(&p.inverse());
            assert!((e.matrix() - Matrix4::identity()).amax() < 1e-9);
            assert!(p.is_valid());
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let xi = random_twist(&mut rng, 1.5);
            let j = se3_left_jacobian(&xi);
            let base = Pose::exp(&xi);
            let h = 1e-6;
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let plus = Pose::exp(&(xi + e)).compose(&base.inverse()).log();
                let minus = Pose::exp(&(xi - e)).compose(&base.inverse()).log();
                let col = (plus - minus) / (2.0 * h);
                assert_relative_eq!(col, j.column(k).into_owned(), epsilon = 1e-7);
            }
            let ji = se3_left_jacobian_inv(&xi);
            assert!((ji * j - Matrix6::identity()).amax() < 1e-9);
        }
    }

    #[test]
    fn adjoint_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Pose::exp(&random_twist(&mut rng, 1.0));
        let xi = random_twist(&mut rng, 0.3);
        let lhs = t.compose(&Pose::exp(&xi)).compose(&t.inverse());
        let rhs = Pose::exp(&(t.adjoint() * xi));
        assert!((lhs.matrix() - rhs.matrix()).amax() < 1e-12);
    }

    #[test]
    fn look_at_points_forward() {
        let p = Pose::look_at(Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        let c = p.inverse_transform_point(&Vector3::zeros());
        assert_relative_eq!(c, Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-12);
        assert!(p.is_valid());
    }
}
