//! Bounded dual quadrics (ellipsoids) and their projections.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::bbox::BBox;
use super::camera::Camera;
use super::se3::Pose;
use crate::error::{invalid, Error, Result};

pub type Vector9 = SVector<f64, 9>;

/// Ellipsoid given by a rigid frame and the logarithms of its semi-axes.
///
/// Storing log semi-axes keeps every representable value bounded: the dual
/// matrix always has three positive eigenvalues and one negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualQuadric {
    pub frame: Pose,
    pub log_semi_axes: Vector3<f64>,
}

impl DualQuadric {
    pub fn new(frame: Pose, semi_axes: Vector3<f64>) -> Result<Self> {
        if !semi_axes.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(invalid("semi-axes must be positive and finite"));
        }
        Ok(Self { frame, log_semi_axes: semi_axes.map(f64::ln) })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self> {
        Self::new(Pose::from_translation(center), Vector3::repeat(radius))
    }

    pub fn semi_axes(&self) -> Vector3<f64> {
        self.log_semi_axes.map(f64::exp)
    }

    pub fn center(&self) -> Vector3<f64> {
        *self.frame.translation()
    }

    pub fn volume(&self) -> f64 {
        let a = self.semi_axes();
        4.0 / 3.0 * std::f64::consts::PI * a.x * a.y * a.z
    }

    /// Canonical dual matrix `diag(a², b², c², −1)`.
    pub fn canonical_matrix(&self) -> Matrix4<f64> {
        let a = self.semi_axes();
        Matrix4::from_diagonal(&nalgebra::Vector4::new(a.x * a.x, a.y * a.y, a.z * a.z, -1.0))
    }

    /// `Q* = T · diag(a², b², c², −1) · Tᵀ`
    pub fn dual_matrix(&self) -> Matrix4<f64> {
        let h = self.frame.matrix();
        let q = h * self.canonical_matrix() * h.transpose();
        (q + q.transpose()) * 0.5
    }

    /// `(T · exp(δ[0..6]), L + δ[6..9])`
    pub fn retract(&self, delta: &Vector9) -> Result<Self> {
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(invalid("quadric update is not finite"));
        }
        let d6 = Vector6::from_iterator(delta.iter().take(6).copied());
        let dl = Vector3::new(delta[6], delta[7], delta[8]);
        let log_semi_axes = self.log_semi_axes + dl;
        if !log_semi_axes.iter().all(|v| v.exp().is_finite() && v.exp() > 0.0) {
            return Err(invalid("quadric semi-axes overflow"));
        }
        Ok(Self { frame: self.frame.retract(&d6)?, log_semi_axes })
    }

    /// Tangent vector taking `self` to `other`.
    pub fn local(&self, other: &DualQuadric) -> Vector9 {
        let d = self.frame.local(&other.frame);
        let dl = other.log_semi_axes - self.log_semi_axes;
        Vector9::from_iterator(d.iter().chain(dl.iter()).copied())
    }

    /// Same ellipsoid expressed through `t` (which maps the quadric's current
    /// frame of reference into the new one).
    pub fn transformed(&self, t: &Pose) -> Self {
        Self { frame: t.compose(&self.frame), log_semi_axes: self.log_semi_axes }
    }

    /// `(x−c)ᵀ R diag(1/a²) Rᵀ (x−c)`; below 1 inside, 1 on the surface.
    pub fn normalized_radius2(&self, x: &Vector3<f64>) -> f64 {
        let p = self.frame.inverse_transform_point(x);
        let a = self.semi_axes();
        (p.x / a.x).powi(2) + (p.y / a.y).powi(2) + (p.z / a.z).powi(2)
    }

    /// Half-width of the ellipsoid along unit direction `n`.
    pub fn support_radius(&self, n: &Vector3<f64>) -> f64 {
        let local = self.frame.rotation().transpose() * n;
        let a = self.semi_axes();
        (local.x * local.x * a.x * a.x + local.y * local.y * a.y * a.y + local.z * local.z * a.z * a.z).sqrt()
    }

    /// Surface point at spherical angles in the quadric frame.
    pub fn surface_point(&self, azimuth: f64, elevation: f64) -> Vector3<f64> {
        let a = self.semi_axes();
        let local = Vector3::new(
            a.x * elevation.cos() * azimuth.cos(),
            a.y * elevation.cos() * azimuth.sin(),
            a.z * elevation.sin(),
        );
        self.frame.transform_point(&local)
    }
}

/// Number of (positive, negative) eigenvalues of a symmetric matrix, treating
/// magnitudes below `tol · max|λ|` as zero.
pub fn eigen_signature<R, C, S>(m: &nalgebra::Matrix<f64, R, C, S>, tol: f64) -> (usize, usize)
where
    R: nalgebra::Dim,
    C: nalgebra::Dim,
    S: nalgebra::RawStorage<f64, R, C>,
{
    let d = nalgebra::DMatrix::from_iterator(m.nrows(), m.ncols(), m.iter().copied());
    let eig = d.symmetric_eigenvalues();
    let scale = eig.amax();
    let pos = eig.iter().filter(|v| **v > tol * scale).count();
    let neg = eig.iter().filter(|v| **v < -tol * scale).count();
    (pos, neg)
}

/// `P = K [I | 0] · (world-to-camera)` for a camera whose pose `cam_to_world`
/// maps camera points into the world.
pub fn projection_matrix(cam: &Camera, cam_to_world: &Pose) -> Matrix3x4<f64> {
    let w2c = cam_to_world.inverse().matrix();
    cam.k() * w2c.fixed_view::<3, 4>(0, 0)
}

/// Dual conic `C* ~ P Q* Pᵀ`, scaled so that its (3,3) entry is −1.
pub fn project_quadric(q: &DualQuadric, cam: &Camera, cam_to_world: &Pose) -> Result<Matrix3<f64>> {
    let center_cam = cam_to_world.inverse_transform_point(&q.center());
    if center_cam.z <= 0.0 {
        return Err(Error::BehindCamera);
    }
    if q.normalized_radius2(cam_to_world.translation()) <= 1.0 {
        return Err(Error::DegenerateProjection("camera inside ellipsoid".into()));
    }
    let p = projection_matrix(cam, cam_to_world);
    let c = p * q.dual_matrix() * p.transpose();
    let c = (c + c.transpose()) * 0.5;
    let c33 = c[(2, 2)];
    if c33.abs() < 1e-12 {
        return Err(Error::DegenerateProjection("conic (3,3) entry vanishes".into()));
    }
    if c33 > 0.0 {
        // ellipsoid crosses the camera's principal plane: the image is unbounded
        return Err(Error::DegenerateProjection("ellipsoid straddles the image plane".into()));
    }
    Ok(c / -c33)
}

/// Tight axis-aligned box of the ellipse described by a dual conic.
pub fn conic_to_bbox(c: &Matrix3<f64>) -> Result<BBox> {
    let c33 = c[(2, 2)];
    if !c.iter().all(|v| v.is_finite()) || c33.abs() < 1e-12 {
        return Err(Error::DegenerateProjection("conic (3,3) entry vanishes".into()));
    }
    let c = c / -c33;
    let (cx, cy) = (-c[(0, 2)], -c[(1, 2)]);
    // shape matrix S of the ellipse (x−m)ᵀ S⁻¹ (x−m) = 1
    let s11 = c[(0, 0)] + cx * cx;
    let s22 = c[(1, 1)] + cy * cy;
    let s12 = 0.5 * (c[(0, 1)] + c[(1, 0)]) + cx * cy;
    if s11 <= 0.0 || s22 <= 0.0 || s11 * s22 - s12 * s12 <= 0.0 {
        return Err(Error::DegenerateProjection("conic is not an ellipse".into()));
    }
    let (hx, hy) = (s11.sqrt(), s22.sqrt());
    BBox::new(cx - hx, cy - hy, cx + hx, cy + hy)
}

/// Dual conic of the ellipse with center `(cx, cy)`, semi-axes `(a, b)` and
/// orientation `angle` (radians), normalized to (3,3) entry −1.
pub fn ellipse_dual_conic(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let r = nalgebra::Matrix2::new(c, -s, s, c);
    let shape = r * nalgebra::Matrix2::new(a * a, 0.0, 0.0, b * b) * r.transpose();
    let m = nalgebra::Vector2::new(cx, cy);
    let top = shape - m * m.transpose();
    Matrix3::new(top[(0, 0)], top[(0, 1)], -cx, top[(1, 0)], top[(1, 1)], -cy, -cx, -cy, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quadric(rng: &mut impl Rng) -> DualQuadric {
        let frame = Pose::exp(&Vector6::from_fn(|_, _| rng.random_range(-2.0..2.0)));
        let axes = Vector3::from_fn(|_, _| rng.random_range(0.2..2.0));
        DualQuadric::new(frame, axes).unwrap()
    }

    fn default_view() -> (Camera, Pose) {
        let cam = Camera::default();
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0)).unwrap();
        (cam, pose)
    }

    #[test]
    fn sphere_dual_matrices() {
        let unit = DualQuadric::sphere(Vector3::zeros(), 1.0).unwrap();
        assert_eq!(unit.dual_matrix(), Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, -1.0)));
        let q = DualQuadric::new(Pose::identity(), Vector3::new(2.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(
            q.dual_matrix(),
            Matrix4::from_diagonal(&Vector4::new(4.0, 1.0, 1.0, -1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_and_log_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_quadric(&mut rng);
        assert_eq!(q.retract(&Vector9::zeros()).unwrap(), q);
        let unit = DualQuadric::sphere(Vector3::zeros(), 1.0).unwrap();
        let mut d = Vector9::zeros();
        d.fixed_rows_mut::<3>(6).fill(2f64.ln());
        let big = unit.retract(&d).unwrap();
        assert_relative_eq!(big.semi_axes(), Vector3::repeat(2.0), epsilon = 1e-12);
        assert_eq!(big.center(), Vector3::zeros());
    }

    #[test]
    fn tangent_planes_annihilate_dual_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let q = random_quadric(&mut rng);
            let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let touch = q.center() + n * q.support_radius(&n);
            let plane = Vector4::new(n.x, n.y, n.z, -n.dot(&touch));
            let m = q.dual_matrix();
            assert!((plane.transpose() * m * plane)[0].abs() < 1e-9 * m.norm());
        }
    }

    #[test]
    fn retraction_keeps_signature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = random_quadric(&mut rng);
            let d = Vector9::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let r = q.retract(&d).unwrap();
            assert_eq!(eigen_signature(&r.dual_matrix(), 1e-12), (3, 1));
        }
    }

    #[test]
    fn sphere_projects_to_centered_circle() {
        let (cam, pose) = default_view();
        let q = DualQuadric::sphere(Vector3::zeros(), 1.0).unwrap();
        let c = project_quadric(&q, &cam, &pose).unwrap();
        assert_eq!(c[(2, 2)], -1.0);
        let b = conic_to_bbox(&c).unwrap();
        let (u, v) = b.center();
        assert_relative_eq!(u, 320.0, epsilon = 1e-9);
        assert_relative_eq!(v, 240.0, epsilon = 1e-9);
        // tangent cone half-angle: sin α = 1/5
        let r = 500.0 / 24f64.sqrt();
        assert_relative_eq!(b.width() / 2.0, r, epsilon = 1e-9);
        assert_relative_eq!(b.height() / 2.0, r, epsilon = 1e-9);
        assert_eq!(eigen_signature(&c, 1e-12), (2, 1));
    }

    #[test]
    fn projection_errors() {
        let (cam, pose) = default_view();
        let behind = DualQuadric::sphere(Vector3::new(0.0, 0.0, -10.0), 1.0).unwrap();
        assert_eq!(project_quadric(&behind, &cam, &pose), Err(Error::BehindCamera));
        let around = DualQuadric::sphere(Vector3::new(0.0, 0.0, -4.5), 2.0).unwrap();
        assert!(matches!(project_quadric(&around, &cam, &pose), Err(Error::DegenerateProjection(_))));
    }

    #[test]
    fn conic_bbox_simple_cases() {
        let c = ellipse_dual_conic(320.0, 240.0, 100.0, 100.0, 0.0);
        assert_eq!(conic_to_bbox(&c).unwrap().corners(), [220.0, 140.0, 420.0, 340.0]);
        let c = ellipse_dual_conic(0.0, 0.0, 50.0, 20.0, 0.0);
        assert_eq!(conic_to_bbox(&c).unwrap().corners(), [-50.0, -20.0, 50.0, 20.0]);
        let hyperbola = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        assert!(conic_to_bbox(&hyperbola).is_err());
    }
}
