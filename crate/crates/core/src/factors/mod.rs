//! Residuals and Jacobians of every constraint kind.
//!
//! Each landmark argument of a factor may be expressed in the world frame or
//! relative to a keyframe pose. Jacobians are taken with respect to the
//! tangent space of every distinct variable the factor touches; a variable
//! appearing in several roles receives the sum of its contributions.

mod noise;

use nalgebra::{
    DMatrix, DVector, Matrix3x6, Matrix4, Matrix4x3, Matrix4x6, RowVector4, SMatrix, Vector2, Vector3, Vector4, Vector6,
};
use serde::{Deserialize, Serialize};

pub use noise::{Huber, NoiseModel};

use crate::error::{invalid, Error, Result};
use crate::geometry::se3::{generator, se3_left_jacobian_inv, se3_right_jacobian_inv, so3};
use crate::geometry::{
    conic_to_bbox, cuboid_iou, project_quadric, quadric_cuboid, relative_pose, BBox, Camera, Cuboid, DualQuadric,
    Plane, Pose,
};
use crate::graph::{Variable, VariableId, VariableKind};

/// Central-difference step used by [`numeric_jacobian`].
pub const NUMERIC_STEP: f64 = 1e-6;

/// Frame a landmark is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    World,
    Keyframe(VariableId),
}

/// Kind-specific measurement payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FactorModel {
    /// Arguments: camera pose, world point.
    Reprojection { camera: Camera, pixel: Vector2<f64> },
    /// Arguments: point, plane, plane frame.
    PointPlane,
    /// Arguments: plane, frame, plane, frame.
    Parallel,
    /// Arguments: plane, frame, plane, frame.
    Perpendicular,
    /// Arguments: plane, plane frame, quadric, quadric frame.
    Tangency,
    /// Arguments: plane, plane frame, observing pose.
    PlaneObservation { measured: Plane },
    /// Arguments: quadric, quadric frame, observing pose.
    QuadricObservation { camera: Camera, measured: BBox },
    /// Arguments: quadric.
    ShapePrior { model: Cuboid },
    /// Arguments: pose i, pose j.
    Between { measured: Pose },
}

impl FactorModel {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Reprojection { .. } => "reprojection",
            Self::PointPlane => "point_plane",
            Self::Parallel => "parallel",
            Self::Perpendicular => "perpendicular",
            Self::Tangency => "tangency",
            Self::PlaneObservation { .. } => "plane_observation",
            Self::QuadricObservation { .. } => "quadric_observation",
            Self::ShapePrior { .. } => "shape_prior",
            Self::Between { .. } => "between",
        }
    }

    pub fn residual_dim(&self) -> usize {
        match self {
            Self::Reprojection { .. } => 2,
            Self::PlaneObservation { .. } => 3,
            Self::Between { .. } => 6,
            _ => 1,
        }
    }

    /// Whether the residual is piecewise smooth in IoU and differentiated numerically.
    pub fn uses_numeric_jacobian(&self) -> bool {
        matches!(self, Self::QuadricObservation { .. } | Self::ShapePrior { .. })
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Self::Reprojection { camera, pixel } => {
                camera.validate()?;
                if !finite(pixel.as_slice()) {
                    return Err(invalid("pixel measurement is not finite"));
                }
            }
            Self::PlaneObservation { measured } if !finite(measured.coeffs().as_slice()) => {
                return Err(invalid("plane measurement is not finite"));
            }
            Self::QuadricObservation { camera, measured } => {
                camera.validate()?;
                measured.validate()?;
            }
            Self::Between { measured } if !measured.is_valid() => {
                return Err(invalid("between measurement is not a valid pose"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Residual and per-variable Jacobians at a linearization point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

/// A constraint between variables, with its noise model and optional robust loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub model: FactorModel,
    keys: Vec<VariableId>,
    // logical argument -> index into `keys`; None for a world frame
    slots: Vec<Option<usize>>,
    pub noise: NoiseModel,
    pub robust: Option<Huber>,
}

impl Factor {
    fn build(model: FactorModel, args: &[(Option<VariableId>, VariableKind)], noise: NoiseModel) -> Result<Self> {
        model.validate()?;
        if noise.dim() != model.residual_dim() {
            return Err(invalid(format!(
                "{} residual has dimension {}, noise model has {}",
                model.name(),
                model.residual_dim(),
                noise.dim()
            )));
        }
        let mut keys: Vec<VariableId> = Vec::new();
        let mut slots = Vec::with_capacity(args.len());
        for (id, kind) in args {
            let Some(id) = id else {
                slots.push(None);
                continue;
            };
            if id.kind != *kind {
                return Err(invalid(format!("{} expects a {:?} variable, got {:?}", model.name(), kind, id.kind)));
            }
            let pos = match keys.iter().position(|k| k == id) {
                Some(p) => p,
                None => {
                    keys.push(*id);
                    keys.len() - 1
                }
            };
            slots.push(Some(pos));
        }
        Ok(Self { model, keys, slots, noise, robust: None })
    }

    pub fn with_robust(mut self, huber: Huber) -> Self {
        self.robust = Some(huber);
        self
    }

    pub fn reprojection(
        camera_pose: VariableId,
        point: VariableId,
        camera: Camera,
        pixel: Vector2<f64>,
        noise: NoiseModel,
    ) -> Result<Self> {
        Self::build(
            FactorModel::Reprojection { camera, pixel },
            &[(Some(camera_pose), VariableKind::Pose), (Some(point), VariableKind::Point)],
            noise,
        )
    }

    pub fn point_plane(point: VariableId, plane: VariableId, frame: Frame, noise: NoiseModel) -> Result<Self> {
        Self::build(
            FactorModel::PointPlane,
            &[(Some(point), VariableKind::Point), (Some(plane), VariableKind::Plane), frame_arg(frame)],
            noise,
        )
    }

    pub fn parallel(a: (VariableId, Frame), b: (VariableId, Frame), noise: NoiseModel) -> Result<Self> {
        Self::build(FactorModel::Parallel, &plane_pair(a, b), noise)
    }

    pub fn perpendicular(a: (VariableId, Frame), b: (VariableId, Frame), noise: NoiseModel) -> Result<Self> {
        Self::build(FactorModel::Perpendicular, &plane_pair(a, b), noise)
    }

    pub fn tangency(plane: (VariableId, Frame), quadric: (VariableId, Frame), noise: NoiseModel) -> Result<Self> {
        Self::build(
            FactorModel::Tangency,
            &[
                (Some(plane.0), VariableKind::Plane),
                frame_arg(plane.1),
                (Some(quadric.0), VariableKind::Quadric),
                frame_arg(quadric.1),
            ],
            noise,
        )
    }

    pub fn plane_observation(
        plane: VariableId,
        frame: Frame,
        camera_pose: VariableId,
        measured: Plane,
        noise: NoiseModel,
    ) -> Result<Self> {
        Self::build(
            FactorModel::PlaneObservation { measured },
            &[(Some(plane), VariableKind::Plane), frame_arg(frame), (Some(camera_pose), VariableKind::Pose)],
            noise,
        )
    }

    /// Noise defaults to sigma `s^{-1/2}` for detection score `s` when `noise` is None.
    pub fn quadric_observation(
        quadric: VariableId,
        frame: Frame,
        camera_pose: VariableId,
        camera: Camera,
        measured: BBox,
        noise: Option<NoiseModel>,
    ) -> Result<Self> {
        let noise = match noise {
            Some(n) => n,
            None => NoiseModel::isotropic(1, measured.score.max(f64::MIN_POSITIVE).powf(-0.5))?,
        };
        Self::build(
            FactorModel::QuadricObservation { camera, measured },
            &[(Some(quadric), VariableKind::Quadric), frame_arg(frame), (Some(camera_pose), VariableKind::Pose)],
            noise,
        )
    }

    pub fn shape_prior(quadric: VariableId, model: Cuboid, noise: NoiseModel) -> Result<Self> {
        Self::build(FactorModel::ShapePrior { model }, &[(Some(quadric), VariableKind::Quadric)], noise)
    }

    pub fn between(i: VariableId, j: VariableId, measured: Pose, noise: NoiseModel) -> Result<Self> {
        if i == j {
            return Err(invalid("between factor needs two distinct poses"));
        }
        Self::build(
            FactorModel::Between { measured },
            &[(Some(i), VariableKind::Pose), (Some(j), VariableKind::Pose)],
            noise,
        )
    }

    /// Distinct variables in Jacobian order.
    pub fn keys(&self) -> &[VariableId] {
        &self.keys
    }

    pub fn residual_dim(&self) -> usize {
        self.model.residual_dim()
    }

    fn check(&self, vals: &[&Variable]) -> Result<()> {
        if vals.len() != self.keys.len() {
            return Err(invalid(format!("{} needs {} values, got {}", self.model.name(), self.keys.len(), vals.len())));
        }
        for (k, v) in self.keys.iter().zip(vals) {
            if k.kind != v.kind() {
                return Err(invalid(format!("value for {k:?} has kind {:?}", v.kind())));
            }
        }
        Ok(())
    }

    fn pose<'a>(&self, vals: &[&'a Variable], slot: usize) -> Option<&'a Pose> {
        self.slots[slot].map(|i| vals[i].as_pose().expect("kind checked"))
    }

    fn plane<'a>(&self, vals: &[&'a Variable], slot: usize) -> &'a Plane {
        vals[self.slots[slot].expect("landmark slot")].as_plane().expect("kind checked")
    }

    fn quadric<'a>(&self, vals: &[&'a Variable], slot: usize) -> &'a DualQuadric {
        vals[self.slots[slot].expect("landmark slot")].as_quadric().expect("kind checked")
    }

    fn point<'a>(&self, vals: &[&'a Variable], slot: usize) -> &'a Vector3<f64> {
        vals[self.slots[slot].expect("landmark slot")].as_point().expect("kind checked")
    }

    // landmark frame coincides with the observing pose
    fn observer_anchored(&self) -> bool {
        self.slots[1].is_some() && self.slots[1] == self.slots[2]
    }

    /// Unwhitened residual, or None when the factor is inactive at `vals`
    /// (landmark behind the camera, degenerate projection, or IoU = 0).
    pub fn evaluate(&self, vals: &[&Variable]) -> Result<Option<DVector<f64>>> {
        self.check(vals)?;
        let r = match &self.model {
            FactorModel::Reprojection { camera, pixel } => {
                let pose = self.pose(vals, 0).expect("camera slot");
                match point_reprojection(self.point(vals, 1), pose, camera, pixel) {
                    Ok(r) => DVector::from_column_slice(r.as_slice()),
                    Err(Error::BehindCamera) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            FactorModel::PointPlane => {
                let pi = lift_plane(self.plane(vals, 1), self.pose(vals, 2)).0;
                DVector::from_element(1, point_plane(self.point(vals, 0), &pi))
            }
            FactorModel::Parallel | FactorModel::Perpendicular => {
                let a = lift_plane(self.plane(vals, 0), self.pose(vals, 1)).0;
                let b = lift_plane(self.plane(vals, 2), self.pose(vals, 3)).0;
                let r = if matches!(self.model, FactorModel::Parallel) {
                    plane_parallel(&a, &b)
                } else {
                    plane_perpendicular(&a, &b)
                };
                DVector::from_element(1, r)
            }
            FactorModel::Tangency => {
                let pi = lift_plane(self.plane(vals, 0), self.pose(vals, 1)).0;
                let q = lift_quadric(self.quadric(vals, 2), self.pose(vals, 3));
                DVector::from_element(1, tangency(&pi, &q))
            }
            FactorModel::PlaneObservation { measured } => {
                let pc = self.camera_plane(vals);
                DVector::from_column_slice(pc.local(measured).as_slice())
            }
            FactorModel::QuadricObservation { camera, measured } => {
                let qc = self.camera_quadric(vals);
                match bbox_residual(&qc, camera, measured) {
                    Ok(r) if r < 1.0 => DVector::from_element(1, r),
                    Ok(_) | Err(Error::BehindCamera) | Err(Error::DegenerateProjection(_)) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            FactorModel::ShapePrior { model } => DVector::from_element(1, shape_prior(self.quadric(vals, 0), model)),
            FactorModel::Between { measured } => {
                let (ti, tj) = (self.pose(vals, 0).unwrap(), self.pose(vals, 1).unwrap());
                DVector::from_column_slice(between(ti, tj, measured).as_slice())
            }
        };
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::Evaluation(format!("{} residual is not finite", self.model.name())));
        }
        Ok(Some(r))
    }

    fn camera_plane(&self, vals: &[&Variable]) -> Plane {
        let pi = self.plane(vals, 0);
        if self.observer_anchored() {
            return *pi;
        }
        let cam = self.pose(vals, 2).expect("observer slot");
        let pw = lift_plane(pi, self.pose(vals, 1)).0;
        Plane::from_coeffs(cam.matrix().transpose() * pw.coeffs()).expect("rigid image of a valid plane")
    }

    fn camera_quadric(&self, vals: &[&Variable]) -> DualQuadric {
        let q = self.quadric(vals, 0);
        if self.observer_anchored() {
            return *q;
        }
        let cam = self.pose(vals, 2).expect("observer slot");
        lift_quadric(q, self.pose(vals, 1)).transformed(&cam.inverse())
    }

    /// Residual with Jacobians (analytic for smooth kinds, central differences
    /// for the IoU kinds). None when the factor is inactive.
    pub fn linearize(&self, vals: &[&Variable]) -> Result<Option<Linearization>> {
        let Some(residual) = self.evaluate(vals)? else {
            return Ok(None);
        };
        if self.model.uses_numeric_jacobian() {
            return match numeric_jacobian(self, vals) {
                Ok(jacobians) => Ok(Some(Linearization { residual, jacobians })),
                // the perturbed point left the active region: skip this iteration
                Err(Error::Evaluation(_)) => Ok(None),
                Err(e) => Err(e),
            };
        }
        let jacobians = self.analytic_jacobians(vals, &residual);
        Ok(Some(Linearization { residual, jacobians }))
    }

    fn analytic_jacobians(&self, vals: &[&Variable], residual: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let m = residual.len();
        let mut jac: Vec<DMatrix<f64>> = self.keys.iter().map(|k| DMatrix::zeros(m, k.kind.dim())).collect();
        let mut add = |slot: usize, block: DMatrix<f64>| {
            if let Some(i) = self.slots[slot] {
                jac[i] += block;
            }
        };
        match &self.model {
            FactorModel::Reprojection { camera, .. } => {
                let pose = self.pose(vals, 0).unwrap();
                let xc = pose.inverse_transform_point(self.point(vals, 1));
                let dp = projection_jacobian(camera, &xc);
                let mut dxc = Matrix3x6::zeros();
                dxc.fixed_view_mut::<3, 3>(0, 0).copy_from(&so3::hat(&xc));
                dxc.fixed_view_mut::<3, 3>(0, 3).copy_from(&-nalgebra::Matrix3::identity());
                add(0, to_dyn(&(dp * dxc)));
                add(1, to_dyn(&(dp * pose.rotation().transpose())));
            }
            FactorModel::PointPlane => {
                let x = self.point(vals, 0);
                let (pi, dpl, dan) = lift_plane(self.plane(vals, 1), self.pose(vals, 2));
                let g = RowVector4::new(x.x, x.y, x.z, 1.0);
                add(0, to_dyn(&pi.normal().transpose()));
                add(1, to_dyn(&(g * dpl)));
                if let Some(d) = dan {
                    add(2, to_dyn(&(g * d)));
                }
            }
            FactorModel::Parallel | FactorModel::Perpendicular => {
                let (a, dpa, daa) = lift_plane(self.plane(vals, 0), self.pose(vals, 1));
                let (b, dpb, dab) = lift_plane(self.plane(vals, 2), self.pose(vals, 3));
                let sign = if matches!(self.model, FactorModel::Parallel) {
                    a.normal().dot(&b.normal()).signum()
                } else {
                    1.0
                };
                let ga = RowVector4::new(b.coeffs()[0], b.coeffs()[1], b.coeffs()[2], 0.0) * sign;
                let gb = RowVector4::new(a.coeffs()[0], a.coeffs()[1], a.coeffs()[2], 0.0) * sign;
                add(0, to_dyn(&(ga * dpa)));
                if let Some(d) = daa {
                    add(1, to_dyn(&(ga * d)));
                }
                add(2, to_dyn(&(gb * dpb)));
                if let Some(d) = dab {
                    add(3, to_dyn(&(gb * d)));
                }
            }
            FactorModel::Tangency => {
                let (pi, dpl, dan) = lift_plane(self.plane(vals, 0), self.pose(vals, 1));
                let q_rel = self.quadric(vals, 2);
                let qw = lift_quadric(q_rel, self.pose(vals, 3));
                let (g_pi, g_q) = tangency_gradient(pi.coeffs(), &qw);
                add(0, to_dyn(&(g_pi * dpl)));
                if let Some(d) = dan {
                    add(1, to_dyn(&(g_pi * d)));
                }
                add(2, to_dyn(&g_q));
                if self.slots[3].is_some() {
                    // T_a exp(ε) T_Q = T_a T_Q exp(Ad(T_Q⁻¹) ε)
                    let ad = q_rel.frame.inverse().adjoint();
                    let g6 = g_q.fixed_view::<1, 6>(0, 0) * ad;
                    add(3, to_dyn(&g6));
                }
            }
            FactorModel::PlaneObservation { measured } => {
                let pi_rel = self.plane(vals, 0);
                if self.observer_anchored() {
                    let dr = pi_rel.local_jacobian(measured);
                    add(0, to_dyn(&(dr * pi_rel.retraction_jacobian())));
                } else {
                    let cam = self.pose(vals, 2).unwrap();
                    let (pw, dpl, dan) = lift_plane(pi_rel, self.pose(vals, 1));
                    let hct = cam.matrix().transpose();
                    let pc = Plane::from_coeffs(hct * pw.coeffs()).expect("rigid image of a valid plane");
                    let dr = pc.local_jacobian(measured);
                    let dr_w = dr * hct;
                    add(0, to_dyn(&(dr_w * dpl)));
                    if let Some(d) = dan {
                        add(1, to_dyn(&(dr_w * d)));
                    }
                    let mut dcam = Matrix4x6::zeros();
                    for k in 0..6 {
                        dcam.set_column(k, &(generator(k).transpose() * pc.coeffs()));
                    }
                    add(2, to_dyn(&(dr * dcam)));
                }
            }
            FactorModel::Between { measured } => {
                let (ti, tj) = (self.pose(vals, 0).unwrap(), self.pose(vals, 1).unwrap());
                let e = between(ti, tj, measured);
                add(1, to_dyn(&se3_right_jacobian_inv(&e)));
                add(0, to_dyn(&(-(se3_left_jacobian_inv(&e) * measured.inverse().adjoint()))));
            }
            FactorModel::QuadricObservation { .. } | FactorModel::ShapePrior { .. } => {
                unreachable!("differentiated numerically")
            }
        }
        jac
    }
}

fn frame_arg(frame: Frame) -> (Option<VariableId>, VariableKind) {
    match frame {
        Frame::World => (None, VariableKind::Pose),
        Frame::Keyframe(id) => (Some(id), VariableKind::Pose),
    }
}

fn plane_pair(a: (VariableId, Frame), b: (VariableId, Frame)) -> [(Option<VariableId>, VariableKind); 4] {
    [(Some(a.0), VariableKind::Plane), frame_arg(a.1), (Some(b.0), VariableKind::Plane), frame_arg(b.1)]
}

fn to_dyn<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// World plane from a plane in an anchor frame, with the derivatives of its
/// coefficients with respect to the plane and the anchor tangents.
fn lift_plane(pi: &Plane, anchor: Option<&Pose>) -> (Plane, Matrix4x3<f64>, Option<Matrix4x6<f64>>) {
    let dpl = pi.retraction_jacobian();
    match anchor {
        None => (*pi, dpl, None),
        Some(a) => {
            let pm = a.plane_matrix();
            let pw = pi.transform(a);
            // (H exp(ε))⁻ᵀ π = H⁻ᵀ (I − εᵀ) π to first order
            let mut dan = Matrix4x6::zeros();
            for k in 0..6 {
                dan.set_column(k, &(-(pm * generator(k).transpose() * pi.coeffs())));
            }
            (pw, pm * dpl, Some(dan))
        }
    }
}

fn lift_quadric(q: &DualQuadric, anchor: Option<&Pose>) -> DualQuadric {
    match anchor {
        None => *q,
        Some(a) => q.transformed(a),
    }
}

// ∂(u, v)/∂x_c of the pinhole projection.
fn projection_jacobian(cam: &Camera, xc: &Vector3<f64>) -> SMatrix<f64, 2, 3> {
    let iz = 1.0 / xc.z;
    SMatrix::<f64, 2, 3>::new(cam.fx * iz, 0.0, -cam.fx * xc.x * iz * iz, 0.0, cam.fy * iz, -cam.fy * xc.y * iz * iz)
}

// Gradient of πᵀQπ/‖Q‖_F with respect to the raw plane coefficients and the
// quadric tangent (right frame perturbation, then log semi-axes).
fn tangency_gradient(pi: &Vector4<f64>, q: &DualQuadric) -> (RowVector4<f64>, SMatrix<f64, 1, 9>) {
    let qm = q.dual_matrix();
    let f = qm.norm();
    let r = (pi.transpose() * qm * pi)[0] / f;
    let g_pi = (qm * pi).transpose() * (2.0 / f);
    let m = pi * pi.transpose() / f - qm * (r / (f * f));
    let h = q.frame.matrix();
    let c = q.canonical_matrix();
    let mut g_q = SMatrix::<f64, 1, 9>::zeros();
    for k in 0..6 {
        let g = generator(k);
        let dq = h * (g * c + c * g.transpose()) * h.transpose();
        g_q[k] = m.dot(&dq);
    }
    let a = q.semi_axes();
    for k in 0..3 {
        let mut d = Matrix4::zeros();
        d[(k, k)] = 2.0 * a[k] * a[k];
        g_q[6 + k] = m.dot(&(h * d * h.transpose()));
    }
    (g_pi, g_q)
}

/// Pixel residual `π(K · (world-to-camera) · x) − z`.
pub fn point_reprojection(
    x: &Vector3<f64>,
    camera_pose: &Pose,
    cam: &Camera,
    z: &Vector2<f64>,
) -> Result<Vector2<f64>> {
    let xc = camera_pose.inverse_transform_point(x);
    cam.project(&xc).map(|p| p - z).ok_or(Error::BehindCamera)
}

/// Signed distance `a·x + b·y + c·z + d`.
pub fn point_plane(x: &Vector3<f64>, pi: &Plane) -> f64 {
    pi.signed_distance(x)
}

/// `|n₁ᵀn₂| − 1`
pub fn plane_parallel(a: &Plane, b: &Plane) -> f64 {
    a.normal().dot(&b.normal()).abs() - 1.0
}

/// `n₁ᵀn₂`
pub fn plane_perpendicular(a: &Plane, b: &Plane) -> f64 {
    a.normal().dot(&b.normal())
}

/// `πᵀ (Q*/‖Q*‖_F) π`
pub fn tangency(pi: &Plane, q: &DualQuadric) -> f64 {
    let qm = q.dual_matrix();
    (pi.coeffs().transpose() * qm * pi.coeffs())[0] / qm.norm()
}

/// Chart difference between the reference-frame plane carried into the camera
/// and the measured camera-frame plane.
pub fn plane_observation(pi_r: &Plane, t_wr: &Pose, t_wc: &Pose, measured: &Plane) -> Vector3<f64> {
    pi_r.transform(&relative_pose(t_wr, t_wc)).local(measured)
}

/// `1 − IoU(B*, B_obs)`, where `B*` is the image-clipped box of the projected
/// quadric. A predicted box entirely outside the image gives 1.
pub fn quadric_observation(q_r: &DualQuadric, t_wr: &Pose, t_wc: &Pose, cam: &Camera, measured: &BBox) -> Result<f64> {
    bbox_residual(&q_r.transformed(&relative_pose(t_wr, t_wc)), cam, measured)
}

fn bbox_residual(q_cam: &DualQuadric, cam: &Camera, measured: &BBox) -> Result<f64> {
    let conic = project_quadric(q_cam, cam, &Pose::identity())?;
    let predicted = conic_to_bbox(&conic)?;
    Ok(match predicted.clipped(cam.width, cam.height) {
        Some(b) => 1.0 - b.iou(measured),
        None => 1.0,
    })
}

/// Predicted image box of a quadric seen from `camera_pose`, clipped to the image.
pub fn predicted_bbox(q: &DualQuadric, cam: &Camera, camera_pose: &Pose) -> Result<Option<BBox>> {
    let conic = project_quadric(q, cam, camera_pose)?;
    Ok(conic_to_bbox(&conic)?.clipped(cam.width, cam.height))
}

/// `1 − IoU(cuboid(Q), model)` for a normalized model cuboid expressed in the
/// quadric's own frame. Both boxes are compared with their extents sorted, as
/// registration pairs axes by length; this keeps the residual independent of
/// which frame axis labels which ellipsoid axis.
pub fn shape_prior(q: &DualQuadric, model: &Cuboid) -> f64 {
    let sorted = |c: Cuboid| {
        let mut h = [c.half_extents.x, c.half_extents.y, c.half_extents.z];
        h.sort_by(|a, b| b.total_cmp(a));
        Cuboid { center: Vector3::zeros(), rotation: nalgebra::Matrix3::identity(), half_extents: Vector3::from(h) }
    };
    1.0 - cuboid_iou(&sorted(quadric_cuboid(q)), &sorted(model.normalized()))
}

/// Plane-observation noise from physical uncertainties: `tilt` (radians,
/// per tangent direction of the normal) and `offset` (meters), mapped into the
/// residual chart at `measured` by central differences.
pub fn plane_measurement_noise(measured: &Plane, tilt: f64, offset: f64) -> Result<NoiseModel> {
    if !(tilt.is_finite() && tilt > 0.0 && offset.is_finite() && offset > 0.0) {
        return Err(invalid("plane noise sigmas must be positive"));
    }
    let n = measured.normal();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    let h = 1e-6;
    let perturbed = |k: usize, e: f64| -> Result<Plane> {
        match k {
            0 | 1 => {
                let axis = if k == 0 { u } else { v };
                let n2 = so3::exp(&(axis * e)) * n;
                Plane::new(n2.x, n2.y, n2.z, measured.offset())
            }
            _ => Plane::new(n.x, n.y, n.z, measured.offset() + e),
        }
    };
    let mut j = nalgebra::Matrix3::zeros();
    for k in 0..3 {
        let col = (measured.local(&perturbed(k, h)?) - measured.local(&perturbed(k, -h)?)) / (2.0 * h);
        j.set_column(k, &col);
    }
    let sigma = nalgebra::Matrix3::from_diagonal(&Vector3::new(tilt * tilt, tilt * tilt, offset * offset));
    let cov = j * sigma * j.transpose();
    let cov = (cov + cov.transpose()) * 0.5;
    NoiseModel::covariance(&DMatrix::from_column_slice(3, 3, cov.as_slice()))
}

/// `log(Z⁻¹ · T_i⁻¹ · T_j)`
pub fn between(ti: &Pose, tj: &Pose, measured: &Pose) -> Vector6<f64> {
    measured.inverse().compose(&ti.between(tj)).log()
}

/// Central-difference Jacobians in each variable's tangent space.
///
/// Fails with an evaluation error when the residual is undefined or inactive
/// at the base point or at any perturbed point.
pub fn numeric_jacobian(factor: &Factor, vals: &[&Variable]) -> Result<Vec<DMatrix<f64>>> {
    let inactive = || Error::Evaluation(format!("{} is inactive near the linearization point", factor.model.name()));
    let base = factor.evaluate(vals)?.ok_or_else(inactive)?;
    let mut out = Vec::with_capacity(vals.len());
    for (i, v) in vals.iter().enumerate() {
        let dim = v.dim();
        let mut j = DMatrix::zeros(base.len(), dim);
        for k in 0..dim {
            let mut delta = vec![0.0; dim];
            let mut eval = |h: f64| -> Result<DVector<f64>> {
                delta[k] = h;
                let moved = v.retract(&delta)?;
                let mut perturbed: Vec<&Variable> = vals.to_vec();
                perturbed[i] = &moved;
                factor.evaluate(&perturbed)?.ok_or_else(inactive)
            };
            let plus = eval(NUMERIC_STEP)?;
            let minus = eval(-NUMERIC_STEP)?;
            j.set_column(k, &((plus - minus) / (2.0 * NUMERIC_STEP)));
        }
        out.push(j);
    }
    Ok(out)
}
