//! Synthetic desk-scale scenes and observations with ground truth.

pub mod dataset;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{predicted_bbox, tangency};
use crate::geometry::{BBox, Camera, DualQuadric, Plane, Pose};
pub use dataset::{Dataset, Frame, GtMap, GtPlane, GtQuadric, Keyframe, ObjectObs, PlaneObs, PointObs};

/// Most planes a scene can hold (floor, table, four walls).
pub const MAX_PLANES: usize = 6;
/// A plane is detected when at least this many of its points are visible.
pub const MIN_PLANE_INLIERS: usize = 6;
/// Clipped boxes smaller than this (px²) are not reported.
pub const MIN_BOX_AREA: f64 = 100.0;
const MIN_DEPTH: f64 = 0.1;
const ROOM_HALF: f64 = 2.5;
const ROOM_HEIGHT: f64 = 2.5;
const TABLE_HEIGHT: f64 = 0.75;
const NUM_CLASSES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Arc around the table, looking at its center.
    Orbit,
    /// Straight line past the table, looking sideways.
    Corridor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Orbit radius (m).
    pub radius: f64,
    /// Corridor length (m).
    pub length: f64,
    /// Camera height (m).
    pub height: f64,
    /// Orbit arc (degrees).
    pub arc_deg: f64,
    pub n_keyframes: usize,
    /// Per-keyframe random perturbation of position (m) and orientation (rad).
    pub jitter_trans: f64,
    pub jitter_rot: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::Orbit,
            radius: 2.0,
            length: 3.0,
            height: 1.4,
            arc_deg: 130.0,
            n_keyframes: 20,
            jitter_trans: 0.03,
            jitter_rot: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    pub bbox_sigma: f64,
    pub plane_angle_sigma: f64,
    pub plane_dist_sigma: f64,
    pub odom_rot_sigma: f64,
    pub odom_trans_sigma: f64,
    /// Standard deviation of the per-step log-scale random walk.
    pub scale_drift_sigma: f64,
    /// Mean of the per-step log-scale increment.
    pub scale_drift_bias: f64,
    /// Relative noise on object point clouds.
    pub cloud_sigma: f64,
    pub detection_dropout: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            bbox_sigma: 2.0,
            plane_angle_sigma: 0.01,
            plane_dist_sigma: 0.02,
            odom_rot_sigma: 0.01,
            odom_trans_sigma: 0.01,
            scale_drift_sigma: 0.002,
            scale_drift_bias: 0.0,
            cloud_sigma: 0.0,
            detection_dropout: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            bbox_sigma: 0.0,
            plane_angle_sigma: 0.0,
            plane_dist_sigma: 0.0,
            odom_rot_sigma: 0.0,
            odom_trans_sigma: 0.0,
            scale_drift_sigma: 0.0,
            scale_drift_bias: 0.0,
            cloud_sigma: 0.0,
            detection_dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_points: usize,
    pub n_planes: usize,
    pub n_quadrics: usize,
    /// Points placed on each object's surface, taken from the free-space share.
    pub object_points: usize,
    pub manhattan: bool,
    /// Write a canonical point cloud per object.
    pub clouds: bool,
    pub score_min: f64,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseSpec,
    pub camera: Camera,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_points: 200,
            n_planes: 4,
            n_quadrics: 3,
            object_points: 12,
            manhattan: true,
            clouds: true,
            score_min: 0.85,
            trajectory: TrajectorySpec::default(),
            noise: NoiseSpec::default(),
            camera: Camera::default(),
        }
    }
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n_planes > MAX_PLANES {
            return bad("at most 6 planes are supported");
        }
        if self.n_quadrics > 0 && self.n_planes == 0 {
            return bad("objects need a supporting plane");
        }
        if self.n_quadrics > 6 {
            return bad("at most 6 objects fit on the support plane");
        }
        let n = &self.noise;
        let sigmas = [
            n.pixel_sigma,
            n.bbox_sigma,
            n.plane_angle_sigma,
            n.plane_dist_sigma,
            n.odom_rot_sigma,
            n.odom_trans_sigma,
            n.scale_drift_sigma,
            n.cloud_sigma,
        ];
        if !sigmas.iter().all(|s| s.is_finite() && *s >= 0.0) || !n.scale_drift_bias.is_finite() {
            return bad("noise sigmas must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&n.detection_dropout) {
            return bad("detection_dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.score_min) {
            return bad("score_min must lie in [0, 1]");
        }
        let t = &self.trajectory;
        if t.n_keyframes < 2 {
            return bad("need at least two keyframes");
        }
        if !(t.radius > 0.0 && t.radius < ROOM_HALF && t.length > 0.0 && t.length < 2.0 * ROOM_HALF) {
            return bad("trajectory must stay inside the room");
        }
        if !(t.height > 0.0 && t.height < ROOM_HEIGHT && t.jitter_trans >= 0.0 && t.jitter_rot >= 0.0) {
            return bad("invalid trajectory height or jitter");
        }
        self.camera.validate().map_err(|e| Error::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Parallel,
    Perpendicular,
}

/// Scene ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<Pose>,
    pub points: BTreeMap<u64, Vector3<f64>>,
    pub planes: Vec<GtPlane>,
    pub quadrics: Vec<GtQuadric>,
    /// (quadric id, plane id) tangency pairs.
    pub supports: Vec<(u64, u64)>,
    pub plane_relations: Vec<(u64, u64, Relation)>,
    /// Canonical object clouds keyed by quadric id.
    pub clouds: BTreeMap<u64, Vec<Vector3<f64>>>,
    /// Tracks of the points lying on each plane.
    pub plane_points: BTreeMap<u64, BTreeSet<u64>>,
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("non-negative sigma")
}

fn random_rotation_vector(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let n = normal(sigma);
    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Normal, patch center and the two patch half-axes.
type PlaneSlot = (Vector3<f64>, Vector3<f64>, Vector3<f64>, Vector3<f64>);

fn plane_layout() -> [PlaneSlot; MAX_PLANES] {
    let (h, z) = (ROOM_HALF, ROOM_HEIGHT / 2.0);
    [
        // normal, center, half_u, half_v
        (Vector3::z(), Vector3::zeros(), Vector3::new(h, 0.0, 0.0), Vector3::new(0.0, h, 0.0)),
        (Vector3::z(), Vector3::new(0.0, 0.0, TABLE_HEIGHT), Vector3::new(0.6, 0.0, 0.0), Vector3::new(0.0, 0.4, 0.0)),
        (Vector3::x(), Vector3::new(-h, 0.0, z), Vector3::new(0.0, h, 0.0), Vector3::new(0.0, 0.0, z)),
        (-Vector3::y(), Vector3::new(0.0, h, z), Vector3::new(h, 0.0, 0.0), Vector3::new(0.0, 0.0, z)),
        (-Vector3::x(), Vector3::new(h, 0.0, z), Vector3::new(0.0, h, 0.0), Vector3::new(0.0, 0.0, z)),
        (Vector3::y(), Vector3::new(0.0, -h, z), Vector3::new(h, 0.0, 0.0), Vector3::new(0.0, 0.0, z)),
    ]
}

fn trajectory(spec: &TrajectorySpec, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>> {
    let n = spec.n_keyframes;
    let target = Vector3::new(0.0, 0.0, TABLE_HEIGHT);
    let mut poses = Vec::with_capacity(n);
    for k in 0..n {
        let s = k as f64 / (n - 1) as f64;
        let (eye, look) = match spec.kind {
            TrajectoryKind::Orbit => {
                let arc = spec.arc_deg.to_radians();
                let theta = -110f64.to_radians() + s * arc;
                let eye = Vector3::new(spec.radius * theta.cos(), spec.radius * theta.sin(), spec.height);
                (eye, target)
            }
            TrajectoryKind::Corridor => {
                let x = (s - 0.5) * spec.length;
                let eye = Vector3::new(x, -1.8, spec.height);
                (eye, Vector3::new(0.4 * x, 0.0, TABLE_HEIGHT))
            }
        };
        let eye = eye + random_rotation_vector(rng, spec.jitter_trans);
        let base = Pose::look_at(eye, look, Vector3::z())?;
        let jitter = Pose::from_rotation_vector(random_rotation_vector(rng, spec.jitter_rot), Vector3::zeros());
        poses.push(base.compose(&jitter));
    }
    Ok(poses)
}

fn sample_on_patch(p: &GtPlane, rng: &mut ChaCha8Rng, margin: f64) -> Vector3<f64> {
    let a = rng.random_range(-1.0 + margin..1.0 - margin);
    let b = rng.random_range(-1.0 + margin..1.0 - margin);
    p.center + a * p.half_u + b * p.half_v
}

/// Builds the scene: planes (axis-aligned when `manhattan`), objects resting
/// tangent on the table (or the floor), and points on planes (70%) and in
/// free space (30%), some of which lie on the objects.
pub fn generate_scene(spec: &SceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let poses = trajectory(&spec.trajectory, &mut rng)?;

    let mut planes = Vec::with_capacity(spec.n_planes);
    for (i, (n, center, hu, hv)) in plane_layout().into_iter().take(spec.n_planes).enumerate() {
        let (n, hu, hv) = if spec.manhattan || i == 0 {
            (n, hu, hv)
        } else {
            // tilt about a random axis in the plane by up to 20 degrees
            let axis = Unit::new_normalize(
                hu.normalize() * rng.random_range(-1.0..1.0) + hv.normalize() * rng.random_range(-1.0..1.0),
            );
            let r = Rotation3::from_axis_angle(
                &axis,
                rng.random_range(5f64..20.0).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            );
            (r * n, r * hu, r * hv)
        };
        planes.push(GtPlane {
            id: i as u64,
            plane: Plane::from_normal_and_point(n, center)?,
            center,
            half_u: hu,
            half_v: hv,
        });
    }

    let mut plane_relations = Vec::new();
    for i in 0..planes.len() {
        for j in i + 1..planes.len() {
            let c = planes[i].plane.normal().dot(&planes[j].plane.normal()).abs();
            if (c - 1.0).abs() < 1e-12 {
                plane_relations.push((i as u64, j as u64, Relation::Parallel));
            } else if c < 1e-12 {
                plane_relations.push((i as u64, j as u64, Relation::Perpendicular));
            }
        }
    }

    // objects on the table when there is one, otherwise on the floor
    let mut quadrics: Vec<GtQuadric> = Vec::new();
    let mut supports = Vec::new();
    if spec.n_quadrics > 0 {
        let support = if planes.len() > 1 { &planes[1] } else { &planes[0] };
        let n = support.plane.normal();
        let mut attempts = 0;
        while quadrics.len() < spec.n_quadrics {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::InvalidSpec("cannot place objects without overlap".into()));
            }
            let axes =
                Vector3::new(rng.random_range(0.06..0.14), rng.random_range(0.05..0.12), rng.random_range(0.08..0.18));
            let yaw = rng.random_range(-PI..PI);
            let orient = Rotation3::from_axis_angle(&Unit::new_normalize(n), yaw)
                * Rotation3::rotation_between(&Vector3::z(), &n).unwrap_or_else(Rotation3::identity);
            let foot = sample_on_patch(support, &mut rng, 0.3);
            let mut q = DualQuadric::new(Pose::new(*orient.matrix(), foot)?, axes)?;
            let lift = q.support_radius(&n);
            q = DualQuadric::new(Pose::new(*orient.matrix(), foot + n * lift)?, axes)?;
            let reach = axes.max();
            if quadrics
                .iter()
                .any(|o| (o.quadric.center() - q.center()).norm() < reach + o.quadric.semi_axes().max() + 0.05)
            {
                continue;
            }
            let id = quadrics.len() as u64;
            supports.push((id, support.id));
            quadrics.push(GtQuadric {
                id,
                quadric: q,
                class_id: id as u32 % NUM_CLASSES,
                support_plane: Some(support.id),
            });
        }
    }

    let mut points = BTreeMap::new();
    let mut plane_points: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    let n_on_planes = if planes.is_empty() { 0 } else { (spec.n_points * 7) / 10 };
    let mut track = 0u64;
    for k in 0..n_on_planes {
        let p = &planes[k % planes.len()];
        points.insert(track, sample_on_patch(p, &mut rng, 0.02));
        plane_points.entry(p.id).or_default().insert(track);
        track += 1;
    }
    let n_free = spec.n_points - n_on_planes;
    let n_obj = if quadrics.is_empty() { 0 } else { (spec.object_points * quadrics.len()).min(n_free) };
    for k in 0..n_obj {
        let q = &quadrics[k % quadrics.len()].quadric;
        let x = q.surface_point(rng.random_range(-PI..PI), rng.random_range(-1.2..1.2));
        points.insert(track, x);
        track += 1;
    }
    for _ in 0..n_free - n_obj {
        let x = Vector3::new(
            rng.random_range(-ROOM_HALF + 0.2..ROOM_HALF - 0.2),
            rng.random_range(-ROOM_HALF + 0.2..ROOM_HALF - 0.2),
            rng.random_range(0.1..ROOM_HEIGHT - 0.2),
        );
        points.insert(track, x);
        track += 1;
    }

    let mut clouds = BTreeMap::new();
    if spec.clouds {
        for q in &quadrics {
            clouds.insert(q.id, object_cloud(&q.quadric, spec.noise.cloud_sigma, &mut rng));
        }
    }
    Ok(GroundTruth { poses, points, planes, quadrics, supports, plane_relations, clouds, plane_points })
}

/// Surface samples of the object in an arbitrary canonical frame: unknown
/// rotation and a scale normalizing the largest axis to one.
fn object_cloud(q: &DualQuadric, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let a = q.semi_axes();
    let scale = 1.0 / a.max();
    let rot = Rotation3::new(Vector3::from_fn(|_, _| rng.random_range(-PI..PI)));
    let noise = normal(sigma);
    let mut pts: Vec<Vector3<f64>> = Vec::new();
    for k in 0..3 {
        for s in [-1.0, 1.0] {
            let mut e = Vector3::zeros();
            e[k] = s * a[k];
            pts.push(e);
        }
    }
    for _ in 0..200 {
        let d: [f64; 3] = UnitSphere.sample(rng);
        pts.push(Vector3::new(d[0] * a.x, d[1] * a.y, d[2] * a.z));
    }
    pts.into_iter().map(|p| rot * (p * scale) + Vector3::from_fn(|_, _| noise.sample(rng))).collect()
}

/// Cloud file name of an object.
pub fn cloud_file_name(quadric_id: u64) -> String {
    format!("{}/object_{quadric_id}.xyz", dataset::CLOUD_DIR)
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noisy camera-frame observation of a world plane: the normal is rotated by
/// a random small angle and the offset perturbed. Oriented so the camera is on
/// the positive side.
fn observe_plane(world: &Plane, camera_pose: &Pose, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> Result<Plane> {
    let pc = world.transform(&camera_pose.inverse());
    let pc = if pc.offset() < 0.0 { pc.negated() } else { pc };
    let n = pc.normal();
    let w = random_rotation_vector(rng, noise.plane_angle_sigma);
    // only the component orthogonal to the normal tilts it
    let w = w - n * n.dot(&w);
    let n2 = Rotation3::new(w) * n;
    let d2 = pc.offset() + normal(noise.plane_dist_sigma).sample(rng);
    Plane::new(n2.x, n2.y, n2.z, d2)
}

fn noisy_box(b: &BBox, sigma: f64, score: f64, class_id: u32, cam: &Camera, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let n = normal(sigma);
    let mut c = [b.x_min + n.sample(rng), b.y_min + n.sample(rng), b.x_max + n.sample(rng), b.y_max + n.sample(rng)];
    c[0] = c[0].clamp(0.0, cam.width);
    c[2] = c[2].clamp(0.0, cam.width);
    c[1] = c[1].clamp(0.0, cam.height);
    c[3] = c[3].clamp(0.0, cam.height);
    if c[2] - c[0] < 1.0 || c[3] - c[1] < 1.0 {
        return None;
    }
    BBox::with_meta(c[0], c[1], c[2], c[3], score, class_id).ok()
}

/// Renders the observations of every keyframe. Each keyframe draws from its
/// own random stream and the odometry from another, so results depend only on
/// (spec, ground truth).
pub fn generate_observations(gt: &GroundTruth, spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let cam = spec.camera;
    let noise = &spec.noise;
    let px = normal(noise.pixel_sigma);

    // odometry with a multiplicative scale random walk on translations
    let mut odom_rng = frame_rng(spec.seed, u64::MAX);
    let mut log_scale = 0.0;
    let drift = Normal::new(noise.scale_drift_bias, noise.scale_drift_sigma).expect("valid drift");
    let mut odoms = vec![Pose::identity()];
    for k in 1..gt.poses.len() {
        log_scale += drift.sample(&mut odom_rng);
        let rel = gt.poses[k - 1].between(&gt.poses[k]);
        let t = rel.translation() * log_scale.exp() + random_rotation_vector(&mut odom_rng, noise.odom_trans_sigma);
        let r = rel.rotation() * Rotation3::new(random_rotation_vector(&mut odom_rng, noise.odom_rot_sigma)).matrix();
        odoms.push(Pose::new(r, t)?);
    }

    let mut frames = Vec::with_capacity(gt.poses.len());
    for (k, pose) in gt.poses.iter().enumerate() {
        let mut rng = frame_rng(spec.seed, k as u64);
        let mut points = Vec::new();
        let mut visible = BTreeSet::new();
        for (&track, x) in &gt.points {
            let xc = pose.inverse_transform_point(x);
            if xc.z <= MIN_DEPTH {
                continue;
            }
            let Some(uv) = cam.project(&xc) else { continue };
            if !cam.in_image(&uv) {
                continue;
            }
            let z = uv + Vector2::new(px.sample(&mut rng), px.sample(&mut rng));
            if !cam.in_image(&z) {
                continue;
            }
            visible.insert(track);
            points.push(PointObs { track, u: z.x, v: z.y });
        }

        let mut planes = Vec::new();
        for p in &gt.planes {
            let inliers: BTreeSet<u64> =
                gt.plane_points.get(&p.id).map(|s| s.intersection(&visible).copied().collect()).unwrap_or_default();
            let plane = observe_plane(&p.plane, pose, noise, &mut rng)?;
            let dropped = rng.random_bool(noise.detection_dropout);
            if inliers.len() < MIN_PLANE_INLIERS || dropped {
                continue;
            }
            planes.push(PlaneObs { plane, inlier_tracks: inliers, gt_id: Some(p.id) });
        }

        let mut objects = Vec::new();
        for q in &gt.quadrics {
            let score = rng.random_range(spec.score_min..=1.0);
            let dropped = rng.random_bool(noise.detection_dropout);
            let depth = pose.inverse_transform_point(&q.quadric.center()).z;
            if depth <= MIN_DEPTH || dropped {
                continue;
            }
            let Ok(Some(exact)) = predicted_bbox(&q.quadric, &cam, pose) else { continue };
            let Some(b) = noisy_box(&exact, noise.bbox_sigma, score, q.class_id, &cam, &mut rng) else { continue };
            if b.area() < MIN_BOX_AREA {
                continue;
            }
            let b = if noise.bbox_sigma == 0.0 { BBox { score, class_id: q.class_id, ..exact } } else { b };
            let tracks = points.iter().filter(|p| b.contains(p.u, p.v)).map(|p| p.track).collect();
            let cloud_file = gt.clouds.contains_key(&q.id).then(|| cloud_file_name(q.id));
            objects.push(ObjectObs { bbox: b, tracks, cloud_file, gt_id: Some(q.id) });
        }

        frames.push(Frame {
            keyframe: Keyframe { id: k as u64, odom: odoms[k], gt_pose: Some(*pose) },
            points,
            planes,
            objects,
        });
    }

    let clouds = gt.clouds.iter().map(|(id, c)| (cloud_file_name(*id), c.clone())).collect();
    Ok(Dataset {
        seed: Some(spec.seed),
        camera: cam,
        frames,
        gt: GtMap { points: gt.points.clone(), planes: gt.planes.clone(), quadrics: gt.quadrics.clone() },
        clouds,
    })
}

/// Scene and observations in one call.
pub fn simulate(spec: &SceneSpec) -> Result<(GroundTruth, Dataset)> {
    let gt = generate_scene(spec)?;
    let ds = generate_observations(&gt, spec)?;
    Ok((gt, ds))
}

/// Largest tangency residual over the support pairs.
pub fn max_support_residual(gt: &GroundTruth) -> f64 {
    gt.supports
        .iter()
        .map(|&(q, p)| tangency(&gt.planes[p as usize].plane, &gt.quadrics[q as usize].quadric).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests;
