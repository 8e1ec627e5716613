//! End-to-end back-end run: frame loop, association, landmark creation and
//! periodic batch optimization.

mod export;
mod solution;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_PI_6;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::assoc::{
    associate_points_to_plane, init_quadric, keypoint_overlap, match_objects, match_planes, parallax, quadric_in_front,
    triangulate_point, AssocConfig, Decision, MapPlane, PlaneDetection,
};
use crate::error::{invalid, Error, Result};
use crate::factors::{plane_measurement_noise, predicted_bbox, Factor, Frame, Huber, NoiseModel};
use crate::geometry::{register_pointcloud, BBox, Cuboid, DualQuadric, Plane, Pose};
use crate::graph::{Graph, OptimizationReport, OptimizerConfig, Termination, Variable, VariableId, VariableKind};
use crate::sim::Dataset;

pub use export::{map_mesh_ply, map_records};
pub use solution::{Solution, SolvedPlane, SolvedQuadric, SOLUTION_FILE};

/// Landmark and constraint mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Points only.
    #[serde(rename = "P")]
    P,
    /// Points and planes with point-plane constraints.
    #[serde(rename = "PP")]
    PP,
    /// PP plus Manhattan constraints.
    #[serde(rename = "PP+M")]
    PPM,
    /// Points and objects.
    #[serde(rename = "PO")]
    PO,
    /// Everything, with support and shape constraints.
    #[serde(rename = "PPO+MS")]
    PPOMS,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::P, Mode::PP, Mode::PPM, Mode::PO, Mode::PPOMS];

    pub fn uses_planes(self) -> bool {
        matches!(self, Mode::PP | Mode::PPM | Mode::PPOMS)
    }

    pub fn uses_manhattan(self) -> bool {
        matches!(self, Mode::PPM | Mode::PPOMS)
    }

    pub fn uses_objects(self) -> bool {
        matches!(self, Mode::PO | Mode::PPOMS)
    }

    pub fn uses_supports(self) -> bool {
        self == Mode::PPOMS
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::P => "P",
            Mode::PP => "PP",
            Mode::PPM => "PP+M",
            Mode::PO => "PO",
            Mode::PPOMS => "PPO+MS",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown mode {s:?}; expected one of P, PP, PP+M, PO, PPO+MS")))
    }
}

/// Factor noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorNoise {
    pub pixel_sigma: f64,
    /// Huber width in whitened units, applied to reprojection and overlap factors.
    pub huber_width: f64,
    pub odom_rot_sigma: f64,
    pub odom_trans_sigma: f64,
    pub point_plane_sigma: f64,
    pub parallel_sigma: f64,
    pub perpendicular_sigma: f64,
    pub tangency_sigma: f64,
    /// Plane observations: tilt of the measured normal (radians) and error of
    /// the measured offset (meters).
    pub plane_tilt_sigma: f64,
    pub plane_offset_sigma: f64,
    pub shape_sigma: f64,
    /// Overlap factors use sigma `iou_sigma / sqrt(score)`.
    pub iou_sigma: f64,
}

impl Default for FactorNoise {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            huber_width: 1.5,
            odom_rot_sigma: 0.01,
            odom_trans_sigma: 0.01,
            point_plane_sigma: 0.02,
            parallel_sigma: 0.01,
            perpendicular_sigma: 0.01,
            tangency_sigma: 0.05,
            plane_tilt_sigma: 0.01,
            plane_offset_sigma: 0.05,
            shape_sigma: 0.1,
            iou_sigma: 0.1,
        }
    }
}

impl FactorNoise {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.pixel_sigma,
            self.huber_width,
            self.odom_rot_sigma,
            self.odom_trans_sigma,
            self.point_plane_sigma,
            self.parallel_sigma,
            self.perpendicular_sigma,
            self.tangency_sigma,
            self.plane_tilt_sigma,
            self.plane_offset_sigma,
            self.shape_sigma,
            self.iou_sigma,
        ];
        if all.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(invalid("noise sigmas and the Huber width must be positive"))
        }
    }
}

/// Pipeline settings; every field has a default and TOML files may override
/// any subset with dotted keys (`assoc.th_high = 12`, `noise.pixel_sigma = 2`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Batch optimization after every this many keyframes and at the end.
    pub batch_every: usize,
    /// Minimum ray angle (degrees) before a point track is triangulated.
    pub min_parallax_deg: f64,
    /// Largest reprojection error (px) accepted at triangulation.
    pub max_init_reprojection: f64,
    /// Box observations needed before an object landmark is created.
    pub object_min_views: usize,
    /// Mean box IoU a new object landmark must reach over its views.
    pub object_min_iou: f64,
    /// Largest gap (m) between an object's extent and a plane for a support
    /// relation.
    pub support_tol: f64,
    pub assoc: AssocConfig,
    pub optimizer: OptimizerConfig,
    pub noise: FactorNoise,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::PPOMS,
            batch_every: 5,
            min_parallax_deg: 1.0,
            max_init_reprojection: 10.0,
            object_min_views: 3,
            object_min_iou: 0.5,
            support_tol: 0.1,
            assoc: AssocConfig::default(),
            // box factors are piecewise smooth; tighter tolerances only crawl
            optimizer: OptimizerConfig { rel_tol: 1e-6, ..OptimizerConfig::default() },
            noise: FactorNoise::default(),
        }
    }
}

impl RunConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_every == 0 || self.object_min_views == 0 {
            return Err(invalid("batch_every and object_min_views must be positive"));
        }
        if !(self.min_parallax_deg >= 0.0 && self.max_init_reprojection > 0.0 && self.support_tol > 0.0)
            || !(0.0..=1.0).contains(&self.object_min_iou)
        {
            return Err(invalid("invalid initialization tolerances"));
        }
        self.assoc.validate()?;
        self.optimizer.validate()?;
        self.noise.validate()
    }
}

/// Summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: Option<u64>,
    pub n_keyframes: usize,
    pub n_points: usize,
    pub n_planes: usize,
    pub n_quadrics: usize,
    pub batches: usize,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    pub termination: Option<Termination>,
    /// Factors by kind.
    pub factor_counts: BTreeMap<String, usize>,
}

/// Result of [`run_pipeline`]: the solution is always present (best so far
/// when `failure` is set).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub solution: Solution,
    pub report: RunReport,
    pub failure: Option<Error>,
    pub graph: Graph,
    pub index: VariableIndex,
}

/// Graph variable behind each entry of a [`Solution`]. Planes and quadrics are
/// stored relative to their anchor keyframe (`anchor` is the keyframe index).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariableIndex {
    pub poses: Vec<VariableId>,
    pub points: BTreeMap<u64, VariableId>,
    /// `(variable, anchor)` in solution order.
    pub planes: Vec<(VariableId, usize)>,
    pub quadrics: Vec<(VariableId, usize)>,
}

struct PointTrack {
    var: Option<VariableId>,
    views: Vec<(usize, Vector2<f64>)>,
}

struct PlaneLandmark {
    var: VariableId,
    anchor: usize,
    tracks: BTreeSet<u64>,
    paired: BTreeSet<u64>,
}

struct QuadricLandmark {
    var: VariableId,
    anchor: usize,
    tracks: BTreeSet<u64>,
    class_id: u32,
    supported: bool,
    views: Vec<(usize, BBox)>,
}

struct PendingObject {
    tracks: BTreeSet<u64>,
    views: Vec<(usize, BBox)>,
    cloud_file: Option<String>,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    graph: Graph,
    poses: Vec<VariableId>,
    /// Odometry-only trajectory; drives mode-independent point decisions.
    dead_reckoned: Vec<Pose>,
    points: BTreeMap<u64, PointTrack>,
    planes: Vec<PlaneLandmark>,
    quadrics: Vec<QuadricLandmark>,
    pending: Vec<PendingObject>,
    relations: BTreeSet<(usize, usize)>,
    reports: Vec<OptimizationReport>,
}

fn kf(id: VariableId) -> Frame {
    Frame::Keyframe(id)
}

impl<'a> Runner<'a> {
    fn pose(&self, k: usize) -> Pose {
        *self.graph.get(self.poses[k]).and_then(Variable::as_pose).expect("pose variable")
    }

    fn plane_world(&self, p: &PlaneLandmark) -> Plane {
        let local = self.graph.get(p.var).and_then(Variable::as_plane).expect("plane variable");
        local.transform(&self.pose(p.anchor))
    }

    fn quadric_world(&self, q: &QuadricLandmark) -> DualQuadric {
        let local = self.graph.get(q.var).and_then(Variable::as_quadric).expect("quadric variable");
        local.transformed(&self.pose(q.anchor))
    }

    fn add(&mut self, f: Result<Factor>) -> Result<()> {
        self.graph.add_factor(f?)?;
        Ok(())
    }

    fn huber(&self) -> Huber {
        Huber { width: self.cfg.noise.huber_width }
    }

    fn add_pose(&mut self, k: usize) -> Result<()> {
        let odom = self.ds.frames[k].keyframe.odom;
        if k == 0 {
            let id = self.graph.add_variable(Variable::Pose(Pose::identity()))?;
            self.graph.fix(id)?;
            self.poses.push(id);
            self.dead_reckoned.push(Pose::identity());
            return Ok(());
        }
        let init = self.pose(k - 1).compose(&odom);
        let id = self.graph.add_variable(Variable::Pose(init))?;
        self.poses.push(id);
        self.dead_reckoned.push(self.dead_reckoned[k - 1].compose(&odom));
        let n = &self.cfg.noise;
        let (r, t) = (n.odom_rot_sigma, n.odom_trans_sigma);
        let noise = NoiseModel::diagonal(&[r, r, r, t, t, t])?;
        self.add(Factor::between(self.poses[k - 1], id, odom, noise))
    }

    fn reprojection(&mut self, k: usize, point: VariableId, px: Vector2<f64>) -> Result<()> {
        let noise = NoiseModel::isotropic(2, self.cfg.noise.pixel_sigma)?;
        let f = Factor::reprojection(self.poses[k], point, self.ds.camera, px, noise)?.with_robust(self.huber());
        self.add(Ok(f))
    }

    /// Creates the point once its views (judged on dead-reckoned poses) have
    /// enough parallax and reproject consistently.
    fn try_triangulate(&mut self, track: u64) -> Result<()> {
        let cam = self.ds.camera;
        let views = &self.points[&track].views;
        if views.len() < 2 {
            return Ok(());
        }
        let dr: Vec<(Pose, Vector2<f64>)> = views.iter().map(|(k, px)| (self.dead_reckoned[*k], *px)).collect();
        let Some(x_dr) = triangulate_point(&dr, &cam) else { return Ok(()) };
        let centers: Vec<Vector3<f64>> = dr.iter().map(|(p, _)| *p.translation()).collect();
        if parallax(&x_dr, &centers) < self.cfg.min_parallax_deg.to_radians() {
            return Ok(());
        }
        let consistent = dr.iter().all(|(p, px)| {
            cam.project(&p.inverse_transform_point(&x_dr))
                .is_some_and(|uv| (uv - px).norm() < self.cfg.max_init_reprojection)
        });
        if !consistent {
            return Ok(());
        }
        let est: Vec<(Pose, Vector2<f64>)> = views.iter().map(|(k, px)| (self.pose(*k), *px)).collect();
        let x = triangulate_point(&est, &cam).unwrap_or(x_dr);
        let views = views.clone();
        let id = self.graph.add_variable(Variable::Point(x))?;
        self.points.get_mut(&track).expect("track").var = Some(id);
        for (k, px) in views {
            self.reprojection(k, id, px)?;
        }
        Ok(())
    }

    fn process_points(&mut self, k: usize) -> Result<()> {
        let frame = &self.ds.frames[k];
        for obs in &frame.points {
            let px = Vector2::new(obs.u, obs.v);
            let entry = self.points.entry(obs.track).or_insert(PointTrack { var: None, views: Vec::new() });
            entry.views.push((k, px));
            match entry.var {
                Some(id) => self.reprojection(k, id, px)?,
                None => self.try_triangulate(obs.track)?,
            }
        }
        Ok(())
    }

    fn plane_observation(&mut self, plane: usize, k: usize, measured: Plane) -> Result<()> {
        let p = &self.planes[plane];
        let noise =
            plane_measurement_noise(&measured, self.cfg.noise.plane_tilt_sigma, self.cfg.noise.plane_offset_sigma)?;
        let f = Factor::plane_observation(p.var, kf(self.poses[p.anchor]), self.poses[k], measured, noise);
        self.add(f)
    }

    fn process_planes(&mut self, k: usize) -> Result<()> {
        let camera_pose = self.pose(k);
        for det in &self.ds.frames[k].planes {
            let map: Vec<MapPlane> = self
                .planes
                .iter()
                .enumerate()
                .map(|(i, p)| MapPlane { id: i as u64, plane: self.plane_world(p), tracks: p.tracks.clone() })
                .collect();
            let detection = PlaneDetection { plane: det.plane, inliers: det.inlier_tracks.clone() };
            match match_planes(&detection, &map, &camera_pose, &self.cfg.assoc) {
                Decision::Matched(i) => {
                    let i = i as usize;
                    self.planes[i].tracks.extend(det.inlier_tracks.iter().copied());
                    self.plane_observation(i, k, det.plane)?;
                }
                Decision::New => {
                    let var = self.graph.add_variable(Variable::Plane(det.plane))?;
                    self.planes.push(PlaneLandmark {
                        var,
                        anchor: k,
                        tracks: det.inlier_tracks.clone(),
                        paired: BTreeSet::new(),
                    });
                    self.plane_observation(self.planes.len() - 1, k, det.plane)?;
                }
                Decision::Ignored => {}
            }
        }
        Ok(())
    }

    fn quadric_observation(&mut self, q: usize, k: usize, bbox: BBox) -> Result<()> {
        let lm = &self.quadrics[q];
        let sigma = self.cfg.noise.iou_sigma / bbox.score.max(1e-6).sqrt();
        let noise = NoiseModel::isotropic(1, sigma)?;
        let f = Factor::quadric_observation(
            lm.var,
            kf(self.poses[lm.anchor]),
            self.poses[k],
            self.ds.camera,
            bbox,
            Some(noise),
        )?
        .with_robust(self.huber());
        self.add(Ok(f))
    }

    /// Median depth, in keyframe `k`, of the triangulated points among `tracks`.
    fn depth_hint(&self, k: usize, tracks: &BTreeSet<u64>) -> Option<f64> {
        let pose = self.pose(k);
        let mut depths: Vec<f64> = tracks
            .iter()
            .filter_map(|t| self.points.get(t)?.var)
            .filter_map(|id| self.graph.get(id)?.as_point().map(|x| pose.inverse_transform_point(x).z))
            .filter(|z| *z > 0.0)
            .collect();
        if depths.is_empty() {
            return None;
        }
        depths.sort_by(|a, b| a.total_cmp(b));
        Some(depths[depths.len() / 2])
    }

    /// Shape model for an object cloud: extents of the cloud registered onto
    /// `q`, measured along the quadric's own axes.
    fn shape_model(&self, cloud_file: &str, q: &DualQuadric) -> Option<Cuboid> {
        let cloud = self.ds.clouds.get(cloud_file)?;
        let reg = register_pointcloud(cloud, q).ok()?;
        let mut half: Vector3<f64> = Vector3::zeros();
        for x in &reg.cloud {
            half = half.sup(&q.frame.inverse_transform_point(x).abs());
        }
        Cuboid::axis_aligned(Vector3::zeros(), half).ok()
    }

    /// Per-view IoU between predicted and observed boxes (0 when the
    /// prediction is undefined).
    fn box_ious(&self, q: &DualQuadric, views: &[(usize, BBox)]) -> Vec<f64> {
        views
            .iter()
            .map(|(k, b)| match predicted_bbox(q, &self.ds.camera, &self.pose(*k)) {
                Ok(Some(p)) => p.iou(b),
                _ => 0.0,
            })
            .collect()
    }

    /// Sum of squared box residuals, counting undefined predictions as misses.
    fn box_fit_cost(&self, q: &DualQuadric, views: &[(usize, BBox)]) -> f64 {
        self.box_ious(q, views).iter().map(|iou| (1.0 - iou).powi(2)).sum()
    }

    /// Whether the quadric explains every view: all boxes overlap and the mean
    /// IoU reaches `object_min_iou`.
    fn fits_views(&self, q: &DualQuadric, views: &[(usize, BBox)]) -> bool {
        let ious = self.box_ious(q, views);
        let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
        ious.iter().all(|v| *v > 0.0) && mean >= self.cfg.object_min_iou
    }

    /// Fits a world-frame quadric to its box observations with the current
    /// poses held fixed.
    fn refine_quadric(&self, q: &DualQuadric, views: &[(usize, BBox)]) -> Result<DualQuadric> {
        let mut g = Graph::new();
        let qid = g.add_variable(Variable::Quadric(*q))?;
        for (k, b) in views {
            let pid = g.add_variable(Variable::Pose(self.pose(*k)))?;
            g.fix(pid)?;
            let sigma = self.cfg.noise.iou_sigma / b.score.max(1e-6).sqrt();
            let f = Factor::quadric_observation(
                qid,
                Frame::World,
                pid,
                self.ds.camera,
                *b,
                Some(NoiseModel::isotropic(1, sigma)?),
            )?
            .with_robust(self.huber());
            g.add_factor(f)?;
        }
        let cfg = OptimizerConfig { parallel_eval: false, ..self.cfg.optimizer.clone() };
        g.optimize(&cfg)?;
        Ok(*g.get(qid).and_then(Variable::as_quadric).expect("quadric variable"))
    }

    /// Refinement from several orientation hypotheses; the best box fit wins.
    fn refine_multistart(&self, q: &DualQuadric, views: &[(usize, BBox)]) -> Result<DualQuadric> {
        let mut best = (*q, self.box_fit_cost(q, views));
        let mut starts = vec![*q];
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            for angle in [FRAC_PI_6, 2.0 * FRAC_PI_6] {
                let r = Pose::from_rotation_vector(axis * angle, Vector3::zeros());
                let frame = Pose::new(*r.rotation(), *q.frame.translation())?;
                starts.push(DualQuadric::new(frame, q.semi_axes())?);
            }
        }
        for s in &starts {
            let r = self.refine_quadric(s, views)?;
            let cost = self.box_fit_cost(&r, views);
            if cost < best.1 {
                best = (r, cost);
            }
        }
        Ok(best.0)
    }

    fn refine_quadrics(&mut self) -> Result<()> {
        for i in 0..self.quadrics.len() {
            let lm = &self.quadrics[i];
            let current = self.quadric_world(lm);
            let refined = self.refine_quadric(&current, &lm.views)?;
            if self.box_fit_cost(&refined, &lm.views) < self.box_fit_cost(&current, &lm.views) {
                let local = refined.transformed(&self.pose(lm.anchor).inverse());
                self.graph.set(lm.var, Variable::Quadric(local))?;
            }
        }
        Ok(())
    }

    fn create_quadric(&mut self, pending: PendingObject) -> Result<bool> {
        let dets: Vec<(BBox, Pose)> = pending.views.iter().map(|(k, b)| (*b, self.pose(*k))).collect();
        let first = pending.views[0].0;
        let hint = self.depth_hint(first, &pending.tracks);
        let q_world = match init_quadric(&dets, &self.ds.camera, hint) {
            Ok(q) => q,
            Err(Error::CannotInitialize(_)) => {
                self.pending.push(pending);
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        let q_world = self.refine_multistart(&q_world, &pending.views)?;
        if !self.fits_views(&q_world, &pending.views) {
            self.pending.push(pending);
            return Ok(false);
        }
        let local = q_world.transformed(&self.pose(first).inverse());
        let var = self.graph.add_variable(Variable::Quadric(local))?;
        let class_id = pending.views[0].1.class_id;
        self.quadrics.push(QuadricLandmark {
            var,
            anchor: first,
            tracks: pending.tracks.clone(),
            class_id,
            supported: false,
            views: pending.views.clone(),
        });
        let q = self.quadrics.len() - 1;
        for (k, b) in &pending.views {
            self.quadric_observation(q, *k, *b)?;
        }
        if self.cfg.mode.uses_supports() {
            if let Some(file) = &pending.cloud_file {
                if let Some(model) = self.shape_model(file, &q_world) {
                    let noise = NoiseModel::isotropic(1, self.cfg.noise.shape_sigma)?;
                    let f = Factor::shape_prior(var, model, noise)?.with_robust(self.huber());
                    self.add(Ok(f))?;
                }
            }
        }
        Ok(true)
    }

    fn process_objects(&mut self, k: usize) -> Result<()> {
        let camera_pose = self.pose(k);
        let dets: Vec<_> =
            self.ds.frames[k].objects.iter().filter(|o| o.bbox.score >= self.cfg.assoc.score_min).collect();
        let candidates: Vec<usize> = (0..self.quadrics.len())
            .filter(|&i| quadric_in_front(&self.quadric_world(&self.quadrics[i]), &camera_pose))
            .collect();
        let overlap: Vec<Vec<usize>> = dets
            .iter()
            .map(|d| candidates.iter().map(|&j| keypoint_overlap(&d.tracks, &self.quadrics[j].tracks)).collect())
            .collect();
        let ids: Vec<u64> = candidates.iter().map(|&j| j as u64).collect();
        let decisions = match_objects(&overlap, &ids, &self.cfg.assoc)?;
        for (det, decision) in dets.into_iter().zip(decisions) {
            match decision {
                Decision::Matched(j) => {
                    let j = j as usize;
                    self.quadrics[j].tracks.extend(det.tracks.iter().copied());
                    self.quadrics[j].views.push((k, det.bbox));
                    self.quadric_observation(j, k, det.bbox)?;
                }
                Decision::New => {
                    let best = self
                        .pending
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| p.views.iter().all(|(f, _)| *f != k))
                        .map(|(i, p)| (keypoint_overlap(&det.tracks, &p.tracks), i))
                        .filter(|(c, _)| *c >= self.cfg.assoc.th_high)
                        .max_by_key(|(c, i)| (*c, std::cmp::Reverse(*i)));
                    match best {
                        Some((_, i)) => {
                            let mut p = self.pending.remove(i);
                            p.tracks.extend(det.tracks.iter().copied());
                            p.views.push((k, det.bbox));
                            if p.cloud_file.is_none() {
                                p.cloud_file = det.cloud_file.clone();
                            }
                            if p.views.len() >= self.cfg.object_min_views {
                                self.create_quadric(p)?;
                            } else {
                                self.pending.push(p);
                            }
                        }
                        None => self.pending.push(PendingObject {
                            tracks: det.tracks.clone(),
                            views: vec![(k, det.bbox)],
                            cloud_file: det.cloud_file.clone(),
                        }),
                    }
                }
                Decision::Ignored => {}
            }
        }
        Ok(())
    }

    /// Point-plane, Manhattan and support relations found on the current estimate.
    fn associate_structure(&mut self) -> Result<()> {
        let tol = self.cfg.assoc.plane_dist_tol;
        if self.cfg.mode.uses_planes() {
            for i in 0..self.planes.len() {
                let world = self.plane_world(&self.planes[i]);
                let candidates: Vec<(u64, Vector3<f64>)> = self.planes[i]
                    .tracks
                    .iter()
                    .filter(|t| !self.planes[i].paired.contains(t))
                    .filter_map(|t| {
                        let id = self.points.get(t)?.var?;
                        Some((*t, *self.graph.get(id)?.as_point()?))
                    })
                    .collect();
                let inliers = associate_points_to_plane(&candidates, &self.planes[i].tracks, &world, tol);
                for t in inliers {
                    let point = self.points[&t].var.expect("triangulated");
                    let noise = NoiseModel::isotropic(1, self.cfg.noise.point_plane_sigma)?;
                    let p = &self.planes[i];
                    let f = Factor::point_plane(point, p.var, kf(self.poses[p.anchor]), noise);
                    self.add(f)?;
                    self.planes[i].paired.insert(t);
                }
            }
        }
        if self.cfg.mode.uses_manhattan() {
            let tol = self.cfg.assoc.plane_angle_tol;
            for i in 0..self.planes.len() {
                for j in i + 1..self.planes.len() {
                    if self.relations.contains(&(i, j)) {
                        continue;
                    }
                    let (a, b) = (self.plane_world(&self.planes[i]), self.plane_world(&self.planes[j]));
                    let angle = a.normal().dot(&b.normal()).abs().clamp(0.0, 1.0).acos();
                    let pa = (self.planes[i].var, kf(self.poses[self.planes[i].anchor]));
                    let pb = (self.planes[j].var, kf(self.poses[self.planes[j].anchor]));
                    let f = if angle < tol {
                        Factor::parallel(pa, pb, NoiseModel::isotropic(1, self.cfg.noise.parallel_sigma)?)
                    } else if (std::f64::consts::FRAC_PI_2 - angle).abs() < tol {
                        Factor::perpendicular(pa, pb, NoiseModel::isotropic(1, self.cfg.noise.perpendicular_sigma)?)
                    } else {
                        continue;
                    };
                    self.add(f)?;
                    self.relations.insert((i, j));
                }
            }
        }
        if self.cfg.mode.uses_supports() {
            for qi in 0..self.quadrics.len() {
                if self.quadrics[qi].supported {
                    continue;
                }
                let q = self.quadric_world(&self.quadrics[qi]);
                let mut best: Option<(f64, usize)> = None;
                for (pi, p) in self.planes.iter().enumerate() {
                    let w = self.plane_world(p);
                    let gap = (w.signed_distance(&q.center()).abs() - q.support_radius(&w.normal())).abs();
                    if gap < self.cfg.support_tol && best.is_none_or(|(g, _)| gap < g) {
                        best = Some((gap, pi));
                    }
                }
                if let Some((_, pi)) = best {
                    let p = &self.planes[pi];
                    let lm = &self.quadrics[qi];
                    let noise = NoiseModel::isotropic(1, self.cfg.noise.tangency_sigma)?;
                    let f =
                        Factor::tangency((p.var, kf(self.poses[p.anchor])), (lm.var, kf(self.poses[lm.anchor])), noise);
                    self.add(f)?;
                    self.quadrics[qi].supported = true;
                }
            }
        }
        Ok(())
    }

    /// Optimizes everything except object landmarks, which are held out of
    /// the problem together with their factors.
    fn optimize_without_objects(&mut self) -> Result<OptimizationReport> {
        let mut sub = Graph::new();
        for (id, v) in self.graph.variables() {
            if id.kind != VariableKind::Quadric {
                sub.insert_variable(*id, *v)?;
                if self.graph.is_fixed(*id) {
                    sub.fix(*id)?;
                }
            }
        }
        for f in self.graph.factors() {
            if f.keys().iter().all(|k| k.kind != VariableKind::Quadric) {
                sub.add_factor(f.clone())?;
            }
        }
        let report = sub.optimize(&self.cfg.optimizer)?;
        for (id, v) in sub.variables() {
            self.graph.set(*id, *v)?;
        }
        Ok(report)
    }

    /// One batch step. With objects present the poses are first settled
    /// without them, the quadrics are then fitted to their boxes, and only
    /// then is the joint problem solved; the piecewise-smooth box factors
    /// converge poorly from far away.
    fn batch(&mut self) -> Result<()> {
        self.associate_structure()?;
        let mut iterations = 0;
        if !self.quadrics.is_empty() {
            let pre = self.optimize_without_objects()?;
            iterations += pre.iterations;
            if pre.termination == Termination::NumericalFailure {
                self.reports.push(pre);
                return Err(Error::NumericalFailure("normal equations could not be factored".into()));
            }
            self.refine_quadrics()?;
        }
        let mut report = self.graph.optimize(&self.cfg.optimizer)?;
        report.iterations += iterations;
        log::debug!(
            "batch {}: cost {:.6e} -> {:.6e} in {} iterations ({:?})",
            self.reports.len(),
            report.initial_cost,
            report.final_cost,
            report.iterations,
            report.termination
        );
        let failed = report.termination == Termination::NumericalFailure;
        self.reports.push(report);
        if failed {
            return Err(Error::NumericalFailure("normal equations could not be factored".into()));
        }
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        let n = self.ds.frames.len();
        for k in 0..n {
            self.add_pose(k)?;
            self.process_points(k)?;
            if self.cfg.mode.uses_planes() {
                self.process_planes(k)?;
            }
            if self.cfg.mode.uses_objects() {
                self.process_objects(k)?;
            }
            if (k + 1) % self.cfg.batch_every == 0 || k + 1 == n {
                self.batch()?;
            }
        }
        Ok(())
    }

    fn solution(&self) -> Solution {
        let poses = self.poses.iter().enumerate().map(|(k, _)| (self.ds.frames[k].keyframe.id, self.pose(k))).collect();
        let points = self.points.iter().filter_map(|(t, p)| Some((*t, *self.graph.get(p.var?)?.as_point()?))).collect();
        let planes = self
            .planes
            .iter()
            .enumerate()
            .map(|(i, p)| SolvedPlane {
                id: i as u64,
                anchor_frame: self.ds.frames[p.anchor].keyframe.id,
                plane: self.plane_world(p),
                inlier_tracks: p.paired.iter().copied().collect(),
            })
            .collect();
        let quadrics = self
            .quadrics
            .iter()
            .enumerate()
            .map(|(i, q)| SolvedQuadric {
                id: i as u64,
                anchor_frame: self.ds.frames[q.anchor].keyframe.id,
                quadric: self.quadric_world(q),
                class_id: q.class_id,
            })
            .collect();
        Solution { mode: self.cfg.mode, seed: self.ds.seed, poses, points, planes, quadrics }
    }

    fn index(&self) -> VariableIndex {
        VariableIndex {
            poses: self.poses.clone(),
            points: self.points.iter().filter_map(|(t, p)| Some((*t, p.var?))).collect(),
            planes: self.planes.iter().map(|p| (p.var, p.anchor)).collect(),
            quadrics: self.quadrics.iter().map(|q| (q.var, q.anchor)).collect(),
        }
    }

    fn report(&self) -> RunReport {
        let last = self.reports.last();
        RunReport {
            mode: self.cfg.mode,
            seed: self.ds.seed,
            n_keyframes: self.poses.len(),
            n_points: self.points.values().filter(|p| p.var.is_some()).count(),
            n_planes: self.planes.len(),
            n_quadrics: self.quadrics.len(),
            batches: self.reports.len(),
            iterations: self.reports.iter().map(|r| r.iterations).sum(),
            final_cost: self.graph.total_cost(),
            converged: last.is_some_and(|r| r.converged),
            termination: last.map(|r| r.termination),
            factor_counts: factor_counts(self.graph.factors()),
        }
    }
}

/// Number of factors per kind.
pub fn factor_counts(factors: &[Factor]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for f in factors {
        *out.entry(f.model.name().to_string()).or_insert(0) += 1;
    }
    out
}

/// Runs the back-end over a dataset. Data errors abort with an error; a
/// numerical failure of the optimizer stops the run and returns the best
/// estimate so far with `failure` set.
pub fn run_pipeline(ds: &Dataset, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if ds.frames.is_empty() {
        return Err(Error::Format { line: 0, message: "dataset has no keyframes".into() });
    }
    let mut r = Runner {
        cfg,
        ds,
        graph: Graph::new(),
        poses: Vec::new(),
        dead_reckoned: Vec::new(),
        points: BTreeMap::new(),
        planes: Vec::new(),
        quadrics: Vec::new(),
        pending: Vec::new(),
        relations: BTreeSet::new(),
        reports: Vec::new(),
    };
    let failure = match r.run() {
        Ok(()) => None,
        Err(e @ Error::NumericalFailure(_)) => Some(e),
        Err(e) => return Err(e),
    };
    let solution = r.solution();
    let report = r.report();
    let index = r.index();
    Ok(RunOutput { solution, report, failure, graph: r.graph, index })
}

/// Kinds of factors each mode may create.
pub fn mode_factor_kinds(mode: Mode) -> BTreeSet<&'static str> {
    let mut kinds: BTreeSet<&'static str> = ["between", "reprojection"].into();
    if mode.uses_planes() {
        kinds.extend(["plane_observation", "point_plane"]);
    }
    if mode.uses_manhattan() {
        kinds.extend(["parallel", "perpendicular"]);
    }
    if mode.uses_objects() {
        kinds.insert("quadric_observation");
    }
    if mode.uses_supports() {
        kinds.extend(["tangency", "shape_prior"]);
    }
    kinds
}

#[cfg(test)]
mod tests;
