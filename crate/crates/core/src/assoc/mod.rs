//! Data association: Hungarian box-to-quadric assignment, keypoint-overlap
//! plane matching and landmark initialization.

mod hungarian;

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::factors::predicted_bbox;
use crate::geometry::{BBox, Camera, DualQuadric, Plane, Pose};

pub use hungarian::{assignment_cost, hungarian};

/// Minimum camera-center spread for multi-view quadric initialization.
pub const MIN_BASELINE: f64 = 0.05;
/// Candidate quadrics must have their center at least this deep in the camera.
pub const MIN_FRONT_DEPTH: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    pub th_h: usize,
    pub th_l: usize,
    pub th_high: usize,
    pub th_low: usize,
    pub score_min: f64,
    /// Radians.
    pub plane_angle_tol: f64,
    /// Meters.
    pub plane_dist_tol: f64,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            th_h: 8,
            th_l: 2,
            th_high: 10,
            th_low: 3,
            score_min: 0.85,
            plane_angle_tol: 10f64.to_radians(),
            plane_dist_tol: 0.1,
        }
    }
}

impl AssocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.th_l > self.th_h {
            return Err(invalid("assoc.th_l must not exceed assoc.th_h"));
        }
        if self.th_low > self.th_high {
            return Err(invalid("assoc.th_low must not exceed assoc.th_high"));
        }
        if !(0.0..=1.0).contains(&self.score_min) {
            return Err(invalid("assoc.score_min must lie in [0, 1]"));
        }
        if !(self.plane_angle_tol > 0.0 && self.plane_dist_tol > 0.0) {
            return Err(invalid("plane tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Matched(u64),
    New,
    Ignored,
}

/// Number of tracks shared by two keypoint sets.
pub fn keypoint_overlap(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> usize {
    a.intersection(b).count()
}

/// True when the quadric's center lies in front of the camera.
pub fn quadric_in_front(q: &DualQuadric, camera_pose: &Pose) -> bool {
    camera_pose.inverse_transform_point(&q.center()).z > MIN_FRONT_DEPTH
}

/// Assigns detections to candidate quadrics.
///
/// `overlap[i][j]` is the number of keypoints of candidate `j` inside box `i`.
/// Costs are `K − p` with `K` the largest overlap, and the problem is padded
/// to square with cost `K`. An assignment is accepted at `p ≥ th_high`;
/// detections assigned with `p ≤ th_low` (or to padding) become new
/// landmarks and the rest are ignored.
pub fn match_objects(overlap: &[Vec<usize>], candidates: &[u64], cfg: &AssocConfig) -> Result<Vec<Decision>> {
    let n = overlap.len();
    let m = candidates.len();
    if overlap.iter().any(|row| row.len() != m) {
        return Err(invalid("overlap rows must have one entry per candidate"));
    }
    if m == 0 {
        return Ok(vec![Decision::New; n]);
    }
    // canonical row order keeps decisions independent of detection order
    let mut rows: Vec<usize> = (0..n).collect();
    rows.sort_by(|&a, &b| overlap[b].cmp(&overlap[a]));
    let k = overlap.iter().flatten().copied().max().unwrap_or(0) as f64;
    let size = n.max(m);
    let cost =
        nalgebra::DMatrix::from_fn(size, size, |i, j| if i < n && j < m { k - overlap[rows[i]][j] as f64 } else { k });
    let assign = hungarian(&cost);
    let mut out = vec![Decision::New; n];
    for (i, &row) in rows.iter().enumerate() {
        out[row] = match assign[i] {
            Some(j) if j < m => {
                let p = overlap[row][j];
                if p >= cfg.th_high {
                    Decision::Matched(candidates[j])
                } else if p <= cfg.th_low {
                    Decision::New
                } else {
                    Decision::Ignored
                }
            }
            _ => Decision::New,
        };
    }
    Ok(out)
}

/// A plane landmark as seen by the associator.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPlane {
    pub id: u64,
    /// World frame.
    pub plane: Plane,
    pub tracks: BTreeSet<u64>,
}

/// A plane detection in camera coordinates with the tracks inside its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneDetection {
    pub plane: Plane,
    pub inliers: BTreeSet<u64>,
}

/// Angle between the normals (sign-insensitive) and offset difference after
/// orienting both planes the same way.
pub fn plane_difference(a: &Plane, b: &Plane) -> (f64, f64) {
    let b = if a.normal().dot(&b.normal()) < 0.0 { b.negated() } else { *b };
    let c = a.normal().dot(&b.normal()).clamp(-1.0, 1.0);
    (c.acos(), (a.offset() - b.offset()).abs())
}

fn geometric_match(a: &Plane, b: &Plane, cfg: &AssocConfig) -> Option<f64> {
    let (angle, dist) = plane_difference(a, b);
    (angle < cfg.plane_angle_tol && dist < cfg.plane_dist_tol).then_some(angle)
}

/// Matches a detection against the map planes, compared in the camera frame.
/// A match needs more than `th_H` shared keypoints and agreement within the
/// angle and distance tolerances; among several, the largest overlap wins,
/// then the smallest angle. The detection is new when every overlap is below
/// `th_L` and no map plane agrees geometrically; otherwise it is ignored.
pub fn match_planes(det: &PlaneDetection, map_planes: &[MapPlane], camera_pose: &Pose, cfg: &AssocConfig) -> Decision {
    let to_camera = camera_pose.inverse();
    let mut best: Option<(usize, f64, u64)> = None;
    let mut any_geometric = false;
    let mut max_common = 0;
    for mp in map_planes {
        let common = keypoint_overlap(&det.inliers, &mp.tracks);
        max_common = max_common.max(common);
        let Some(angle) = geometric_match(&det.plane, &mp.plane.transform(&to_camera), cfg) else {
            continue;
        };
        any_geometric = true;
        if common > cfg.th_h {
            let better = match best {
                None => true,
                Some((c, a, _)) => common > c || (common == c && angle < a),
            };
            if better {
                best = Some((common, angle, mp.id));
            }
        }
    }
    match best {
        Some((_, _, id)) => Decision::Matched(id),
        None if max_common < cfg.th_l && !any_geometric => Decision::New,
        None => Decision::Ignored,
    }
}

/// Point landmarks whose track is in the mask and that lie within `dist_tol`
/// of the plane.
pub fn associate_points_to_plane(
    points: &[(u64, Vector3<f64>)],
    mask_inliers: &BTreeSet<u64>,
    pi: &Plane,
    dist_tol: f64,
) -> Vec<u64> {
    points
        .iter()
        .filter(|(id, x)| mask_inliers.contains(id) && pi.signed_distance(x).abs() < dist_tol)
        .map(|(id, _)| *id)
        .collect()
}

fn bbox_ray(b: &BBox, cam: &Camera, pose: &Pose) -> (Vector3<f64>, Vector3<f64>) {
    let (u, v) = b.center();
    let dir_c = cam.backproject(&Vector2::new(u, v));
    (*pose.translation(), (pose.rotation() * dir_c).normalize())
}

/// Point closest in the least-squares sense to all rays.
fn triangulate_rays(rays: &[(Vector3<f64>, Vector3<f64>)]) -> Option<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (o, d) in rays {
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * o;
    }
    a.try_inverse().map(|inv| inv * b)
}

/// Triangulates a point from pixel observations `(camera pose, pixel)`;
/// None when the rays are (near) parallel or the point is not in front of
/// every camera.
pub fn triangulate_point(views: &[(Pose, Vector2<f64>)], cam: &Camera) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let rays: Vec<_> =
        views.iter().map(|(p, px)| (*p.translation(), (p.rotation() * cam.backproject(px)).normalize())).collect();
    let x = triangulate_rays(&rays)?;
    views.iter().all(|(p, _)| p.inverse_transform_point(&x).z > MIN_FRONT_DEPTH).then_some(x)
}

/// Largest angle (radians) between the viewing rays of `x` from the given
/// camera centers.
pub fn parallax(x: &Vector3<f64>, centers: &[Vector3<f64>]) -> f64 {
    let dirs: Vec<Vector3<f64>> = centers.iter().map(|c| (x - c).normalize()).collect();
    let mut best: f64 = 0.0;
    for (i, a) in dirs.iter().enumerate() {
        for b in &dirs[i + 1..] {
            best = best.max(a.dot(b).clamp(-1.0, 1.0).acos());
        }
    }
    best
}

fn baseline(dets: &[(BBox, Pose)]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, (_, a)) in dets.iter().enumerate() {
        for (_, b) in &dets[i + 1..] {
            best = best.max((a.translation() - b.translation()).norm());
        }
    }
    best
}

/// Initial ellipsoid from detections `(bbox, camera pose)`.
///
/// With two or more views spread by more than [`MIN_BASELINE`] the center is
/// triangulated from the box-center rays; otherwise it is placed on the first
/// box-center ray at `depth_hint`. Semi-axes come from box sizes scaled by
/// depth over focal length (averaged over views), the third axis being the
/// mean of the other two, with identity orientation.
pub fn init_quadric(dets: &[(BBox, Pose)], cam: &Camera, depth_hint: Option<f64>) -> Result<DualQuadric> {
    let (first_box, first_pose) = dets.first().ok_or_else(|| Error::CannotInitialize("no detections".into()))?;
    let mut center = None;
    if dets.len() >= 2 && baseline(dets) > MIN_BASELINE {
        let rays: Vec<_> = dets.iter().map(|(b, p)| bbox_ray(b, cam, p)).collect();
        center = triangulate_rays(&rays)
            .filter(|x| dets.iter().all(|(_, p)| p.inverse_transform_point(x).z > MIN_FRONT_DEPTH));
    }
    if center.is_none() {
        if let Some(depth) = depth_hint.filter(|d| d.is_finite() && *d > MIN_FRONT_DEPTH) {
            let (u, v) = first_box.center();
            center = Some(first_pose.transform_point(&(cam.backproject(&Vector2::new(u, v)) * depth)));
        }
    }
    let center = center.ok_or_else(|| Error::CannotInitialize("no baseline and no depth hint".into()))?;

    let (mut ax, mut ay) = (0.0, 0.0);
    for (b, p) in dets {
        let z = p.inverse_transform_point(&center).z;
        ax += 0.5 * b.width() * z / cam.fx;
        ay += 0.5 * b.height() * z / cam.fy;
    }
    let n = dets.len() as f64;
    let (ax, ay) = (ax / n, ay / n);
    let axes = Vector3::new(ax, ay, 0.5 * (ax + ay));
    let q = DualQuadric::new(Pose::from_translation(center), axes)?;
    for (b, p) in dets {
        let overlaps = predicted_bbox(&q, cam, p).ok().flatten().is_some_and(|pred| pred.iou(b) > 0.0);
        if !overlaps {
            return Err(Error::CannotInitialize("initial ellipsoid misses a source detection".into()));
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests;
