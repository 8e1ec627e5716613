use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::quadric::DualQuadric;
use crate::error::{invalid, Result};

/// Oriented box with positive half-extents along the columns of `rotation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
}

impl Cuboid {
    pub fn new(center: Vector3<f64>, rotation: Matrix3<f64>, half_extents: Vector3<f64>) -> Result<Self> {
        if !half_extents.iter().all(|h| h.is_finite() && *h > 0.0) {
            return Err(invalid("cuboid half-extents must be positive"));
        }
        if (rotation.transpose() * rotation - Matrix3::identity()).amax() > 1e-9 || rotation.determinant() < 0.0 {
            return Err(invalid("cuboid rotation is not orthonormal"));
        }
        Ok(Self { center, rotation, half_extents })
    }

    pub fn axis_aligned(center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self> {
        Self::new(center, Matrix3::identity(), half_extents)
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.product()
    }

    /// Same box with half-extents divided by the largest one.
    pub fn normalized(&self) -> Self {
        Self { half_extents: self.half_extents / self.half_extents.max(), ..*self }
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let local = self.rotation.transpose() * (x - self.center);
        (0..3).all(|k| local[k].abs() <= self.half_extents[k])
    }

    pub fn translated(&self, t: &Vector3<f64>) -> Self {
        Self { center: self.center + t, ..*self }
    }

    fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let s = Vector3::new(
                if i & 1 == 0 { -1.0 } else { 1.0 },
                if i & 2 == 0 { -1.0 } else { 1.0 },
                if i & 4 == 0 { -1.0 } else { 1.0 },
            );
            *c = self.center + self.rotation * s.component_mul(&self.half_extents);
        }
        out
    }

    // Outward-oriented faces.
    fn faces(&self) -> Vec<Vec<Vector3<f64>>> {
        let c = self.corners();
        const IDX: [[usize; 4]; 6] =
            [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4], [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]];
        IDX.iter().map(|f| f.iter().map(|&i| c[i]).collect()).collect()
    }

    // Half-spaces nᵀx ≤ h bounding the box.
    fn half_spaces(&self) -> [(Vector3<f64>, f64); 6] {
        let mut out = [(Vector3::zeros(), 0.0); 6];
        for k in 0..3 {
            let n = self.rotation.column(k).into_owned();
            let c = n.dot(&self.center);
            out[2 * k] = (n, c + self.half_extents[k]);
            out[2 * k + 1] = (-n, -c + self.half_extents[k]);
        }
        out
    }
}

/// Volume intersection over union of two cuboids.
///
/// Boxes sharing an orientation are intersected per axis; otherwise the first
/// box is clipped against the six half-spaces of the second.
pub fn cuboid_iou(a: &Cuboid, b: &Cuboid) -> f64 {
    let inter = if (a.rotation - b.rotation).amax() < 1e-12 {
        let rel = a.rotation.transpose() * (b.center - a.center);
        let mut v = 1.0;
        for k in 0..3 {
            let lo = (-a.half_extents[k]).max(rel[k] - b.half_extents[k]);
            let hi = a.half_extents[k].min(rel[k] + b.half_extents[k]);
            if hi <= lo {
                return 0.0;
            }
            v *= hi - lo;
        }
        v
    } else {
        let mut faces = a.faces();
        for (n, h) in b.half_spaces() {
            faces = clip_polytope(&faces, &n, h);
            if faces.is_empty() {
                return 0.0;
            }
        }
        polytope_volume(&faces)
    };
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Enclosing box of the ellipsoid in its own frame with half-extents scaled
/// so the largest equals 1.
pub fn quadric_cuboid(q: &DualQuadric) -> Cuboid {
    Cuboid { center: q.center(), rotation: *q.frame.rotation(), half_extents: q.semi_axes() }.normalized()
}

fn clip_polytope(faces: &[Vec<Vector3<f64>>], n: &Vector3<f64>, h: f64) -> Vec<Vec<Vector3<f64>>> {
    let eps = 1e-12 * (1.0 + h.abs());
    let mut out = Vec::with_capacity(faces.len() + 1);
    let mut cut_points: Vec<Vector3<f64>> = Vec::new();
    for face in faces {
        let mut poly = Vec::with_capacity(face.len() + 2);
        for i in 0..face.len() {
            let p = face[i];
            let q = face[(i + 1) % face.len()];
            let dp = n.dot(&p) - h;
            let dq = n.dot(&q) - h;
            if dp <= eps {
                poly.push(p);
            }
            if (dp < -eps && dq > eps) || (dp > eps && dq < -eps) {
                let x = p + (q - p) * (dp / (dp - dq));
                poly.push(x);
                cut_points.push(x);
            } else if dp.abs() <= eps {
                cut_points.push(p);
            }
        }
        if poly.len() >= 3 {
            out.push(poly);
        }
    }
    if cut_points.len() >= 3 {
        let centroid = cut_points.iter().sum::<Vector3<f64>>() / cut_points.len() as f64;
        let u = any_perpendicular(n);
        let v = n.cross(&u);
        let mut pts: Vec<(f64, Vector3<f64>)> = cut_points
            .iter()
            .map(|p| {
                let d = p - centroid;
                (d.dot(&v).atan2(d.dot(&u)), *p)
            })
            .collect();
        pts.sort_by(|x, y| x.0.total_cmp(&y.0));
        pts.dedup_by(|x, y| (x.1 - y.1).norm() < 1e-12);
        if pts.len() >= 3 {
            out.push(pts.into_iter().map(|(_, p)| p).collect());
        }
    }
    out
}

fn any_perpendicular(n: &Vector3<f64>) -> Vector3<f64> {
    let a = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    n.cross(&a).normalize()
}

fn polytope_volume(faces: &[Vec<Vector3<f64>>]) -> f64 {
    let mut v = 0.0;
    for f in faces {
        for i in 1..f.len() - 1 {
            v += f[0].dot(&f[i].cross(&f[i + 1]));
        }
    }
    (v / 6.0).abs()
}
