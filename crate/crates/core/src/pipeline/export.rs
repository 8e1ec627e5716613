//! Map exports: colored ASCII PLY mesh and flat landmark records.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde_json::json;

use super::Solution;
use crate::geometry::Plane;

const POINT_COLOR: [u8; 3] = [180, 180, 180];
const RINGS: usize = 12;
const SEGMENTS: usize = 24;

/// Distinct, deterministic color for instance `i` (golden-angle hue walk).
pub fn instance_color(i: u64) -> [u8; 3] {
    let h = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|t| ((t + m) * 255.0).round() as u8)
}

#[derive(Default)]
struct Mesh {
    vertices: Vec<(Vector3<f64>, [u8; 3])>,
    faces: Vec<[usize; 3]>,
}

impl Mesh {
    fn vertex(&mut self, x: Vector3<f64>, color: [u8; 3]) -> usize {
        self.vertices.push((x, color));
        self.vertices.len() - 1
    }

    fn to_ply(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nelement face {}\n\
             property list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.faces.len()
        );
        for (x, c) in &self.vertices {
            let _ = writeln!(out, "{:.6} {:.6} {:.6} {} {} {}", x.x, x.y, x.z, c[0], c[1], c[2]);
        }
        for f in &self.faces {
            let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
        }
        out
    }
}

/// Orthonormal in-plane basis.
fn plane_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

/// Rectangle on `plane` covering the projections of `points`, as four corners.
pub fn plane_patch(plane: &Plane, points: &[Vector3<f64>]) -> Option<[Vector3<f64>; 4]> {
    if points.is_empty() {
        return None;
    }
    let n = plane.normal();
    let origin = plane.anchor_point();
    let (u, v) = plane_basis(&n);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        let d = p - origin;
        let (a, b) = (d.dot(&u), d.dot(&v));
        lo = [lo[0].min(a), lo[1].min(b)];
        hi = [hi[0].max(a), hi[1].max(b)];
    }
    let at = |a: f64, b: f64| origin + u * a + v * b;
    Some([at(lo[0], lo[1]), at(hi[0], lo[1]), at(hi[0], hi[1]), at(lo[0], hi[1])])
}

/// ASCII PLY with tessellated ellipsoids and plane patches in per-instance
/// colors, plus the map points as isolated vertices.
pub fn map_mesh_ply(sol: &Solution) -> String {
    let mut mesh = Mesh::default();
    for x in sol.points.values() {
        mesh.vertex(*x, POINT_COLOR);
    }
    for p in &sol.planes {
        let inliers: Vec<Vector3<f64>> = p.inlier_tracks.iter().filter_map(|t| sol.points.get(t).copied()).collect();
        let Some(corners) = plane_patch(&p.plane, &inliers) else { continue };
        let color = instance_color(p.id);
        let idx = corners.map(|c| mesh.vertex(c, color));
        mesh.faces.push([idx[0], idx[1], idx[2]]);
        mesh.faces.push([idx[0], idx[2], idx[3]]);
    }
    for q in &sol.quadrics {
        // offset keeps object colors distinct from plane colors
        let color = instance_color(q.id + 1000);
        let axes = q.quadric.semi_axes();
        let frame = q.quadric.frame;
        let sample = |theta: f64, phi: f64| {
            let local =
                Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()).component_mul(&axes);
            frame.transform_point(&local)
        };
        let top = mesh.vertex(sample(0.0, 0.0), color);
        let mut rings = Vec::with_capacity(RINGS - 1);
        for r in 1..RINGS {
            let theta = PI * r as f64 / RINGS as f64;
            let ring: Vec<usize> = (0..SEGMENTS)
                .map(|s| mesh.vertex(sample(theta, 2.0 * PI * s as f64 / SEGMENTS as f64), color))
                .collect();
            rings.push(ring);
        }
        let bottom = mesh.vertex(sample(PI, 0.0), color);
        for s in 0..SEGMENTS {
            let t = (s + 1) % SEGMENTS;
            mesh.faces.push([top, rings[0][s], rings[0][t]]);
            for w in rings.windows(2) {
                mesh.faces.push([w[0][s], w[1][s], w[1][t]]);
                mesh.faces.push([w[0][s], w[1][t], w[0][t]]);
            }
            let last = &rings[RINGS - 2];
            mesh.faces.push([bottom, last[t], last[s]]);
        }
    }
    mesh.to_ply()
}

/// One JSON line per landmark in world coordinates.
pub fn map_records(sol: &Solution) -> String {
    let mut out = String::new();
    for (track, x) in &sol.points {
        let _ = writeln!(out, "{}", json!({"kind": "point", "track": track, "xyz": [x.x, x.y, x.z]}));
    }
    for p in &sol.planes {
        let c = p.plane.coeffs();
        let _ = writeln!(
            out,
            "{}",
            json!({"kind": "plane", "id": p.id, "coeffs": [c[0], c[1], c[2], c[3]], "n_inliers": p.inlier_tracks.len()})
        );
    }
    for q in &sol.quadrics {
        let c = q.quadric.center();
        let a = q.quadric.semi_axes();
        let r = q.quadric.frame.rotation();
        let _ = writeln!(
            out,
            "{}",
            json!({
                "kind": "quadric",
                "id": q.id,
                "class": q.class_id,
                "center": [c.x, c.y, c.z],
                "semi_axes": [a.x, a.y, a.z],
                "rotation": [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
            })
        );
    }
    out
}
