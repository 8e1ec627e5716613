//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function returns a JSON string so the page needs no glue
//! beyond `JSON.parse`. The same functions are plain Rust on native targets.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semslam_core::geometry::{
    conic_to_bbox, min_enclosing_ellipsoid, project_quadric, BBox, Camera, DualQuadric, Pose,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Image ellipse in center / semi-axes / angle form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// From the shape matrix `S` of `(x − m)ᵀ S⁻¹ (x − m) = 1`.
    fn from_shape(cx: f64, cy: f64, s: &Matrix2<f64>) -> Option<Self> {
        let eig = SymmetricEigen::new(*s);
        let (i, j) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
        if eig.eigenvalues[j] <= 0.0 {
            return None;
        }
        let v = eig.eigenvectors.column(i);
        Some(Self { cx, cy, a: eig.eigenvalues[i].sqrt(), b: eig.eigenvalues[j].sqrt(), angle: v[1].atan2(v[0]) })
    }

    /// Ellipse of a normalized dual conic.
    pub fn from_dual_conic(c: &Matrix3<f64>) -> Option<Self> {
        let c = c / -c[(2, 2)];
        let (cx, cy) = (-c[(0, 2)], -c[(1, 2)]);
        let s = Matrix2::new(c[(0, 0)] + cx * cx, c[(0, 1)] + cx * cy, c[(1, 0)] + cx * cy, c[(1, 1)] + cy * cy);
        Self::from_shape(cx, cy, &s)
    }
}

#[derive(Debug, Serialize)]
pub struct Projection {
    pub ellipse: Ellipse,
    pub bbox: [f64; 4],
    pub width: f64,
    pub height: f64,
}

/// Demo camera: default intrinsics, orbiting the origin at `distance` and
/// `azimuth` (radians), looking at the origin from `height` meters up.
fn orbit_camera(azimuth: f64, distance: f64, height: f64) -> Result<Pose, String> {
    let eye = Vector3::new(distance * azimuth.cos(), distance * azimuth.sin(), height);
    Pose::look_at(eye, Vector3::zeros(), Vector3::z()).map_err(|e| e.to_string())
}

/// Projects an ellipsoid centered at the origin, with semi-axes `(ax, ay, az)`
/// and rotated by `yaw` about z, into the orbiting camera.
pub fn project(
    ax: f64,
    ay: f64,
    az: f64,
    yaw: f64,
    azimuth: f64,
    distance: f64,
    height: f64,
) -> Result<Projection, String> {
    let cam = Camera::default();
    let frame = Pose::from_rotation_vector(Vector3::new(0.0, 0.0, yaw), Vector3::zeros());
    let q = DualQuadric::new(frame, Vector3::new(ax, ay, az)).map_err(|e| e.to_string())?;
    let pose = orbit_camera(azimuth, distance, height)?;
    let c = project_quadric(&q, &cam, &pose).map_err(|e| e.to_string())?;
    let b = conic_to_bbox(&c).map_err(|e| e.to_string())?;
    let ellipse = Ellipse::from_dual_conic(&c).ok_or("conic is not an ellipse")?;
    Ok(Projection { ellipse, bbox: b.corners(), width: cam.width, height: cam.height })
}

#[derive(Debug, Serialize)]
pub struct Overlap {
    pub iou: f64,
    /// Quadric observation residual `1 − IoU`.
    pub residual: f64,
}

pub fn overlap(a: [f64; 4], b: [f64; 4]) -> Result<Overlap, String> {
    let a = BBox::new(a[0], a[1], a[2], a[3]).map_err(|e| e.to_string())?;
    let b = BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| e.to_string())?;
    let iou = a.iou(&b);
    Ok(Overlap { iou, residual: 1.0 - iou })
}

#[derive(Debug, Serialize)]
pub struct EnclosingFit {
    /// Cloud in the order generated.
    pub points: Vec<[f64; 3]>,
    pub center: [f64; 3],
    /// Descending semi-axis lengths.
    pub radii: [f64; 3],
    /// Outline of the ellipsoid seen from above (its shadow on the xy plane).
    pub shadow: Ellipse,
    /// Largest `(x − c)ᵀ A (x − c)` over the cloud; at most 1.
    pub max_level: f64,
}

/// Seeded random box-shaped cloud with half-extents `(sx, sy, sz)`, rotated by
/// `yaw`, and its minimum-volume enclosing ellipsoid.
pub fn enclosing(n: usize, sx: f64, sy: f64, sz: f64, yaw: f64, seed: u64) -> Result<EnclosingFit, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = Pose::from_rotation_vector(Vector3::new(0.0, 0.0, yaw), Vector3::zeros());
    let points: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            let p = Vector3::new(rng.random_range(-sx..=sx), rng.random_range(-sy..=sy), rng.random_range(-sz..=sz));
            rot.transform_point(&p)
        })
        .collect();
    let e = min_enclosing_ellipsoid(&points).map_err(|e| e.to_string())?;
    let (radii, _) = e.principal_axes();
    let inv = e.shape.try_inverse().ok_or("singular ellipsoid")?;
    let s = Matrix2::new(inv[(0, 0)], inv[(0, 1)], inv[(1, 0)], inv[(1, 1)]);
    let shadow = Ellipse::from_shape(e.center.x, e.center.y, &s).ok_or("flat ellipsoid")?;
    let max_level = points.iter().map(|p| e.level(p)).fold(0.0, f64::max);
    Ok(EnclosingFit {
        points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        center: [e.center.x, e.center.y, e.center.z],
        radii: [radii.x, radii.y, radii.z],
        shadow,
        max_level,
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::json!({ "ok": v }).to_string(),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

#[wasm_bindgen(js_name = projectEllipsoid)]
#[allow(clippy::too_many_arguments)]
pub fn project_ellipsoid_js(ax: f64, ay: f64, az: f64, yaw: f64, azimuth: f64, distance: f64, height: f64) -> String {
    to_json(project(ax, ay, az, yaw, azimuth, distance, height))
}

#[wasm_bindgen(js_name = boxOverlap)]
pub fn box_overlap_js(a: Vec<f64>, b: Vec<f64>) -> String {
    let arr =
        |v: &[f64]| -> Result<[f64; 4], String> { v.try_into().map_err(|_| "a box has four numbers".to_string()) };
    to_json(arr(&a).and_then(|a| arr(&b).and_then(|b| overlap(a, b))))
}

#[wasm_bindgen(js_name = enclosingEllipsoid)]
pub fn enclosing_ellipsoid_js(n: usize, sx: f64, sy: f64, sz: f64, yaw: f64, seed: u64) -> String {
    to_json(enclosing(n, sx, sy, sz, yaw, seed))
}
