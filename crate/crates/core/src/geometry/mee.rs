//! Minimum-volume enclosing ellipsoid by Khachiyan's barycentric iteration.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step-size tolerance of the barycentric iteration.
pub const KHACHIYAN_TOL: f64 = 1e-6;
pub const KHACHIYAN_MAX_ITER: usize = 10_000;

/// Solid ellipsoid `(x − c)ᵀ A (x − c) ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid3 {
    pub center: Vector3<f64>,
    pub shape: Matrix3<f64>,
}

impl Ellipsoid3 {
    pub fn level(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.center;
        (d.transpose() * self.shape * d)[0]
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI / self.shape.determinant().sqrt()
    }

    /// Semi-axis lengths and their unit directions (as matrix columns), in
    /// descending length order.
    pub fn principal_axes(&self) -> (Vector3<f64>, Matrix3<f64>) {
        let eig = SymmetricEigen::new(self.shape);
        let mut idx = [0usize, 1, 2];
        // smallest eigenvalue = longest axis
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let radii = Vector3::from_fn(|k, _| 1.0 / eig.eigenvalues[idx[k]].sqrt());
        let axes = Matrix3::from_columns(&[
            eig.eigenvectors.column(idx[0]).into_owned(),
            eig.eigenvectors.column(idx[1]).into_owned(),
            eig.eigenvectors.column(idx[2]).into_owned(),
        ]);
        (radii, axes)
    }
}

/// Minimum-volume ellipsoid containing every point.
///
/// Runs Khachiyan's algorithm until the barycentric step falls below
/// [`KHACHIYAN_TOL`] (at most [`KHACHIYAN_MAX_ITER`] iterations), then rescales
/// the result so that every input satisfies the containment inequality.
pub fn min_enclosing_ellipsoid(points: &[Vector3<f64>]) -> Result<Ellipsoid3> {
    if points.len() < 4 {
        return Err(Error::DegenerateInput(format!("{} points, need at least 4", points.len())));
    }
    if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
        return Err(Error::DegenerateInput("non-finite point".into()));
    }
    check_affine_rank(points)?;

    // Iterate on centered, unit-RMS points so that similar inputs follow the
    // same path; the result is mapped back at the end.
    let n = points.len();
    let d = 3.0;
    let mean = points.iter().sum::<Vector3<f64>>() / n as f64;
    let rms = (points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n as f64).sqrt();
    let local: Vec<Vector3<f64>> = points.iter().map(|p| (p - mean) / rms).collect();
    // lifted points q_i = (p_i, 1)
    let lifted: Vec<Vector4<f64>> = local.iter().map(|p| Vector4::new(p.x, p.y, p.z, 1.0)).collect();
    let mut u = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..KHACHIYAN_MAX_ITER {
        let mut x = Matrix4::zeros();
        for (q, w) in lifted.iter().zip(u.iter()) {
            x += q * q.transpose() * *w;
        }
        let xi = x.try_inverse().ok_or_else(|| Error::DegenerateInput("moment matrix is singular".into()))?;
        let (mut j, mut m_max) = (0, f64::NEG_INFINITY);
        for (i, q) in lifted.iter().enumerate() {
            let m = (q.transpose() * xi * q)[0];
            if m > m_max {
                m_max = m;
                j = i;
            }
        }
        let step = (m_max - d - 1.0) / ((d + 1.0) * (m_max - 1.0));
        let mut next = &u * (1.0 - step);
        next[j] += step;
        let change = (&next - &u).norm();
        u = next;
        if change < KHACHIYAN_TOL {
            break;
        }
    }

    let center = local.iter().zip(u.iter()).map(|(p, w)| p * *w).sum::<Vector3<f64>>();
    let mut cov = Matrix3::zeros();
    for (p, w) in local.iter().zip(u.iter()) {
        cov += p * p.transpose() * *w;
    }
    cov -= center * center.transpose();
    let shape =
        cov.try_inverse().ok_or_else(|| Error::DegenerateInput("scatter matrix is singular".into()))? / (d * rms * rms);
    let mut e = Ellipsoid3 { center: mean + center * rms, shape: (shape + shape.transpose()) * 0.5 };
    let worst = points.iter().map(|p| e.level(p)).fold(0.0, f64::max);
    if worst > 1.0 {
        e.shape /= worst;
    }
    Ok(e)
}

fn check_affine_rank(points: &[Vector3<f64>]) -> Result<()> {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let m = DMatrix::from_fn(points.len(), 3, |i, k| points[i][k] - mean[k]);
    let sv = m.singular_values();
    let scale = sv.max();
    if scale == 0.0 || sv.min() <= 1e-9 * scale {
        return Err(Error::DegenerateInput("points are coplanar or collinear".into()));
    }
    Ok(())
}
