//! Seven-parameter alignment of a canonical object point cloud onto a quadric.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::mee::{min_enclosing_ellipsoid, Ellipsoid3};
use super::quadric::DualQuadric;
use super::se3::Pose;
use crate::error::Result;

/// Axis lengths within this ratio are treated as tied.
const AXIS_TIE_RATIO: f64 = 1.01;

/// Similarity `x ↦ scale · R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub pose: Pose,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, pose: Pose::identity() }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation() * x * self.scale + self.pose.translation()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.pose.rotation().transpose();
        let t = -(rt * self.pose.translation()) / self.scale;
        Self { scale: 1.0 / self.scale, pose: Pose::new(rt, t).expect("inverse of a valid rotation") }
    }

    pub fn compose(&self, other: &Similarity) -> Self {
        let r = self.pose.rotation() * other.pose.rotation();
        let t = self.apply(other.pose.translation());
        Self { scale: self.scale * other.scale, pose: Pose::new(r, t).expect("product of rotations") }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub similarity: Similarity,
    pub enclosing: Ellipsoid3,
    pub cloud: Vec<Vector3<f64>>,
}

/// Maps the cloud's minimum enclosing ellipsoid onto `q`: principal axes are
/// matched by descending length, the scale maps mean radius onto mean semi-axis,
/// and the centers coincide. Axis signs and tied axes are resolved by picking
/// the rotation closest to identity.
pub fn register_pointcloud(cloud: &[Vector3<f64>], q: &DualQuadric) -> Result<Registration> {
    let enclosing = min_enclosing_ellipsoid(cloud)?;
    let (radii, cloud_axes) = enclosing.principal_axes();

    let a = q.semi_axes();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]));
    let q_axes = Matrix3::from_columns(&[
        q.frame.rotation().column(order[0]).into_owned(),
        q.frame.rotation().column(order[1]).into_owned(),
        q.frame.rotation().column(order[2]).into_owned(),
    ]);
    let q_len = Vector3::new(a[order[0]], a[order[1]], a[order[2]]);

    let tied = |k: usize| radii[k] / radii[k + 1] < AXIS_TIE_RATIO || q_len[k] / q_len[k + 1] < AXIS_TIE_RATIO;
    let mut groups: Vec<Vec<usize>> = vec![vec![0]];
    for k in 0..2 {
        if tied(k) {
            groups.last_mut().unwrap().push(k + 1);
        } else {
            groups.push(vec![k + 1]);
        }
    }

    // R = W D Uᵀ with D block-orthogonal over tied groups, maximizing tr(R).
    let m = cloud_axes.transpose() * q_axes;
    let target_det = (q_axes.determinant() * cloud_axes.determinant()).signum();
    let mut d = Matrix3::zeros();
    let mut weakest: Option<(f64, usize, nalgebra::DVector<f64>, nalgebra::DVector<f64>)> = None;
    for g in &groups {
        let k = g.len();
        let mg = DMatrix::from_fn(k, k, |i, j| m[(g[i], g[j])]);
        let svd = mg.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        // maximize tr(D_g M_g): D_g = V Uᵀ
        let dg = vt.transpose() * u.transpose();
        for i in 0..k {
            for j in 0..k {
                d[(g[i], g[j])] = dg[(i, j)];
            }
        }
        for s in 0..k {
            if weakest.as_ref().is_none_or(|w| svd.singular_values[s] < w.0) {
                let gi = groups.iter().position(|x| x == g).unwrap();
                weakest = Some((svd.singular_values[s], gi, u.column(s).into_owned(), vt.row(s).transpose()));
            }
        }
    }
    if d.determinant().signum() != target_det {
        let (_, gi, us, vs) = weakest.expect("at least one group");
        let g = &groups[gi];
        // flip the weakest singular direction: D_g −= 2 v uᵀ
        for i in 0..g.len() {
            for j in 0..g.len() {
                d[(g[i], g[j])] -= 2.0 * vs[i] * us[j];
            }
        }
    }
    let rotation = q_axes * d * cloud_axes.transpose();
    let rotation = super::se3::so3::orthonormalize(&rotation);

    let scale = q_len.mean() / radii.mean();
    let translation = q.center() - rotation * enclosing.center * scale;
    let similarity = Similarity { scale, pose: Pose::new(rotation, translation)? };
    let registered = cloud.iter().map(|p| similarity.apply(p)).collect();
    Ok(Registration { similarity, enclosing, cloud: registered })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn octahedron() -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            v.push(e);
            v.push(-e);
        }
        v
    }

    fn blob(rng: &mut impl Rng, axes: Vector3<f64>) -> Vec<Vector3<f64>> {
        (0..60)
            .map(|_| {
                let d = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
                d.component_mul(&axes) * rng.random_range(0.6..1.0)
            })
            .collect()
    }

    #[test]
    fn unit_sphere_onto_offset_sphere() {
        let q = DualQuadric::sphere(Vector3::new(1.0, 0.0, 0.0), 2.0).unwrap();
        let reg = register_pointcloud(&octahedron(), &q).unwrap();
        assert_relative_eq!(reg.similarity.scale, 2.0, epsilon = 1e-4);
        assert_relative_eq!(*reg.similarity.pose.translation(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-6);
        assert_relative_eq!(*reg.similarity.pose.rotation(), Matrix3::identity(), epsilon = 1e-9);
    }

    #[test]
    fn identical_ellipsoids_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cloud = blob(&mut rng, Vector3::new(1.0, 0.6, 0.3));
        let e = min_enclosing_ellipsoid(&cloud).unwrap();
        let (radii, axes) = e.principal_axes();
        let mut axes = axes;
        if axes.determinant() < 0.0 {
            axes.set_column(2, &-axes.column(2));
        }
        let q = DualQuadric::new(Pose::new(axes, e.center).unwrap(), radii).unwrap();
        let reg = register_pointcloud(&cloud, &q).unwrap();
        assert_relative_eq!(reg.similarity.scale, 1.0, epsilon = 1e-9);
        assert!((reg.similarity.pose.matrix() - nalgebra::Matrix4::identity()).amax() < 1e-6);
    }

    #[test]
    fn recovers_inverse_of_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..20 {
            let cloud0 = blob(&mut rng, Vector3::new(1.0, 0.55, 0.3));
            let e = min_enclosing_ellipsoid(&cloud0).unwrap();
            let (radii, mut axes) = e.principal_axes();
            if axes.determinant() < 0.0 {
                axes.set_column(2, &-axes.column(2));
            }
            let q = DualQuadric::new(Pose::new(axes, e.center).unwrap(), radii).unwrap();
            let s = Similarity {
                scale: rng.random_range(0.3..3.0),
                pose: Pose::exp(&Vector6::from_fn(|i, _| {
                    if i < 3 {
                        rng.random_range(-0.4..0.4)
                    } else {
                        rng.random_range(-5.0..5.0)
                    }
                })),
            };
            let moved: Vec<_> = cloud0.iter().map(|p| s.apply(p)).collect();
            let reg = register_pointcloud(&moved, &q).unwrap();
            let round = reg.similarity.compose(&s);
            assert!((round.scale - 1.0).abs() < 1e-6, "scale {} s {}", round.scale, s.scale);
            assert!((round.pose.matrix() - nalgebra::Matrix4::identity()).amax() < 1e-6);
            for (a, b) in reg.cloud.iter().zip(&cloud0) {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }
}
