//! Trajectory alignment and absolute trajectory error.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Pose, Similarity};

/// Ratio of the second to the first singular value of the centered positions
/// below which the positions count as collinear.
const COLLINEAR_RATIO: f64 = 1e-9;

/// Poses keyed by strictly increasing frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    entries: Vec<(u64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(u64, Pose)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("trajectory needs at least one pose"));
        }
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(invalid("trajectory frame ids must be strictly increasing"));
        }
        if entries.iter().any(|(_, p)| !p.is_valid()) {
            return Err(invalid("trajectory contains an invalid pose"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(u64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| *p.translation()).collect()
    }

    /// Applies `s` to every pose: positions map through the similarity and
    /// orientations are rotated.
    pub fn transformed(&self, s: &Similarity) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(id, p)| {
                let r = s.pose.rotation() * p.rotation();
                (*id, Pose::new(r, s.apply(p.translation())).expect("rotation product"))
            })
            .collect();
        Self { entries }
    }
}

/// Positions of the frames present in both trajectories, in frame order.
fn common_positions(est: &Trajectory, gt: &Trajectory) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let gt_map: BTreeMap<u64, &Pose> = gt.entries.iter().map(|(id, p)| (*id, p)).collect();
    est.entries.iter().filter_map(|(id, p)| gt_map.get(id).map(|g| (*p.translation(), *g.translation()))).unzip()
}

/// Least-squares similarity `S` minimizing `Σ‖S(p_est) − p_gt‖²` over the
/// frames common to both trajectories (closed form, Umeyama).
pub fn horn_align(est: &Trajectory, gt: &Trajectory) -> Result<Similarity> {
    let (src, dst) = common_positions(est, gt);
    let n = src.len();
    if n < 3 {
        return Err(Error::AlignmentDegenerate(format!("{n} common frames, need at least 3")));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let a = s - mu_s;
        cov += (d - mu_d) * a.transpose();
        src_cov += a * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let mut sv = src_cov.symmetric_eigen().eigenvalues.as_slice().to_vec();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= COLLINEAR_RATIO * COLLINEAR_RATIO * sv[0] {
        return Err(Error::AlignmentDegenerate("positions are collinear".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = (svd.singular_values.component_mul(&d.diagonal())).sum() / var_s;
    let t = mu_d - scale * r * mu_s;
    Ok(Similarity { scale, pose: Pose::new(r, t)? })
}

/// Root mean square of position differences over common frames, without
/// alignment.
pub fn position_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let (src, dst) = common_positions(est, gt);
    if src.is_empty() {
        return Err(Error::AlignmentDegenerate("no common frames".into()));
    }
    let sum: f64 = src.iter().zip(&dst).map(|(s, d)| (s - d).norm_squared()).sum();
    Ok((sum / src.len() as f64).sqrt())
}

/// ATE RMSE in meters after similarity alignment.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let s = horn_align(est, gt)?;
    position_rmse(&est.transformed(&s), gt)
}

/// Relative scale error `|k − 1|` of the estimate, where `k` is the factor by
/// which the estimate is larger than ground truth.
pub fn scale_error(est: &Trajectory, gt: &Trajectory) -> Result<f64> {
    let s = horn_align(est, gt)?;
    Ok((1.0 / s.scale - 1.0).abs())
}

/// One line of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: String,
    pub ate_rmse_cm: f64,
    pub n_keyframes: usize,
    pub seed: u64,
}

impl EvalRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> Pose {
        let w = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let t = Vector3::from_fn(|_, _| rng.random_range(-spread..spread));
        Pose::from_rotation_vector(w, t)
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        Trajectory::new((0..n as u64).map(|i| (i, random_pose(rng, 3.0))).collect()).unwrap()
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
        Similarity { scale: rng.random_range(0.2..5.0), pose: random_pose(rng, 10.0) }
    }

    fn alignment_residual(s: &Similarity, est: &Trajectory, gt: &Trajectory) -> f64 {
        position_rmse(&est.transformed(s), gt).unwrap()
    }

    #[test]
    fn identical_trajectories_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_traj(&mut rng, 10);
        let s = horn_align(&gt, &gt).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(s.pose.log().norm() < 1e-9);
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn recovers_inverse_of_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let gt = random_traj(&mut rng, 8);
            let s = random_similarity(&mut rng);
            let est = gt.transformed(&s);
            let got = horn_align(&est, &gt).unwrap();
            let inv = s.inverse();
            assert!((got.scale - inv.scale).abs() < 1e-9 * inv.scale.max(1.0));
            assert!((got.pose.rotation() - inv.pose.rotation()).amax() < 1e-9);
            assert!(
                (got.pose.translation() - inv.pose.translation()).amax()
                    < 1e-9 * inv.pose.translation().amax().max(1.0)
            );
        }
    }

    #[test]
    fn constant_offset_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_traj(&mut rng, 6);
        let shift = Similarity { scale: 1.0, pose: Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)) };
        assert!(ate_rmse(&gt.transformed(&shift), &gt).unwrap() < 1e-12);
    }

    #[test]
    fn hand_computed_rmse() {
        // residuals 0, 0.3, 0.4 m: sqrt((0 + 0.09 + 0.16) / 3)
        let gt = Trajectory::new(vec![
            (0, Pose::identity()),
            (1, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))),
            (2, Pose::from_translation(Vector3::new(0.0, 1.0, 0.0))),
        ])
        .unwrap();
        let est = Trajectory::new(vec![
            (0, Pose::identity()),
            (1, Pose::from_translation(Vector3::new(1.3, 0.0, 0.0))),
            (2, Pose::from_translation(Vector3::new(0.0, 1.0, 0.4))),
        ])
        .unwrap();
        let expect = ((0.0 + 0.09 + 0.16) / 3.0_f64).sqrt();
        assert!((position_rmse(&est, &gt).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.2887).abs() < 1e-4);
        // alignment can only lower it
        assert!(ate_rmse(&est, &gt).unwrap() <= expect + 1e-12);
    }

    #[test]
    fn aligned_rmse_with_balanced_residuals() {
        let corners = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];
        let gt: Vec<_> = corners
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (i as u64, Pose::from_translation(Vector3::new(x, y, 0.0))))
            .collect();
        // alternating out-of-plane offsets leave rotation and translation at
        // identity; the scale shrinks to 4 / 4.04 and the residuals follow
        let est: Vec<_> = corners
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                let dz = if i % 2 == 0 { 0.1 } else { -0.1 };
                (i as u64, Pose::from_translation(Vector3::new(x, y, dz)))
            })
            .collect();
        let (gt, est) = (Trajectory::new(gt).unwrap(), Trajectory::new(est).unwrap());
        let s = horn_align(&est, &gt).unwrap();
        let k = 4.0 / 4.04;
        assert!((s.scale - k).abs() < 1e-12 && s.pose.log().norm() < 1e-12);
        let expect = ((k - 1.0) * (k - 1.0) + k * k * 0.01_f64).sqrt();
        assert!((ate_rmse(&est, &gt).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn beats_random_similarity_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let gt = random_traj(&mut rng, 12);
        let s = random_similarity(&mut rng);
        let noisy: Vec<_> = gt
            .transformed(&s)
            .entries()
            .iter()
            .map(|(id, p)| {
                let t = p.translation() + Vector3::from_fn(|_, _| noise.sample(&mut rng));
                (*id, Pose::new(*p.rotation(), t).unwrap())
            })
            .collect();
        let est = Trajectory::new(noisy).unwrap();
        let best = horn_align(&est, &gt).unwrap();
        let best_res = alignment_residual(&best, &est, &gt);
        let inv = s.inverse();
        for _ in 0..10_000 {
            // candidates around the true inverse so the search is meaningful
            let dx = Pose::from_rotation_vector(
                Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
                Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
            );
            let cand = Similarity { scale: inv.scale * rng.random_range(0.95..1.05), pose: dx.compose(&inv.pose) };
            assert!(best_res <= alignment_residual(&cand, &est, &gt) + 1e-12);
        }
    }

    #[test]
    fn invariant_under_similarity_of_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let gt = random_traj(&mut rng, 10);
        let est = Trajectory::new(
            gt.entries()
                .iter()
                .map(|(id, p)| {
                    (
                        *id,
                        Pose::new(*p.rotation(), p.translation() + Vector3::from_fn(|_, _| noise.sample(&mut rng)))
                            .unwrap(),
                    )
                })
                .collect(),
        )
        .unwrap();
        let base = ate_rmse(&est, &gt).unwrap();
        for _ in 0..20 {
            let s = random_similarity(&mut rng);
            assert!((ate_rmse(&est.transformed(&s), &gt).unwrap() - base).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<_> = (0..5).map(|i| (i, Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0)))).collect();
        let line = Trajectory::new(line).unwrap();
        assert!(matches!(horn_align(&line, &line), Err(Error::AlignmentDegenerate(_))));
        let two = Trajectory::new(vec![(0, Pose::identity()), (1, Pose::from_translation(Vector3::x()))]).unwrap();
        assert!(matches!(ate_rmse(&two, &two), Err(Error::AlignmentDegenerate(_))));
        assert!(Trajectory::new(vec![]).is_err());
        assert!(Trajectory::new(vec![(1, Pose::identity()), (1, Pose::identity())]).is_err());
    }

    #[test]
    fn scale_error_of_scaled_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_traj(&mut rng, 6);
        let s = Similarity { scale: 1.07, pose: Pose::identity() };
        assert!((scale_error(&gt.transformed(&s), &gt).unwrap() - 0.07).abs() < 1e-9);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
