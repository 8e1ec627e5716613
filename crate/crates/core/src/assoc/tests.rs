use super::*;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive minimum over all maximum-cardinality injections.
fn brute_force(cost: &DMatrix<f64>) -> f64 {
    fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, left: usize, acc: f64, best: &mut f64) {
        let (n, m) = cost.shape();
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if row == n {
            return;
        }
        // rows may be skipped only when there are more rows than columns
        if n - row > left {
            rec(cost, row + 1, used, left, acc, best);
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, left - 1, acc + cost[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let (n, m) = cost.shape();
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; m], n.min(m), 0.0, &mut best);
    best
}

fn check_injection(assign: &[Option<usize>], n: usize, m: usize) {
    let cols: Vec<usize> = assign.iter().flatten().copied().collect();
    let unique: BTreeSet<usize> = cols.iter().copied().collect();
    assert_eq!(cols.len(), unique.len());
    assert_eq!(cols.len(), n.min(m));
    assert!(cols.iter().all(|&j| j < m));
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let cost = if trial % 2 == 0 {
            DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..10.0))
        } else {
            // integer costs exercise ties
            DMatrix::from_fn(n, m, |_, _| rng.random_range(0..5) as f64)
        };
        let assign = hungarian(&cost);
        check_injection(&assign, n, m);
        if (assignment_cost(&cost, &assign) - brute_force(&cost)).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn hungarian_square_5x5_against_all_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let p = DMatrix::from_fn(5, 5, |_, _| rng.random_range(0..20) as f64);
        let k = p.max();
        let cost = p.map(|x| k - x);
        let assign = hungarian(&cost);
        assert!((assignment_cost(&cost, &assign) - brute_force(&cost)).abs() < 1e-9);
    }
}

#[test]
fn hungarian_empty() {
    assert!(hungarian(&DMatrix::zeros(0, 3)).is_empty());
    assert_eq!(hungarian(&DMatrix::zeros(2, 0)), vec![None, None]);
}

#[test]
fn no_candidates_means_all_new() {
    let cfg = AssocConfig::default();
    let d = match_objects(&[vec![], vec![]], &[], &cfg).unwrap();
    assert_eq!(d, vec![Decision::New, Decision::New]);
    assert!(match_objects(&[], &[7], &cfg).unwrap().is_empty());
}

#[test]
fn overlap_thresholds_are_inclusive() {
    let cfg = AssocConfig::default();
    let d = |p: usize| match_objects(&[vec![p]], &[42], &cfg).unwrap()[0];
    assert_eq!(d(cfg.th_high), Decision::Matched(42));
    assert_eq!(d(cfg.th_high - 1), Decision::Ignored);
    assert_eq!(d(cfg.th_low), Decision::New);
    assert_eq!(d(cfg.th_low + 1), Decision::Ignored);
    assert_eq!(d(0), Decision::New);
}

#[test]
fn surplus_detections_become_new() {
    let cfg = AssocConfig::default();
    let d = match_objects(&[vec![20], vec![15]], &[1], &cfg).unwrap();
    assert_eq!(d, vec![Decision::Matched(1), Decision::New]);
    assert!(match_objects(&[vec![1, 2]], &[1], &cfg).is_err());
}

#[test]
fn object_matching_is_a_partial_injection_and_order_free() {
    let cfg = AssocConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..300 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(1..=6);
        let p: Vec<Vec<usize>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0..16)).collect()).collect();
        let distinct: BTreeSet<&Vec<usize>> = p.iter().collect();
        if distinct.len() < n {
            continue;
        }
        let ids: Vec<u64> = (0..m as u64).map(|j| 100 + j).collect();
        let d = match_objects(&p, &ids, &cfg).unwrap();
        let matched: Vec<u64> =
            d.iter().filter_map(|x| if let Decision::Matched(id) = x { Some(*id) } else { None }).collect();
        let unique: BTreeSet<u64> = matched.iter().copied().collect();
        assert_eq!(matched.len(), unique.len());

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<usize>> = perm.iter().map(|&i| p[i].clone()).collect();
        let ds = match_objects(&shuffled, &ids, &cfg).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(ds[k], d[i]);
        }
    }
}

fn plane_set(ids: impl IntoIterator<Item = u64>) -> BTreeSet<u64> {
    ids.into_iter().collect()
}

#[test]
fn identical_plane_with_enough_overlap_matches() {
    let cfg = AssocConfig::default();
    let cam = Pose::from_rotation_vector(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.5, 1.0, -0.3));
    let world = Plane::new(0.0, 0.0, 1.0, -0.75).unwrap();
    let tracks = plane_set(0..(cfg.th_h as u64 + 1));
    let det = PlaneDetection { plane: world.transform(&cam.inverse()), inliers: tracks.clone() };
    let map = [MapPlane { id: 5, plane: world, tracks }];
    assert_eq!(match_planes(&det, &map, &cam, &cfg), Decision::Matched(5));
    // overlap of exactly th_H is not enough
    let det2 = PlaneDetection { inliers: plane_set(0..cfg.th_h as u64), ..det.clone() };
    assert_eq!(match_planes(&det2, &map, &cam, &cfg), Decision::Ignored);
    // opposite orientation still matches
    let det3 = PlaneDetection { plane: det.plane.negated(), ..det.clone() };
    assert_eq!(match_planes(&det3, &map, &cam, &cfg), Decision::Matched(5));
}

#[test]
fn unrelated_plane_without_overlap_is_new() {
    let cfg = AssocConfig::default();
    let map = [MapPlane { id: 1, plane: Plane::new(0.0, 0.0, 1.0, 0.0).unwrap(), tracks: plane_set(0..20) }];
    let det = PlaneDetection { plane: Plane::new(1.0, 0.0, 0.0, -2.0).unwrap(), inliers: plane_set(100..130) };
    assert_eq!(match_planes(&det, &map, &Pose::identity(), &cfg), Decision::New);
    assert_eq!(match_planes(&det, &[], &Pose::identity(), &cfg), Decision::New);
}

#[test]
fn intermediate_overlap_is_ignored() {
    let cfg = AssocConfig::default();
    let map = [MapPlane { id: 1, plane: Plane::new(0.0, 0.0, 1.0, 0.0).unwrap(), tracks: plane_set(0..20) }];
    let det = PlaneDetection { plane: Plane::new(1.0, 0.0, 0.0, -2.0).unwrap(), inliers: plane_set(0..5) };
    assert_eq!(match_planes(&det, &map, &Pose::identity(), &cfg), Decision::Ignored);
    // geometric agreement without keypoints is not a new plane either
    let det = PlaneDetection { plane: Plane::new(0.0, 0.0, 1.0, 0.05).unwrap(), inliers: BTreeSet::new() };
    assert_eq!(match_planes(&det, &map, &Pose::identity(), &cfg), Decision::Ignored);
}

#[test]
fn largest_overlap_wins() {
    let cfg = AssocConfig::default();
    let p = Plane::new(0.0, 0.0, 1.0, 0.0).unwrap();
    let map = [
        MapPlane { id: 1, plane: p, tracks: plane_set(0..12) },
        MapPlane { id: 2, plane: Plane::new(0.0, 0.02, 1.0, 0.03).unwrap(), tracks: plane_set(0..30) },
    ];
    let det = PlaneDetection { plane: p, inliers: plane_set(0..30) };
    assert_eq!(match_planes(&det, &map, &Pose::identity(), &cfg), Decision::Matched(2));
}

#[test]
fn geometric_test_is_symmetric() {
    let cfg = AssocConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..2000 {
        let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let a = Plane::new(n.x, n.y, n.z, rng.random_range(-1.0..1.0)).unwrap();
        let dn = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let m = a.normal() + dn;
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let b = Plane::new(
            sign * m.x,
            sign * m.y,
            sign * m.z,
            sign * (a.offset() + rng.random_range(-0.2..0.2)) * m.norm(),
        )
        .unwrap();
        assert_eq!(geometric_match(&a, &b, &cfg).is_some(), geometric_match(&b, &a, &cfg).is_some());
    }
}

#[test]
fn point_to_plane_association() {
    let pi = Plane::new(0.0, 0.0, 1.0, -1.0).unwrap();
    let tol = 0.05;
    let points = vec![
        (1, Vector3::new(0.3, 0.2, 1.0)),
        (2, Vector3::new(-0.4, 0.1, 1.0)),
        (3, Vector3::new(0.0, 0.0, 1.0 + 2.0 * tol)),
    ];
    let mask = plane_set([1, 3]);
    assert_eq!(associate_points_to_plane(&points, &mask, &pi, tol), vec![1]);
}

fn exact_det(q: &DualQuadric, cam: &Camera, pose: &Pose) -> (BBox, Pose) {
    (predicted_bbox(q, cam, pose).unwrap().unwrap(), *pose)
}

#[test]
fn two_view_initialization() {
    let cam = Camera::default();
    let q = DualQuadric::sphere(Vector3::new(0.0, 0.0, 5.0), 1.0).unwrap();
    let poses = [Pose::identity(), Pose::from_translation(Vector3::new(0.5, 0.0, 0.0))];
    let dets: Vec<_> = poses.iter().map(|p| exact_det(&q, &cam, p)).collect();
    let init = init_quadric(&dets, &cam, None).unwrap();
    assert!((init.center() - q.center()).norm() < 0.5);
    for (b, p) in &dets {
        assert!(predicted_bbox(&init, &cam, p).unwrap().unwrap().iou(b) > 0.3);
    }
}

#[test]
fn single_view_with_depth_hint() {
    let cam = Camera::default();
    let q = DualQuadric::sphere(Vector3::new(0.3, -0.2, 5.0), 1.0).unwrap();
    let dets = [exact_det(&q, &cam, &Pose::identity())];
    let init = init_quadric(&dets, &cam, Some(5.0)).unwrap();
    assert!((init.center() - q.center()).norm() < 0.2);
}

#[test]
fn single_view_without_depth_cannot_initialize() {
    let cam = Camera::default();
    let q = DualQuadric::sphere(Vector3::new(0.0, 0.0, 5.0), 1.0).unwrap();
    let dets = [exact_det(&q, &cam, &Pose::identity())];
    assert!(matches!(init_quadric(&dets, &cam, None), Err(Error::CannotInitialize(_))));
    // two views without baseline are no better
    let dets = [dets[0], dets[0]];
    assert!(matches!(init_quadric(&dets, &cam, None), Err(Error::CannotInitialize(_))));
    assert!(matches!(init_quadric(&[], &cam, Some(3.0)), Err(Error::CannotInitialize(_))));
}

#[test]
fn in_front_gate() {
    let q = DualQuadric::sphere(Vector3::new(0.0, 0.0, 2.0), 0.5).unwrap();
    assert!(quadric_in_front(&q, &Pose::identity()));
    let behind = Pose::from_translation(Vector3::new(0.0, 0.0, 3.0));
    assert!(!quadric_in_front(&q, &behind));
}

#[test]
fn config_validation() {
    assert!(AssocConfig::default().validate().is_ok());
    let bad = AssocConfig { th_l: 9, ..AssocConfig::default() };
    assert!(bad.validate().is_err());
    let bad = AssocConfig { score_min: 1.5, ..AssocConfig::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn triangulates_exact_point() {
    let cam = Camera::default();
    let x = Vector3::new(0.3, -0.2, 4.0);
    let poses = [
        Pose::identity(),
        Pose::from_translation(Vector3::new(0.4, 0.1, 0.0)),
        Pose::from_rotation_vector(Vector3::new(0.0, 0.1, 0.0), Vector3::new(-0.3, 0.0, 0.2)),
    ];
    let views: Vec<_> = poses.iter().map(|p| (*p, cam.project(&p.inverse_transform_point(&x)).unwrap())).collect();
    assert!((triangulate_point(&views, &cam).unwrap() - x).norm() < 1e-9);
    assert!(triangulate_point(&views[..1], &cam).is_none());
    let centers: Vec<_> = poses.iter().map(|p| *p.translation()).collect();
    assert!(parallax(&x, &centers) > 0.05);
}
