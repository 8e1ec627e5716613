use super::*;

fn spec(seed: u64) -> SceneSpec {
    SceneSpec { seed, ..SceneSpec::default() }
}

fn noiseless(seed: u64) -> SceneSpec {
    SceneSpec { seed, noise: NoiseSpec::noiseless(), ..SceneSpec::default() }
}

#[test]
fn same_seed_same_output() {
    let (g1, d1) = simulate(&spec(5)).unwrap();
    let (g2, d2) = simulate(&spec(5)).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(d1.to_ndjson(), d2.to_ndjson());
    let (_, d3) = simulate(&spec(6)).unwrap();
    assert_ne!(d1.to_ndjson(), d3.to_ndjson());
}

#[test]
fn manhattan_normals_are_axis_related() {
    let gt = generate_scene(&SceneSpec { n_planes: 6, ..spec(1) }).unwrap();
    for a in &gt.planes {
        for b in &gt.planes {
            let c = a.plane.normal().dot(&b.plane.normal()).abs();
            assert!(c < 1e-12 || (c - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(gt.plane_relations.len(), 15);
}

#[test]
fn tilted_planes_have_no_exact_relations_except_floor_pairs() {
    let gt = generate_scene(&SceneSpec { manhattan: false, ..spec(2) }).unwrap();
    assert!(gt.plane_relations.len() < 6);
}

#[test]
fn supported_objects_are_tangent() {
    for seed in 0..20 {
        for manhattan in [true, false] {
            let gt = generate_scene(&SceneSpec { manhattan, n_quadrics: 4, ..spec(seed) }).unwrap();
            assert_eq!(gt.supports.len(), 4);
            assert!(max_support_residual(&gt) < 1e-9);
        }
    }
}

#[test]
fn point_split() {
    let gt = generate_scene(&spec(3)).unwrap();
    assert_eq!(gt.points.len(), 200);
    let on_planes: usize = gt.plane_points.values().map(|s| s.len()).sum();
    assert_eq!(on_planes, 140);
    for (id, tracks) in &gt.plane_points {
        let p = &gt.planes[*id as usize].plane;
        for t in tracks {
            assert!(p.signed_distance(&gt.points[t]).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(matches!(generate_scene(&SceneSpec { n_planes: 0, ..spec(0) }), Err(Error::InvalidSpec(_))));
    assert!(generate_scene(&SceneSpec { n_planes: 7, ..spec(0) }).is_err());
    let mut s = spec(0);
    s.noise.detection_dropout = 1.0;
    assert!(s.validate().is_err());
    s.noise.detection_dropout = 0.2;
    s.noise.pixel_sigma = -1.0;
    assert!(s.validate().is_err());
    assert!(SceneSpec::from_toml("n_points = 10\nbogus = 1\n").is_err());
}

#[test]
fn spec_toml_round_trip() {
    let s = spec(9);
    assert_eq!(SceneSpec::from_toml(&s.to_toml()).unwrap(), s);
    let partial = SceneSpec::from_toml("seed = 4\n[noise]\npixel_sigma = 0.5\n").unwrap();
    assert_eq!(partial.seed, 4);
    assert_eq!(partial.noise.pixel_sigma, 0.5);
    assert_eq!(partial.n_points, 200);
}

#[test]
fn observations_stay_in_image_and_in_front() {
    for seed in 0..5 {
        let s = spec(seed);
        let (gt, ds) = simulate(&s).unwrap();
        let cam = s.camera;
        for (f, pose) in ds.frames.iter().zip(&gt.poses) {
            for p in &f.points {
                assert!((0.0..=cam.width).contains(&p.u) && (0.0..=cam.height).contains(&p.v));
                assert!(pose.inverse_transform_point(&gt.points[&p.track]).z > MIN_DEPTH);
            }
            for o in &f.objects {
                let b = o.bbox;
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= cam.width && b.y_max <= cam.height);
                assert!(b.x_min < b.x_max && b.y_min < b.y_max);
                assert!((s.score_min..=1.0).contains(&b.score));
                let q = &gt.quadrics[o.gt_id.unwrap() as usize].quadric;
                assert!(pose.inverse_transform_point(&q.center()).z > MIN_DEPTH);
            }
            for p in &f.planes {
                // camera on the positive side
                assert!(p.plane.offset() > 0.0);
                assert!(p.inlier_tracks.len() >= MIN_PLANE_INLIERS);
            }
        }
    }
}

#[test]
fn scene_is_observed() {
    let (_, ds) = simulate(&spec(1)).unwrap();
    let n_planes: BTreeSet<u64> = ds.frames.iter().flat_map(|f| f.planes.iter().filter_map(|p| p.gt_id)).collect();
    let n_objects: BTreeSet<u64> = ds.frames.iter().flat_map(|f| f.objects.iter().filter_map(|p| p.gt_id)).collect();
    assert_eq!(n_planes.len(), 4);
    assert_eq!(n_objects.len(), 3);
    let mean_points = ds.frames.iter().map(|f| f.points.len()).sum::<usize>() as f64 / ds.frames.len() as f64;
    assert!(mean_points > 40.0, "{mean_points}");
}

#[test]
fn dropout_rate_is_binomial() {
    let base = spec(4);
    let count = |s: &SceneSpec| {
        let (_, ds) = simulate(s).unwrap();
        ds.frames.iter().map(|f| f.planes.len() + f.objects.len()).sum::<usize>()
    };
    let mut total_full = 0;
    let mut total_kept = 0;
    for seed in 0..10 {
        let mut s = SceneSpec { seed, ..base.clone() };
        total_full += count(&s);
        s.noise.detection_dropout = 0.5;
        total_kept += count(&s);
    }
    let n = total_full as f64;
    let sigma = (n * 0.25).sqrt();
    assert!((total_kept as f64 - 0.5 * n).abs() <= 3.0 * sigma, "{total_kept} of {total_full}");
}

#[test]
fn noiseless_observations_are_exact() {
    let s = noiseless(2);
    let (gt, ds) = simulate(&s).unwrap();
    for (f, pose) in ds.frames.iter().zip(&gt.poses) {
        for p in &f.points {
            let uv = s.camera.project(&pose.inverse_transform_point(&gt.points[&p.track])).unwrap();
            assert!((uv.x - p.u).abs() < 1e-9 && (uv.y - p.v).abs() < 1e-9);
        }
        for p in &f.planes {
            let truth = gt.planes[p.gt_id.unwrap() as usize].plane.transform(&pose.inverse());
            assert!(truth.local(&p.plane).norm() < 1e-12);
        }
        let rel =
            if f.keyframe.id == 0 { Pose::identity() } else { gt.poses[f.keyframe.id as usize - 1].between(pose) };
        assert!(rel.local(&f.keyframe.odom).norm() < 1e-9);
    }
}

#[test]
fn scale_drift_bias_shrinks_or_grows_odometry() {
    let mut s = noiseless(3);
    s.noise.scale_drift_bias = 0.01;
    let (gt, ds) = simulate(&s).unwrap();
    let last = ds.frames.len() - 1;
    let rel = gt.poses[last - 1].between(&gt.poses[last]);
    let ratio = ds.frames[last].keyframe.odom.translation().norm() / rel.translation().norm();
    assert!((ratio - (0.01 * last as f64).exp()).abs() < 1e-9);
}

/// Same JSON structure with numbers equal to 1e-12 (poses pass through exp/log).
fn assert_same_records(a: &str, b: &str) {
    fn same(x: &serde_json::Value, y: &serde_json::Value) -> bool {
        use serde_json::Value::*;
        match (x, y) {
            (Number(p), Number(q)) => (p.as_f64().unwrap() - q.as_f64().unwrap()).abs() < 1e-12,
            (Array(p), Array(q)) => p.len() == q.len() && p.iter().zip(q).all(|(p, q)| same(p, q)),
            (Object(p), Object(q)) => p.len() == q.len() && p.iter().all(|(k, v)| q.get(k).is_some_and(|w| same(v, w))),
            _ => x == y,
        }
    }
    let (la, lb): (Vec<_>, Vec<_>) = (a.lines().collect(), b.lines().collect());
    assert_eq!(la.len(), lb.len());
    for (x, y) in la.iter().zip(&lb) {
        let (x, y): (serde_json::Value, serde_json::Value) =
            (serde_json::from_str(x).unwrap(), serde_json::from_str(y).unwrap());
        assert!(same(&x, &y), "{x} vs {y}");
    }
}

#[test]
fn dataset_round_trip() {
    let (_, ds) = simulate(&spec(7)).unwrap();
    let text = ds.to_ndjson();
    let back = Dataset::from_ndjson(&text).unwrap();
    assert_same_records(&back.to_ndjson(), &text);
    assert!(text.starts_with("{\"kind\":\"header\",\"format_version\":1"));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = std::env::temp_dir().join(format!("semslam-sim-test-{}", std::process::id()));
    let (_, ds) = simulate(&spec(8)).unwrap();
    ds.write(&dir).unwrap();
    let back = Dataset::read(&dir).unwrap();
    assert_same_records(&back.to_ndjson(), &ds.to_ndjson());
    assert_eq!(back.clouds.len(), 3);
    for (name, pts) in &ds.clouds {
        assert_eq!(&back.clouds[name], pts);
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn malformed_lines_report_their_number() {
    let (_, ds) = simulate(&spec(1)).unwrap();
    let mut lines: Vec<String> = ds.to_ndjson().lines().map(String::from).collect();
    lines[5] = "{\"kind\":\"point_obs\",\"frame\":0".into();
    let err = Dataset::from_ndjson(&lines.join("\n")).unwrap_err();
    assert!(matches!(err, Error::Format { line: 6, .. }), "{err:?}");

    let err = Dataset::from_ndjson("{\"kind\":\"header\",\"format_version\":2}\n").unwrap_err();
    assert!(matches!(err, Error::Format { line: 1, .. }));
    let err =
        Dataset::from_ndjson("{\"kind\":\"camera\",\"fx\":1,\"fy\":1,\"cx\":0,\"cy\":0,\"width\":1,\"height\":1}\n")
            .unwrap_err();
    assert!(matches!(err, Error::Format { line: 1, .. }));
    let orphan = "{\"kind\":\"header\",\"format_version\":1}\n{\"kind\":\"point_obs\",\"frame\":3,\"track\":1,\"u\":1,\"v\":1}\n";
    assert!(matches!(Dataset::from_ndjson(orphan).unwrap_err(), Error::Format { line: 2, .. }));
}
