use semslam_core::geometry::quadric::ellipse_dual_conic;
use semslam_web_demo::*;

#[test]
fn sphere_projects_to_centered_circle() {
    // unit sphere 5 m away, f = 500: tangent cone half-angle asin(1/5), radius 500/sqrt(24)
    let p = project(1.0, 1.0, 1.0, 0.3, 0.7, 5.0, 0.0).unwrap();
    let r = 500.0 / 24f64.sqrt();
    assert!((p.ellipse.cx - 320.0).abs() < 1e-9 && (p.ellipse.cy - 240.0).abs() < 1e-9);
    assert!((p.ellipse.a - r).abs() < 1e-9 && (p.ellipse.b - r).abs() < 1e-9);
    let expect = [320.0 - r, 240.0 - r, 320.0 + r, 240.0 + r];
    for (got, want) in p.bbox.iter().zip(expect) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn ellipse_parameters_round_trip() {
    let c = ellipse_dual_conic(100.0, 80.0, 40.0, 15.0, 0.4);
    let e = Ellipse::from_dual_conic(&c).unwrap();
    assert!((e.cx - 100.0).abs() < 1e-9 && (e.cy - 80.0).abs() < 1e-9);
    assert!((e.a - 40.0).abs() < 1e-9 && (e.b - 15.0).abs() < 1e-9);
    // axis direction is defined up to sign
    assert!((e.angle - 0.4).sin().abs() < 1e-9);
}

#[test]
fn overlap_matches_area_arithmetic() {
    let o = overlap([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]).unwrap();
    assert!((o.iou - 1.0 / 7.0).abs() < 1e-15);
    assert!((o.residual - 6.0 / 7.0).abs() < 1e-15);
    assert!(overlap([0.0, 0.0, -1.0, 2.0], [0.0, 0.0, 1.0, 1.0]).is_err());
}

#[test]
fn enclosing_ellipsoid_contains_cloud_and_is_seeded() {
    let a = enclosing(200, 1.0, 0.5, 0.25, 0.6, 9).unwrap();
    let b = enclosing(200, 1.0, 0.5, 0.25, 0.6, 9).unwrap();
    assert_eq!(a.points, b.points);
    assert!(a.max_level <= 1.0 + 1e-6);
    assert!(a.radii[0] >= a.radii[1] && a.radii[1] >= a.radii[2]);
    // the shadow of an ellipsoid is at least as wide as its widest horizontal section
    assert!(a.shadow.a >= 0.9 && a.shadow.a <= a.radii[0] + 1e-9);
}

#[test]
fn wrappers_report_errors_as_json() {
    let ok: serde_json::Value =
        serde_json::from_str(&box_overlap_js(vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 0.0, 1.0, 1.0])).unwrap();
    assert_eq!(ok["ok"]["iou"], 1.0);
    let err: serde_json::Value = serde_json::from_str(&box_overlap_js(vec![0.0], vec![])).unwrap();
    assert!(err["error"].is_string());
    // camera inside the ellipsoid
    let err: serde_json::Value =
        serde_json::from_str(&project_ellipsoid_js(3.0, 3.0, 3.0, 0.0, 0.0, 2.0, 0.0)).unwrap();
    assert!(err["error"].is_string());
    let fit: serde_json::Value = serde_json::from_str(&enclosing_ellipsoid_js(3, 1.0, 1.0, 1.0, 0.0, 1)).unwrap();
    assert!(fit["error"].is_string());
}
