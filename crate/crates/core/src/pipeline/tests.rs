use super::*;
use crate::eval::{ate_rmse, Trajectory};
use crate::sim::{simulate, NoiseSpec, SceneSpec};

fn run(spec: &SceneSpec, mode: Mode) -> (RunOutput, f64) {
    let (_, ds) = simulate(spec).unwrap();
    let out = run_pipeline(&ds, &RunConfig::with_mode(mode)).unwrap();
    let gt = Trajectory::new(ds.gt_trajectory().unwrap()).unwrap();
    let ate = ate_rmse(&out.solution.trajectory().unwrap(), &gt).unwrap();
    (out, ate)
}

#[test]
fn mode_names_round_trip() {
    for m in Mode::ALL {
        assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        assert_eq!(m.to_string(), m.as_str());
    }
    assert!("PPO".parse::<Mode>().is_err());
}

#[test]
fn config_accepts_dotted_keys() {
    let cfg = RunConfig::from_toml("mode = \"PP+M\"\nassoc.th_high = 12\nnoise.pixel_sigma = 2.0\n").unwrap();
    assert_eq!(cfg.mode, Mode::PPM);
    assert_eq!(cfg.assoc.th_high, 12);
    assert_eq!(cfg.noise.pixel_sigma, 2.0);
    assert_eq!(cfg.batch_every, 5);
    assert!(RunConfig::from_toml("unknown = 1\n").is_err());
    assert!(RunConfig::from_toml("batch_every = 0\n").is_err());
}

#[test]
fn noiseless_run_recovers_trajectory() {
    let spec = SceneSpec { seed: 1, noise: NoiseSpec::noiseless(), ..SceneSpec::default() };
    for mode in Mode::ALL {
        let (out, ate) = run(&spec, mode);
        eprintln!("{mode}: ate {ate:.3e} {:?}", out.report);
        assert!(out.failure.is_none());
        assert!(ate < 1e-6, "{mode}: {ate}");
    }
}

#[test]
fn modes_only_create_their_factor_kinds() {
    let spec = SceneSpec { seed: 2, ..SceneSpec::default() };
    for mode in Mode::ALL {
        let (out, _) = run(&spec, mode);
        let allowed = mode_factor_kinds(mode);
        for kind in out.report.factor_counts.keys() {
            assert!(allowed.contains(kind.as_str()), "{mode} created {kind}");
        }
    }
}

#[test]
fn noisy_run_per_mode() {
    let spec = SceneSpec { seed: 3, ..SceneSpec::default() };
    for mode in Mode::ALL {
        let (out, ate) = run(&spec, mode);
        eprintln!("{mode}: ate {:.2} cm, {:?}", ate * 100.0, out.report);
        assert!(out.report.converged);
    }
}

#[test]
fn solution_round_trip_and_exports() {
    let spec = SceneSpec { seed: 4, ..SceneSpec::default() };
    let (out, _) = run(&spec, Mode::PPOMS);
    let text = out.solution.to_ndjson();
    let back = Solution::from_ndjson(&text).unwrap();
    assert_eq!(back.poses.len(), out.solution.poses.len());
    assert_eq!(back.points, out.solution.points);
    assert_eq!(back.quadrics.len(), out.solution.quadrics.len());
    for ((_, a), (_, b)) in back.poses.iter().zip(&out.solution.poses) {
        assert!(a.local(b).norm() < 1e-12);
    }
    let ply = map_mesh_ply(&out.solution);
    let nv: usize = ply.lines().find_map(|l| l.strip_prefix("element vertex ")).unwrap().parse().unwrap();
    let nf: usize = ply.lines().find_map(|l| l.strip_prefix("element face ")).unwrap().parse().unwrap();
    let body: Vec<&str> = ply.lines().skip_while(|l| *l != "end_header").skip(1).collect();
    assert_eq!(body.len(), nv + nf);
    assert!(body[..nv].iter().all(|l| l.split(' ').count() == 6));
    assert!(body[nv..].iter().all(|l| l.starts_with("3 ")));
    let records = map_records(&out.solution);
    assert_eq!(
        records.lines().count(),
        out.solution.points.len() + out.solution.planes.len() + out.solution.quadrics.len()
    );
}

#[test]
fn runs_are_deterministic() {
    let spec = SceneSpec { seed: 5, ..SceneSpec::default() };
    let (a, _) = run(&spec, Mode::PPOMS);
    let (b, _) = run(&spec, Mode::PPOMS);
    assert_eq!(a.solution.to_ndjson(), b.solution.to_ndjson());
}
