use nalgebra::DVector;

use nfvs::config::Config;
use nfvs::error::Error;
use nfvs::evaluation::*;
use nfvs::geometry::Pose;
use nfvs::nn::{Arch, ModelWeights};
use nfvs::sim::Rig;

const T: f64 = 1.0 / 30.0;

fn setup() -> (Rig, EpisodeConfig) {
    let cfg = Config::default();
    (Rig::from_config(&cfg).unwrap(), EpisodeConfig::from_config(&cfg).unwrap())
}

fn report(commands: Vec<DVector<f64>>, pe: Vec<f64>, oe: Vec<f64>) -> RolloutReport {
    RolloutReport {
        scene_seed: 0,
        success: true,
        converged_at: Some(pe.len() - 1),
        angular_speed: vec![0.0; commands.len()],
        camera_poses: vec![Pose::identity(); pe.len()],
        commands,
        pe,
        oe,
        failure: None,
    }
}

#[test]
fn zero_commands_have_zero_effort_and_smoothness() {
    let r = report(vec![DVector::zeros(7); 5], vec![0.3; 6], vec![0.1; 6]);
    let m = metrics(&r, T).unwrap();
    assert!(m.ce.iter().chain(&m.cs).all(|v| *v == 0.0));
    assert_eq!((m.ce_mean, m.cs_mean), (0.0, 0.0));
}

#[test]
fn constant_command_is_smooth_after_the_first_step() {
    let c = DVector::from_element(7, 0.2);
    let r = report(vec![c.clone(); 4], vec![0.3; 5], vec![0.1; 5]);
    let m = metrics(&r, T).unwrap();
    assert!((m.cs[0] - c.norm() / T).abs() < 1e-9);
    assert!(m.cs[1..].iter().all(|v| *v == 0.0));
    assert!(m.ce.iter().all(|v| (v - c.norm()).abs() < 1e-12));
}

#[test]
fn single_command_trace_is_too_short() {
    let r = report(vec![DVector::zeros(7)], vec![0.3; 2], vec![0.1; 2]);
    assert!(matches!(metrics(&r, T), Err(Error::TooShortTrace { len: 1, .. })));
}

#[test]
fn pose_errors_vanish_at_the_desired_pose() {
    let (rig, ec) = setup();
    let task = episode_task(&rig, episode_seed(3, 0), &ec).unwrap();
    let (pe, oe) = pose_errors(&task.desired, &task.desired).unwrap();
    assert!(pe == 0.0 && oe < 1e-7, "{pe} {oe}");
}

#[test]
fn quantiles_interpolate() {
    let v = [4.0, 1.0, 3.0, 2.0];
    assert_eq!(median(&v), 2.5);
    assert_eq!(quantile(&v, 0.25), 1.75);
    assert_eq!(quantile(&v, 0.0), 1.0);
    assert!(median(&[]).is_nan());
}

#[test]
fn summary_medians_skip_failed_episodes() {
    let ok = |pe: f64| {
        let mut r = report(vec![DVector::zeros(7); 3], vec![0.5, pe], vec![0.1, 0.1]);
        r.pe = vec![0.5, 0.4, 0.3, pe];
        r.oe = vec![0.1; 4];
        r
    };
    let mut failed = ok(0.9);
    failed.success = false;
    let row = summarize("x", &[ok(0.02), ok(0.04), failed], T);
    assert_eq!((row.episodes, row.successes), (3, 2));
    assert!((row.pe - 0.03).abs() < 1e-12);
    assert!((row.success_rate() - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn loosening_thresholds_never_lowers_success() {
    let (rig, ec) = setup();
    let ec = EpisodeConfig {
        duration: 4.0,
        stop_at_convergence: false,
        ..ec
    };
    let reports = run_episodes(&rig, Controller::Oracle(ControlMode::Vs), 6, 11, &ec).unwrap();
    let mut last = 0;
    for s in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let n = reports.iter().filter(|r| trace_success(r, 0.05 * s, 0.1 * s)).count();
        assert!(n >= last);
        last = n;
    }
}

#[test]
fn stored_poses_reproduce_the_error_trace() {
    let (rig, ec) = setup();
    let seed = episode_seed(5, 1);
    let r = rollout(&rig, Controller::Oracle(ControlMode::Vs), seed, &ec).unwrap();
    let task = episode_task(&rig, seed, &ec).unwrap();
    assert_eq!(r.camera_poses.len(), r.commands.len() + 1);
    for (k, p) in r.camera_poses.iter().enumerate() {
        let (pe, oe) = pose_errors(p, &task.desired).unwrap();
        assert_eq!((pe, oe), (r.pe[k], r.oe[k]));
    }
}

#[test]
fn stopping_at_convergence_freezes_the_final_error() {
    let (rig, ec) = setup();
    let seed = episode_seed(5, 2);
    let r = rollout(&rig, Controller::Oracle(ControlMode::Vs), seed, &ec).unwrap();
    let k = r.converged_at.expect("oracle converges");
    assert!(r.success);
    assert_eq!(r.pe.len(), k + 1);
    assert_eq!(*r.pe.last().unwrap(), r.pe[k]);

    let full = rollout(&rig, Controller::Oracle(ControlMode::Vs), seed, &EpisodeConfig { stop_at_convergence: false, ..ec.clone() }).unwrap();
    assert_eq!(full.commands.len(), ec.max_steps());
    assert_eq!(full.converged_at, Some(k));
    assert_eq!(&full.pe[..=k], &r.pe[..]);
}

#[test]
fn constant_feature_model_never_moves() {
    let (rig, ec) = setup();
    let k = &rig.intrinsics;
    let arch = Arch::perception(k.height, k.width, k.channels, 8, 1.5);
    let stub = ModelWeights::<f32>::zeros(&arch);
    let ec = EpisodeConfig { duration: 1.0, ..ec };
    for r in run_episodes(&rig, Controller::Neural(&stub, ControlMode::Vs), 3, 21, &ec).unwrap() {
        assert!(r.failure.is_none());
        assert!(r.commands.iter().all(|c| c.iter().all(|v| *v == 0.0)));
        assert!(r.pe.windows(2).all(|w| w[0] == w[1]));
        let start_ok = r.pe[0] < ec.pe_threshold && r.oe[0] < ec.oe_threshold;
        assert_eq!(r.success, start_ok);
    }
}

#[test]
fn nullspace_oracle_keeps_the_camera_orientation() {
    let (rig, ec) = setup();
    let reports = run_episodes(&rig, Controller::Oracle(ControlMode::Nullspace), 5, 31, &ec).unwrap();
    assert!(max_angular_speed(&reports) <= 1e-6);
    let pe: Vec<f64> = reports.iter().map(|r| *r.pe.last().unwrap()).collect();
    assert!(median(&pe) < ec.pe_threshold, "{pe:?}");
}

#[test]
fn benchmark_is_deterministic_and_matches_its_traces() {
    let (rig, ec) = setup();
    let controllers = vec![
        ("a".to_string(), Controller::Oracle(ControlMode::Vs)),
        ("b".to_string(), Controller::Oracle(ControlMode::Nullspace)),
    ];
    let one = benchmark(&rig, &controllers, 4, 41, &ec).unwrap();
    let two = benchmark(&rig, &controllers, 4, 41, &ec).unwrap();
    let rows = |r: &[(BenchmarkRow, Vec<RolloutReport>)]| summary_csv(&r.iter().map(|x| x.0.clone()).collect::<Vec<_>>());
    assert_eq!(rows(&one), rows(&two));
    assert_eq!(rows(&one).lines().count(), 3);

    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &one, T).unwrap();
    let trace = std::fs::read_to_string(dir.path().join("traces/a_000.csv")).unwrap();
    assert_eq!(trace.lines().count(), one[0].1[0].pe.len() + 1);
    assert_eq!(trace, trace_csv(&one[0].1[0], T));
}

fn band_rows(dir: &std::path::Path) -> Vec<Vec<String>> {
    quantile_bands(dir)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn bands_of_one_episode_equal_its_trace() {
    let (rig, ec) = setup();
    let r = rollout(&rig, Controller::Oracle(ControlMode::Vs), episode_seed(9, 0), &ec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x_000.csv"), trace_csv(&r, T)).unwrap();
    let rows = band_rows(dir.path());
    assert_eq!(rows.len(), r.pe.len());
    let m = metrics(&r, T).unwrap();
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 2 + 12);
        let v = |i: usize| row[i].parse::<f64>().unwrap();
        assert!((v(2) - r.pe[k]).abs() < 1e-8 && v(2) == v(3) && v(3) == v(4));
        assert!((v(5) - r.oe[k]).abs() < 1e-8);
        if k < m.ce.len() {
            assert!((v(9) - m.ce[k]).abs() < 1e-8);
            assert!((v(12) - m.cs[k]).abs() < 1e-6 * m.cs[k].max(1.0));
        } else {
            assert_eq!(row[9], "nan");
        }
    }
    std::fs::write(dir.path().join("x_001.csv"), trace_csv(&r, T)).unwrap();
    let dup = band_rows(dir.path());
    for (a, b) in rows.iter().zip(&dup) {
        assert_eq!(b[1], "2");
        assert_eq!(a[2..], b[2..]);
    }
}

#[test]
fn empty_trace_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(quantile_bands(dir.path()).is_err());
}
