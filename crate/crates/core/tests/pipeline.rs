use std::fs;
use std::path::{Path, PathBuf};

use splatscout::pipeline::{self, artifacts, Pipeline, RunConfig, RunStage, TrajectoryRecord};
use splatscout::{CameraPose, Exec, Error};

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = dir.to_path_buf();
    cfg.scene.spec.room_count = 1;
    cfg.scene.spec.room_size_min = 3.0;
    cfg.scene.spec.room_size_max = 3.0;
    cfg.scene.spec.furniture_per_room = 1;
    cfg.sensor.width = 32;
    cfg.sensor.height = 32;
    cfg.grid.voxel_size = 0.1;
    cfg.nbv.render_width = 24;
    cfg.nbv.render_height = 24;
    cfg.budget.coarse_steps = 40;
    cfg.budget.max_steps = 80;
    cfg.refine.rounds = 3;
    cfg.eval.gt_samples = 5000;
    cfg.eval.orbit_views = 4;
    cfg.eval.threshold_cm = 20.0;
    cfg
}

fn read_trajectory(dir: &Path) -> Vec<TrajectoryRecord> {
    fs::read_to_string(dir.join(artifacts::TRAJECTORY))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn small_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = pipeline::run(&cfg).unwrap();
    for name in [
        artifacts::CONFIG,
        artifacts::SCENE,
        artifacts::TRAJECTORY,
        artifacts::EXPLORATION_MODEL,
        artifacts::REFINED_MODEL,
        artifacts::COARSE_MODEL,
        artifacts::GRID_BIN,
        artifacts::GRID_JSON,
        artifacts::KEYFRAMES,
        artifacts::POOL_HISTORY,
        artifacts::METRICS_GEOM,
        artifacts::METRICS_RENDER,
        artifacts::LOSS_TRACE,
        artifacts::SUMMARY,
    ] {
        assert!(tmp.path().join(name).exists(), "{name} missing");
    }
    assert_eq!(out.exit_code(), 0);
    assert_eq!(out.summary.coarse_exit_step, Some(40));
    assert!(out.geom.coarse_exit.is_some());
    assert_eq!(out.render.refined.n_views, 4);

    // the stored config reproduces the run's config
    assert_eq!(RunConfig::load(&tmp.path().join(artifacts::CONFIG)).unwrap(), cfg);

    // re-evaluation from disk gives the same numbers
    let (g, r) = pipeline::evaluate_run_dir(tmp.path()).unwrap();
    assert_eq!(g, out.geom);
    assert_eq!(r, out.render);

    let traj = read_trajectory(tmp.path());
    assert_eq!(traj.len(), out.summary.steps);
    assert!(traj.iter().enumerate().all(|(i, t)| t.step == i));
    assert_eq!(traj[40].stage, RunStage::Fine);
    assert!(traj[..40].iter().all(|t| t.stage == RunStage::Coarse));

    let pose = CameraPose::look_at(
        nalgebra::Vector3::from(traj[5].position),
        nalgebra::Vector3::new(1.0, 0.2, 0.0),
    );
    let img = pipeline::render_from_run_dir(tmp.path(), &pose, false).unwrap();
    assert_eq!((img.color.width, img.color.height), (32, 32));
}

#[test]
fn trajectory_respects_motion_limits_and_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    pipeline::run(&cfg).unwrap();
    let scene = cfg.build_scene().unwrap();
    let traj = read_trajectory(tmp.path());
    for w in traj.windows(2) {
        let (a, b) = (nalgebra::Vector3::from(w[0].position), nalgebra::Vector3::from(w[1].position));
        assert!((b - a).norm() <= cfg.path.max_step_length + 1e-9);
        assert!(!scene.segment_collides(&a, &b, cfg.path.agent_radius));
        let q = |o: [f64; 4]| nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(o[0], o[1], o[2], o[3]));
        assert!(q(w[0].orientation).angle_to(&q(w[1].orientation)) <= cfg.path.max_angular_step() + 1e-9);
    }
}

#[test]
fn zero_refinement_rounds_keep_the_exploration_model() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.refine.rounds = 0;
    let out = pipeline::run(&cfg).unwrap();
    let a = fs::read(tmp.path().join(artifacts::EXPLORATION_MODEL)).unwrap();
    let b = fs::read(tmp.path().join(artifacts::REFINED_MODEL)).unwrap();
    assert_eq!(a, b);
    assert_eq!(out.geom.exploration, out.geom.refined);
    assert_eq!(out.render.exploration, out.render.refined);
}

fn run_into(cfg: &RunConfig, dir: PathBuf) -> PathBuf {
    let cfg = RunConfig { output_dir: dir.clone(), ..cfg.clone() };
    pipeline::run(&cfg).unwrap();
    dir
}

#[test]
fn runs_are_deterministic_across_repeats_and_execution_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = run_into(&cfg, tmp.path().join("a"));
    let b = run_into(&cfg, tmp.path().join("b"));
    let seq = RunConfig { exec: Exec::Sequential, ..cfg.clone() };
    let c = run_into(&seq, tmp.path().join("c"));
    for name in [
        artifacts::TRAJECTORY,
        artifacts::METRICS_GEOM,
        artifacts::METRICS_RENDER,
        artifacts::REFINED_MODEL,
        artifacts::GRID_BIN,
        artifacts::LOSS_TRACE,
    ] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name} differs between repeats");
        assert_eq!(x, fs::read(c.join(name)).unwrap(), "{name} differs between execution modes");
    }
    let d = run_into(&RunConfig { seed: 5, ..cfg }, tmp.path().join("d"));
    assert_ne!(fs::read(a.join(artifacts::LOSS_TRACE)).unwrap(), fs::read(d.join(artifacts::LOSS_TRACE)).unwrap());
}

#[test]
fn exhausted_budget_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.budget.coarse_steps = 5;
    cfg.budget.max_steps = 12;
    let out = pipeline::run(&cfg).unwrap();
    assert!(out.summary.budget_exhausted);
    assert_eq!(out.summary.steps, 12);
    assert_eq!(out.exit_code(), 2);
    assert!(out.geom.budget_exhausted && out.render.budget_exhausted);
}

#[test]
fn stepping_by_hand_matches_explore() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut a = Pipeline::new(cfg.clone()).unwrap();
    a.explore().unwrap();
    let mut b = Pipeline::new(cfg).unwrap();
    let mut keyframes = 0;
    while b.is_exploring() {
        keyframes += usize::from(b.step().unwrap().keyframe);
    }
    assert_eq!(a.state.trajectory, b.state.trajectory);
    assert_eq!(a.state.map.raw(), b.state.map.raw());
    assert_eq!(keyframes, b.state.db.len());
}

#[test]
fn example_config_lists_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
    let round = RunConfig::from_toml(&RunConfig::default().to_toml().unwrap()).unwrap();
    assert_eq!(round, RunConfig::default());
}

#[test]
fn acceptance_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!((cfg.sensor.width, cfg.sensor.height), (64, 64));
    assert_eq!(cfg.grid.voxel_size, 0.1);
    assert_eq!(cfg.budget.max_steps, 1500);
}

#[test]
fn invalid_configs_are_config_errors() {
    for text in [
        "seed = \"zero\"",
        "[grid]\nvoxel_size = -1.0",
        "[keyframes]\nk = 3",
        "[sensor]\nwidth = 0",
        "[budget]\nmax_steps = 0",
        "[path]\nagent_radius = 0.5",
        "[optim]\nlr_color = -1.0",
        "[scene]\nroom_count = 0",
    ] {
        assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
    }
    assert!(matches!(RunConfig::load(Path::new("/nonexistent/cfg.toml")), Err(Error::Config(_))));
}
