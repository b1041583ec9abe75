use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[scene]
room_count = 1
room_size_min = 3.0
room_size_max = 3.0
furniture_per_room = 1
[sensor]
width = 32
height = 32
[grid]
voxel_size = 0.1
[nbv]
render_width = 24
render_height = 24
[budget]
coarse_steps = 40
max_steps = 80
[refine]
rounds = 2
[eval]
gt_samples = 3000
orbit_views = 4
"#;

fn splatscout(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatscout")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let out = dir.join("run");
    let text = format!("output_dir = {:?}\n{SMALL}\n{extra}", out.display().to_string());
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn run_eval_and_render_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = splatscout(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("completion_ratio_pct") && stdout.contains("psnr_db"));

    let run_dir = tmp.path().join("run");
    let before = std::fs::read(run_dir.join("metrics_geom.json")).unwrap();
    let out = splatscout(&["eval", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(run_dir.join("metrics_geom.json")).unwrap(), before);

    let pose = r#"{"position": [1.5, 1.5, 1.2], "direction": [1.0, 0.3, 0.0]}"#;
    let renders = tmp.path().join("renders");
    let out = splatscout(&["render", "--run-dir", run_dir.to_str().unwrap(), "--pose", pose, "--out", renders.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(renders.join("color.png").exists() && renders.join("depth.png").exists());

    // a pose file with the full rotation/translation form
    let pose_file = tmp.path().join("pose.json");
    std::fs::write(&pose_file, r#"{"rotation": [[1,0,0],[0,0,-1],[0,1,0]], "translation": [-1.5, 1.2, -1.5]}"#).unwrap();
    let out = splatscout(&["render", "--run-dir", run_dir.to_str().unwrap(), "--pose", pose_file.to_str().unwrap(), "--exploration"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("renders/color.png").exists());
}

#[test]
fn exhausted_budget_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = splatscout(&["run", "--config", &cfg, "--out", tmp.path().join("short").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&cfg).unwrap().replace("max_steps = 80", "max_steps = 10").replace("coarse_steps = 40", "coarse_steps = 5");
    std::fs::write(&cfg, text).unwrap();
    let out = splatscout(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(tmp.path().join("run/metrics_geom.json").exists());
}

#[test]
fn config_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    for text in ["[grid]\nvoxel_size = 0.0", "not toml at all = = =", "[keyframes]\nk = 5"] {
        std::fs::write(&bad, text).unwrap();
        assert_eq!(splatscout(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(3), "{text}");
    }
    let missing = tmp.path().join("missing.toml");
    assert_eq!(splatscout(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn other_failures_are_distinct_from_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let code = splatscout(&["eval", "--run-dir", tmp.path().to_str().unwrap()]).status.code();
    assert!(code.is_some_and(|c| c != 0 && c != 2));
    let code = splatscout(&["render", "--run-dir", tmp.path().to_str().unwrap(), "--pose", "{nope"]).status.code();
    assert!(code.is_some_and(|c| c != 0 && c != 2));
}
