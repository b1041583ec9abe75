mod common;

use nalgebra::Vector3;
use rand::Rng;
use splatscout::gaussian::Gaussian;
use splatscout::render::{self, RenderConfig};
use splatscout::{CameraPose, Exec, GaussianMap, PinholeIntrinsics};

fn max_diff(out: &render::RenderOutput, oracle: &common::Composite) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..oracle.depth.len() {
        for k in 0..3 {
            m = m.max((out.color.data[i][k] - oracle.color[i][k]).abs());
        }
        m = m.max((out.depth.data[i] - oracle.depth[i]).abs());
        m = m.max((out.silhouette.data[i] - oracle.silhouette[i]).abs());
    }
    m
}

#[test]
fn exact_mode_matches_brute_force_compositor() {
    let mut r = common::rng(11);
    for tile in [1, 5, 16, 64] {
        for _ in 0..10 {
            let w = r.gen_range(8..40);
            let h = r.gen_range(8..40);
            let intr = PinholeIntrinsics::from_fov(w, h, r.gen_range(50.0..110.0), r.gen_range(50.0..110.0)).unwrap();
            let pose = common::random_pose(&mut r);
            let n = r.gen_range(1..50);
            let gs = common::random_gaussians(&mut r, n, &pose, &intr, 0.05);
            let map = GaussianMap::from_gaussians(&gs).unwrap();
            let cfg = RenderConfig { tile_size: tile, ..RenderConfig::exact() };
            let out = render::render(&map, &pose, &intr, &cfg);
            let oracle = common::brute_render(&gs, &pose, &intr, cfg.support_sigmas, cfg.near_plane);
            assert!(max_diff(&out, &oracle) < 1e-10, "tile {tile}");
        }
    }
}

#[test]
fn early_termination_error_is_bounded() {
    let mut r = common::rng(12);
    let intr = PinholeIntrinsics::from_fov(32, 32, 90.0, 90.0).unwrap();
    for _ in 0..20 {
        let pose = common::random_pose(&mut r);
        let gs = common::random_gaussians(&mut r, 50, &pose, &intr, 0.5);
        let map = GaussianMap::from_gaussians(&gs).unwrap();
        let cfg = RenderConfig::default();
        let out = render::render(&map, &pose, &intr, &cfg);
        let oracle = common::brute_render(&gs, &pose, &intr, cfg.support_sigmas, cfg.near_plane);
        // whatever is left after termination carries at most ε_T of weight
        let scale = gs.iter().map(|g| (pose.rotation * g.center + pose.translation).z).fold(1.0, f64::max);
        assert!(max_diff(&out, &oracle) <= cfg.termination_eps * scale + 1e-12);
    }
}

#[test]
fn execution_modes_and_tile_sizes_agree() {
    let mut r = common::rng(13);
    let intr = PinholeIntrinsics::from_fov(48, 40, 90.0, 80.0).unwrap();
    let pose = common::random_pose(&mut r);
    let gs = common::random_gaussians(&mut r, 200, &pose, &intr, 0.1);
    let map = GaussianMap::from_gaussians(&gs).unwrap();
    let par = render::render(&map, &pose, &intr, &RenderConfig::default());
    let seq = render::render(&map, &pose, &intr, &RenderConfig::default().with_exec(Exec::Sequential));
    assert_eq!(par, seq);
    let exact = RenderConfig::exact();
    let a = render::render(&map, &pose, &intr, &RenderConfig { tile_size: 7, ..exact });
    let b = render::render(&map, &pose, &intr, &RenderConfig { tile_size: 16, ..exact });
    assert!(max_diff(&a, &common::Composite { color: b.color.data, depth: b.depth.data, silhouette: b.silhouette.data }) < 1e-12);
}

#[test]
fn compositing_order_is_by_depth() {
    let intr = PinholeIntrinsics::from_fov(9, 9, 90.0, 90.0).unwrap();
    let pose = CameraPose::identity();
    let near = Gaussian::new([0.8, 0.1, 0.2], Vector3::new(0.0, 0.0, 1.0), 1.0, 0.6);
    let far = Gaussian::new([0.1, 0.3, 0.9], Vector3::new(0.0, 0.0, 2.0), 2.0, 0.6);
    for gs in [vec![near, far], vec![far, near]] {
        let map = GaussianMap::from_gaussians(&gs).unwrap();
        let out = render::render(&map, &pose, &intr, &RenderConfig::exact());
        let c = out.color.get(4, 4);
        for (k, (a, b)) in [(0.8, 0.1), (0.1, 0.3), (0.2, 0.9)].into_iter().enumerate() {
            assert!((c[k] - (0.6 * a + 0.24 * b)).abs() < 1e-12);
        }
        assert!((out.silhouette.get(4, 4) - 0.84).abs() < 1e-12);
        assert!((out.depth.get(4, 4) - (0.6 * 1.0 + 0.24 * 2.0)).abs() < 1e-12);
    }
}

#[test]
fn missing_pixels_follow_threshold() {
    let intr = PinholeIntrinsics::from_fov(16, 16, 90.0, 90.0).unwrap();
    let g = Gaussian::new([0.5; 3], Vector3::new(0.0, 0.0, 2.0), 0.1, 0.8);
    let map = GaussianMap::from_gaussians(&[g]).unwrap();
    let s = render::render_silhouette(&map.gaussians(), &CameraPose::identity(), &intr, &RenderConfig::exact());
    for thr in [0.0, 0.01, 0.3, 0.79, 0.81] {
        let expect = s.data.iter().filter(|v| **v < thr).count();
        assert_eq!(render::count_missing_pixels(&s, thr), expect);
    }
    assert_eq!(render::count_missing_pixels(&s, 0.81), 256);
}
