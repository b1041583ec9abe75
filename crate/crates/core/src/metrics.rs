//! Geometric and photometric reconstruction metrics.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::error::{Error, Result};
use crate::gaussian::GaussianMap;
use crate::image::{ColorImage, DepthImage};
use crate::par::{self, Exec};
use crate::render::{self, RenderConfig};
use crate::scene::SceneModel;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomReport {
    pub accuracy_cm: f64,
    pub completion_cm: f64,
    pub completion_ratio_pct: f64,
    pub threshold_cm: f64,
    pub n_map_points: usize,
    pub n_gt_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub depth_l1_cm: f64,
    pub n_views: usize,
    /// Always null; kept so the schema matches reports that carry LPIPS.
    pub lpips: Option<f64>,
}

/// Distance from every query point to its nearest neighbour in `reference`.
pub fn nearest_distances(reference: &[Vector3<f64>], queries: &[Vector3<f64>], exec: Exec) -> Vec<f64> {
    let pts: Vec<[f64; 3]> = reference.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&pts);
    par::map_slice(exec, queries, |q| {
        tree.nearest_one::<SquaredEuclidean>(&[q.x, q.y, q.z]).distance.sqrt()
    })
}

/// Accuracy (map→GT), completion (GT→map) and completion ratio.
pub fn geometric_eval_points(
    map_points: &[Vector3<f64>],
    gt_points: &[Vector3<f64>],
    threshold_cm: f64,
    exec: Exec,
) -> Result<GeomReport> {
    if map_points.is_empty() {
        return Err(Error::EmptyPointSet("map"));
    }
    if gt_points.is_empty() {
        return Err(Error::EmptyPointSet("ground truth"));
    }
    let acc = nearest_distances(gt_points, map_points, exec);
    let comp = nearest_distances(map_points, gt_points, exec);
    let thr = threshold_cm / 100.0;
    let within = comp.iter().filter(|d| **d < thr).count();
    Ok(GeomReport {
        accuracy_cm: 100.0 * mean(&acc),
        completion_cm: 100.0 * mean(&comp),
        completion_ratio_pct: 100.0 * within as f64 / comp.len() as f64,
        threshold_cm,
        n_map_points: map_points.len(),
        n_gt_points: gt_points.len(),
    })
}

/// Geometric metrics of the splat centers with opacity above `min_opacity`.
pub fn geometric_eval(
    map: &GaussianMap,
    gt_points: &[Vector3<f64>],
    threshold_cm: f64,
    min_opacity: f64,
    exec: Exec,
) -> Result<GeomReport> {
    geometric_eval_points(&map.extract_points(min_opacity), gt_points, threshold_cm, exec)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mse(a: &ColorImage, b: &ColorImage) -> f64 {
    assert!(a.same_shape(b));
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
        .sum();
    s / (3 * a.len()) as f64
}

/// `10·log10(1/MSE)` for colors in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &ColorImage, b: &ColorImage) -> f64 {
    let m = mse(a, b);
    if m <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over "valid" window positions only.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let k = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, w, h, &k);
    let (mu_b, _, _) = filter_valid(b, w, h, &k);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), w, h, &k);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), w, h, &k);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), w, h, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / n as f64
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, data range 1) averaged over
/// the color channels. Only windows fully inside the image are used.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::InvalidArgument("SSIM images differ in shape".into()));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let mut s = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = b.data.iter().map(|p| p[ch]).collect();
        s += ssim_channel(&x, &y, a.width, a.height);
    }
    Ok(s / 3.0)
}

/// Mean absolute depth error in centimeters over pixels with observed depth.
pub fn depth_l1_cm(rendered: &DepthImage, observed: &DepthImage) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (r, o) in rendered.data.iter().zip(&observed.data) {
        if *o > 0.0 {
            s += (r - o).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * s / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub psnr_db: f64,
    pub ssim: f64,
    pub depth_l1_cm: f64,
}

/// Renders the map and the scene at each pose and averages the scores.
pub fn render_eval(
    map: &GaussianMap,
    poses: &[CameraPose],
    scene: &SceneModel,
    intr: &PinholeIntrinsics,
    cfg: &RenderConfig,
) -> Result<(RenderReport, Vec<ViewScores>)> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("no evaluation poses".into()));
    }
    let gs = map.gaussians();
    let views = poses
        .iter()
        .map(|pose| {
            let gt = scene.render_rgbd(pose, intr, cfg.exec);
            let out = render::render_gaussians(&gs, pose, intr, cfg);
            Ok(ViewScores {
                psnr_db: psnr(&out.color, &gt.color),
                ssim: ssim(&out.color, &gt.color)?,
                depth_l1_cm: depth_l1_cm(&out.depth, &gt.depth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = views.len() as f64;
    let report = RenderReport {
        psnr_db: views.iter().map(|v| v.psnr_db).sum::<f64>() / n,
        ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        depth_l1_cm: views.iter().map(|v| v.depth_l1_cm).sum::<f64>() / n,
        n_views: views.len(),
        lpips: None,
    };
    Ok((report, views))
}

/// Evaluation views: per room, a horizontal circle around the room center,
/// each camera looking inward at the center. Views are split as evenly as
/// possible between rooms; each circle shrinks until every camera keeps
/// `clearance` from the scene geometry.
pub fn orbit_poses(scene: &SceneModel, n: usize, height: f64, radius: f64, clearance: f64) -> Vec<CameraPose> {
    let rooms = scene.rooms.len().max(1);
    let mut out = Vec::with_capacity(n);
    for (ri, room) in scene.rooms.iter().enumerate() {
        let count = n / rooms + usize::from(ri < n % rooms);
        let c = room.center();
        let center = Vector3::new(c.x, c.y, height);
        let e = room.extent();
        let mut r = radius.min(0.4 * e.x.min(e.y));
        let ring = |r: f64| -> Vec<CameraPose> {
            (0..count)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / count as f64;
                    let p = center + Vector3::new(a.cos(), a.sin(), 0.0) * r;
                    CameraPose::look_at(p, center - p)
                })
                .collect()
        };
        while r > 0.05 && ring(r).iter().any(|p| scene.clearance(&p.position()) < clearance) {
            r *= 0.9;
        }
        out.extend(ring(r));
    }
    out
}
