//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the code under test beyond plain data accessors,
//! so agreement between an oracle and the library means two separate
//! derivations of the same quantity agree.
#![allow(dead_code)]

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatscout::gaussian::Gaussian;
use splatscout::grid::{OccupancyGrid, VoxelState};
use splatscout::image::{ColorImage, DepthImage, Image};
use splatscout::scene::{Aabb, BoxPrimitive, PrimitiveKind};
use splatscout::{CameraPose, PinholeIntrinsics, RgbdFrame, SceneModel, SceneSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The seed-7 two-room scene used throughout the suite.
pub fn two_room_scene() -> SceneModel {
    let spec = SceneSpec { room_count: 2, room_size_min: 3.0, room_size_max: 4.0, ..Default::default() };
    SceneModel::generate(7, &spec).unwrap()
}

/// One flat wall facing −y at `y = 2`, 4 m wide and 3 m tall.
pub fn wall_scene() -> SceneModel {
    let aabb = Aabb::new([-2.0, 2.0, -1.5], [2.0, 2.2, 1.5]);
    let wall = BoxPrimitive { kind: PrimitiveKind::Wall, aabb, face_colors: [[0.7, 0.4, 0.2]; 6] };
    SceneModel { primitives: vec![wall], bounds: aabb, rooms: vec![Aabb::new([-2.0, 0.0, -1.5], [2.0, 2.0, 1.5])], seed: 0 }
}

pub fn random_rotation(r: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis.normalize() };
    Rotation3::from_scaled_axis(axis * r.gen_range(0.0..std::f64::consts::PI)).into_inner()
}

pub fn random_pose(r: &mut ChaCha8Rng) -> CameraPose {
    let t = Vector3::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
    CameraPose::new(random_rotation(r), t).unwrap()
}

/// Splats placed in front of `pose`, mostly inside its frustum. A few land
/// behind the camera or off-screen to exercise culling.
pub fn random_gaussians(
    r: &mut ChaCha8Rng,
    n: usize,
    pose: &CameraPose,
    intr: &PinholeIntrinsics,
    min_opacity: f64,
) -> Vec<Gaussian> {
    (0..n)
        .map(|_| {
            let z = if r.gen_bool(0.05) { -r.gen_range(0.1..1.0) } else { r.gen_range(0.5..4.0) };
            let u = r.gen_range(-0.2..1.2) * intr.width as f64;
            let v = r.gen_range(-0.2..1.2) * intr.height as f64;
            let pc = Vector3::new((u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z);
            let px_radius = r.gen_range(0.6..0.35 * intr.width as f64);
            let radius = px_radius * z.abs() / intr.fx;
            let color = [r.gen_range(0.05..0.95), r.gen_range(0.05..0.95), r.gen_range(0.05..0.95)];
            Gaussian::new(color, pose.camera_to_world(&pc), radius, r.gen_range(min_opacity..0.99))
        })
        .collect()
}

pub struct Composite {
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub silhouette: Vec<f64>,
}

/// Per-pixel front-to-back compositing over every splat, no tiling, no
/// early termination.
pub fn brute_render(gs: &[Gaussian], pose: &CameraPose, intr: &PinholeIntrinsics, support: f64, near: f64) -> Composite {
    let focal = 0.5 * (intr.fx + intr.fy);
    let mut proj: Vec<(f64, usize, f64, f64, f64)> = Vec::new();
    for (i, g) in gs.iter().enumerate() {
        let rot = pose.rotation;
        let pc = rot * g.center + pose.translation;
        if pc.z <= near {
            continue;
        }
        let u = intr.fx * pc.x / pc.z + intr.cx;
        let v = intr.fy * pc.y / pc.z + intr.cy;
        proj.push((pc.z, i, u, v, focal * g.radius / pc.z));
    }
    proj.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let n = intr.width * intr.height;
    let mut out = Composite { color: vec![[0.0; 3]; n], depth: vec![0.0; n], silhouette: vec![0.0; n] };
    for py in 0..intr.height {
        for px in 0..intr.width {
            let idx = py * intr.width + px;
            let mut t = 1.0;
            for &(z, i, u, v, r) in &proj {
                let d2 = (px as f64 - u).powi(2) + (py as f64 - v).powi(2);
                if d2.sqrt() > support * r {
                    continue;
                }
                let f = gs[i].opacity * (-d2 / (2.0 * r * r)).exp();
                let w = t * f;
                for k in 0..3 {
                    out.color[idx][k] += w * gs[i].color[k];
                }
                out.depth[idx] += w * z;
                out.silhouette[idx] += w;
                t *= 1.0 - f;
            }
        }
    }
    out
}

/// A frame with random colors and depths; a tenth of the pixels carry no depth.
pub fn random_frame(r: &mut ChaCha8Rng, pose: &CameraPose, intr: &PinholeIntrinsics) -> RgbdFrame {
    let n = intr.width * intr.height;
    let color: Vec<[f64; 3]> =
        (0..n).map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect();
    let depth: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.5..4.0) }).collect();
    RgbdFrame {
        pose: *pose,
        intrinsics: *intr,
        color: ColorImage::from_vec(intr.width, intr.height, color).unwrap(),
        depth: DepthImage::from_vec(intr.width, intr.height, depth).unwrap(),
        step_index: 0,
    }
}

/// Voxels crossed by `a→b`, found by splitting the segment at every grid
/// plane it crosses and locating each piece by its midpoint.
pub fn voxels_by_plane_crossings(grid: &OccupancyGrid, a: &Vector3<f64>, b: &Vector3<f64>) -> Vec<[usize; 3]> {
    let o = grid.origin();
    let vs = grid.voxel_size();
    let d = b - a;
    let mut ts = vec![0.0, 1.0];
    for k in 0..3 {
        if d[k] == 0.0 {
            continue;
        }
        let (lo, hi) = (a[k].min(b[k]), a[k].max(b[k]));
        let m0 = ((lo - o[k]) / vs).floor() as i64;
        let m1 = ((hi - o[k]) / vs).ceil() as i64;
        for m in m0..=m1 {
            let t = (o[k] + m as f64 * vs - a[k]) / d[k];
            if t > 0.0 && t < 1.0 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let dims = grid.dims();
    let mut out: Vec<[usize; 3]> = Vec::new();
    for w in ts.windows(2) {
        if w[1] - w[0] < 1e-12 {
            continue;
        }
        let p = a + d * (0.5 * (w[0] + w[1]));
        let c = [0, 1, 2].map(|k| ((p[k] - o[k]) / vs).floor() as i64);
        if (0..3).all(|k| c[k] >= 0 && (c[k] as usize) < dims[k]) {
            let v = c.map(|x| x as usize);
            if out.last() != Some(&v) {
                out.push(v);
            }
        }
    }
    out
}

/// Reference integration of one frame into a plain state array; returns the
/// voxels that went unknown → free, sorted.
pub fn integrate_oracle(
    grid: &OccupancyGrid,
    states: &mut [VoxelState],
    frame: &RgbdFrame,
    max_range: f64,
) -> Vec<usize> {
    let intr = &frame.intrinsics;
    let origin = frame.pose.position();
    let rt = frame.pose.rotation.transpose();
    let o = grid.origin();
    let vs = grid.voxel_size();
    let dims = grid.dims();
    let lin = |v: [usize; 3]| (v[2] * dims[1] + v[1]) * dims[0] + v[0];
    let mut free = std::collections::BTreeSet::new();
    let mut occ = std::collections::BTreeSet::new();
    for v in 0..intr.height {
        for u in 0..intr.width {
            let z = frame.depth.data[v * intr.width + u];
            if z <= 0.0 {
                continue;
            }
            let cam = Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
            let length = z * cam.norm();
            let dir = rt * cam.normalize();
            let hit = length <= max_range;
            let end = origin + dir * length.min(max_range);
            let hit_voxel = if hit {
                let p = origin + dir * (length + 1e-6);
                let c = [0, 1, 2].map(|k| ((p[k] - o[k]) / vs).floor() as i64);
                (0..3).all(|k| c[k] >= 0 && (c[k] as usize) < dims[k]).then(|| lin(c.map(|x| x as usize)))
            } else {
                None
            };
            for vx in voxels_by_plane_crossings(grid, &origin, &end) {
                let i = lin(vx);
                if Some(i) != hit_voxel {
                    free.insert(i);
                }
            }
            if let Some(i) = hit_voxel {
                occ.insert(i);
            }
        }
    }
    for &i in &occ {
        states[i] = VoxelState::Occupied;
    }
    let mut newly = Vec::new();
    for &i in &free {
        if states[i] == VoxelState::Unknown {
            states[i] = VoxelState::Free;
            newly.push(i);
        }
    }
    newly
}

/// Exhaustive check: every voxel of the grid within `r` of `c` must be free,
/// and the ball must not leave the grid.
pub fn free_region_exhaustive(grid: &OccupancyGrid, c: &Vector3<f64>, r: f64) -> bool {
    let o = grid.origin();
    let dims = grid.dims();
    let vs = grid.voxel_size();
    for k in 0..3 {
        if c[k] - r < o[k] || c[k] + r > o[k] + dims[k] as f64 * vs {
            return false;
        }
    }
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let lo = Vector3::new(o.x + x as f64 * vs, o.y + y as f64 * vs, o.z + z as f64 * vs);
                let mut d2 = 0.0;
                for k in 0..3 {
                    let q = c[k].clamp(lo[k], lo[k] + vs);
                    d2 += (c[k] - q).powi(2);
                }
                if d2.sqrt() <= r && grid.state_at([x, y, z]) != VoxelState::Free {
                    return false;
                }
            }
        }
    }
    true
}

pub fn brute_nearest(reference: &[Vector3<f64>], queries: &[Vector3<f64>]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| reference.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .collect()
}

/// SSIM straight from the definition: a full 2-D Gaussian window evaluated
/// at every valid position, averaged, then averaged over channels.
pub fn literal_ssim(a: &Image<[f64; 3]>, b: &Image<[f64; 3]>) -> f64 {
    let (w, h) = (a.width, a.height);
    let n = 11usize;
    let sigma: f64 = 1.5;
    let mut win = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = win[i][j] / total;
                        ma += wt * a.get(x0 + j, y0 + i)[ch];
                        mb += wt * b.get(x0 + j, y0 + i)[ch];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wt = win[i][j] / total;
                        let (x, y) = (a.get(x0 + j, y0 + i)[ch], b.get(x0 + j, y0 + i)[ch]);
                        va += wt * (x - ma) * (x - ma);
                        vb += wt * (y - mb) * (y - mb);
                        cov += wt * (x - ma) * (y - mb);
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / 3.0
}

/// Index maximizing `(1 − e^{l_i}/Σe^{l}) · (N_i / ΣN)`, which is the gain
/// with `softmax(ln N) = N / ΣN` written out; lowest index wins ties.
pub fn direct_gain_argmax(distances: &[f64], missing: &[f64]) -> usize {
    let sl: f64 = distances.iter().map(|l| l.exp()).sum();
    let n: Vec<f64> = missing.iter().map(|m| m.max(1.0)).collect();
    let sn: f64 = n.iter().sum();
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..distances.len() {
        let v = (1.0 - distances[i].exp() / sl) * (n[i] / sn);
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Everything that makes the loss non-smooth at the current parameters:
/// the gated pixel set, the sign of every residual and the set of splats
/// composited at each pixel. Central differences are only meaningful when
/// both probes share the signature of the base point.
fn loss_signature(
    map: &splatscout::GaussianMap,
    frame: &RgbdFrame,
    cfg: &splatscout::OptimConfig,
) -> (Vec<bool>, Vec<i8>, Vec<u32>) {
    let out = splatscout::render::render(map, &frame.pose, &frame.intrinsics, &cfg.render);
    let sign = |x: f64| if x > 0.0 { 1i8 } else if x < 0.0 { -1 } else { 0 };
    let mask: Vec<bool> = out.silhouette.data.iter().map(|s| *s > cfg.silhouette_threshold).collect();
    let mut signs = Vec::new();
    for i in 0..mask.len() {
        signs.push(sign(out.depth.data[i] - frame.depth.data[i]));
        for k in 0..3 {
            signs.push(sign(out.color.data[i][k] - frame.color.data[i][k]));
        }
    }
    (mask, signs, out.contributors.data)
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
}

/// Compares the analytic loss gradient with central differences (step `h`)
/// on every raw parameter of every splat. Relative error uses an absolute
/// floor of 1e-6 in the denominator.
pub fn check_gradients(
    map: &splatscout::GaussianMap,
    frame: &RgbdFrame,
    cfg: &splatscout::OptimConfig,
    h: f64,
) -> GradCheck {
    let analytic = splatscout::optim::loss(map, frame, cfg).unwrap().grad;
    let base_sig = loss_signature(map, frame, cfg);
    let mut res = GradCheck { checked: 0, skipped: 0, worst_rel: 0.0 };
    for i in 0..map.len() {
        for k in 0..splatscout::gaussian::PARAMS_PER_GAUSSIAN {
            let mut plus = map.clone();
            plus.raw_mut()[i][k] += h;
            let mut minus = map.clone();
            minus.raw_mut()[i][k] -= h;
            if loss_signature(&plus, frame, cfg) != base_sig || loss_signature(&minus, frame, cfg) != base_sig {
                res.skipped += 1;
                continue;
            }
            let lp = splatscout::optim::loss(&plus, frame, cfg).unwrap().total;
            let lm = splatscout::optim::loss(&minus, frame, cfg).unwrap().total;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            res.worst_rel = res.worst_rel.max(rel);
            res.checked += 1;
        }
    }
    res
}

/// Random position inside one of the rooms with at least `clearance` to every
/// solid.
pub fn random_free_point(scene: &SceneModel, r: &mut ChaCha8Rng, clearance: f64) -> Vector3<f64> {
    loop {
        let room = &scene.rooms[r.gen_range(0..scene.rooms.len())];
        let p = Vector3::from_fn(|k, _| r.gen_range(room.min[k]..room.max[k]));
        if scene.clearance(&p) >= clearance {
            return p;
        }
    }
}

/// Random free camera pose looking roughly horizontally.
pub fn random_free_pose(scene: &SceneModel, r: &mut ChaCha8Rng) -> CameraPose {
    let p = random_free_point(scene, r, 0.3);
    let yaw = r.gen_range(0.0..std::f64::consts::TAU);
    let pitch: f64 = r.gen_range(-0.5..0.5);
    let d = Vector3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), pitch.sin());
    CameraPose::look_at(p, d)
}

/// Grid after integrating `n` frames from random free poses.
pub fn explored_grid(scene: &SceneModel, voxel: f64, n: usize, seed: u64) -> OccupancyGrid {
    let mut grid = OccupancyGrid::covering(&scene.bounds, voxel, 2).unwrap();
    let intr = PinholeIntrinsics::from_fov(64, 64, 90.0, 90.0).unwrap();
    let mut r = rng(seed);
    for _ in 0..n {
        let frame = scene.render_rgbd(&random_free_pose(scene, &mut r), &intr, splatscout::Exec::Parallel);
        grid.integrate(&frame, 5.0);
    }
    grid
}

/// Connected components of voxel centers that hold a free ball of
/// `r + voxel/2`; a straight move between 6-neighbours of one component
/// keeps a ball of radius `r` inside free space.
pub fn reachable_components(grid: &OccupancyGrid, r: f64) -> Vec<Option<usize>> {
    let vs = grid.voxel_size();
    let dims = grid.dims();
    let ok: Vec<bool> = (0..grid.len())
        .map(|i| grid.state(i) == VoxelState::Free && grid.is_free_region(&grid.voxel_center(grid.unlinear(i)), r + 0.5 * vs))
        .collect();
    let mut comp = vec![None; grid.len()];
    let mut next = 0;
    for s in 0..grid.len() {
        if !ok[s] || comp[s].is_some() {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([s]);
        comp[s] = Some(next);
        while let Some(i) = queue.pop_front() {
            let v = grid.unlinear(i);
            for k in 0..3 {
                for d in [-1i64, 1] {
                    let c = v[k] as i64 + d;
                    if c < 0 || c as usize >= dims[k] {
                        continue;
                    }
                    let mut w = v;
                    w[k] = c as usize;
                    let j = grid.linear(w);
                    if ok[j] && comp[j].is_none() {
                        comp[j] = Some(next);
                        queue.push_back(j);
                    }
                }
            }
        }
        next += 1;
    }
    comp
}

/// Checks a pose sequence against both the grid and the true scene, sampling
/// each move every `spacing` meters.
pub fn replay_is_safe(
    grid: &OccupancyGrid,
    scene: &SceneModel,
    start: &Vector3<f64>,
    poses: &[CameraPose],
    r: f64,
    spacing: f64,
) -> bool {
    let mut prev = *start;
    for p in poses {
        let cur = p.position();
        if scene.segment_collides(&prev, &cur, r) {
            return false;
        }
        let n = ((cur - prev).norm() / spacing).ceil().max(1.0) as usize;
        for i in 0..=n {
            let q = prev + (cur - prev) * (i as f64 / n as f64);
            if !grid.is_free_region(&q, r) {
                return false;
            }
        }
        prev = cur;
    }
    true
}
