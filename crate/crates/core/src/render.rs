//! Tile-based splat rasterizer with an analytic backward pass.
//!
//! Splats are projected with the pinhole model, sorted front to back by
//! camera-frame depth, binned into square tiles and alpha-composited per
//! pixel. The per-pixel influence of splat `i` is
//! `f_i(p) = o_i · exp(−‖p − μ_i‖² / (2 r_i²))` inside a disc of
//! `support_sigmas · r_i` pixels and zero outside it. Color, depth and
//! silhouette share the compositing weights `w_i = f_i · Π_{j<i} (1 − f_j)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::gaussian::{Gaussian, GaussianMap};
use crate::image::{ColorImage, DepthImage, Image, Rgb};
use crate::par::{self, Exec};

pub const NEAR_PLANE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Splat support radius in units of the projected radius.
    pub support_sigmas: f64,
    /// Stop compositing a pixel once transmittance drops below this.
    pub termination_eps: f64,
    pub near_plane: f64,
    pub tile_size: usize,
    pub exec: Exec,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            support_sigmas: 3.0,
            termination_eps: 1e-4,
            near_plane: NEAR_PLANE,
            tile_size: 16,
            exec: Exec::Parallel,
        }
    }
}

impl RenderConfig {
    pub fn exact() -> Self {
        Self { termination_eps: 0.0, ..Self::default() }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: [f64; 2],
    pub radius: f64,
    pub depth: f64,
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub silhouette: Image<f64>,
    /// Number of splats composited per pixel.
    pub contributors: Image<u32>,
}

/// Projects one splat; `None` when it is culled by the near plane or its
/// support disc misses every pixel center.
pub fn project(g: &Gaussian, pose: &CameraPose, intr: &PinholeIntrinsics) -> Option<ProjectedGaussian> {
    project_with(g, pose, intr, &RenderConfig::default())
}

pub fn project_with(
    g: &Gaussian,
    pose: &CameraPose,
    intr: &PinholeIntrinsics,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    let pc = pose.world_to_camera(&g.center);
    let d = pc.z;
    if !(d > cfg.near_plane) {
        return None;
    }
    let (u, v) = intr.project(&pc);
    let r = intr.focal() * g.radius / d;
    let reach = cfg.support_sigmas * r;
    if u + reach < 0.0
        || v + reach < 0.0
        || u - reach > intr.width as f64 - 1.0
        || v - reach > intr.height as f64 - 1.0
    {
        return None;
    }
    Some(ProjectedGaussian { mean: [u, v], radius: r, depth: d, source_index: 0 })
}

#[derive(Clone, Copy, Debug)]
struct Splat {
    mean: [f64; 2],
    radius: f64,
    inv_two_r2: f64,
    cutoff2: f64,
    depth: f64,
    opacity: f64,
    color: Rgb,
    source: usize,
}

struct Prepared {
    splats: Vec<Splat>,
    tiles_x: usize,
    tile_size: usize,
    bins: Vec<Vec<u32>>,
}

fn prepare(gs: &[Gaussian], pose: &CameraPose, intr: &PinholeIntrinsics, cfg: &RenderConfig) -> Prepared {
    let projected = par::map_slice(cfg.exec, gs, |g| project_with(g, pose, intr, cfg));
    let mut splats: Vec<Splat> = projected
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let p = p?;
            let g = &gs[i];
            let reach = cfg.support_sigmas * p.radius;
            Some(Splat {
                mean: p.mean,
                radius: p.radius,
                inv_two_r2: 0.5 / (p.radius * p.radius),
                cutoff2: reach * reach,
                depth: p.depth,
                opacity: g.opacity,
                color: g.color,
                source: i,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));

    let ts = cfg.tile_size.max(1);
    let tiles_x = intr.width.div_ceil(ts);
    let tiles_y = intr.height.div_ceil(ts);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let reach = cfg.support_sigmas * s.radius;
        let u0 = (s.mean[0] - reach).ceil().max(0.0) as usize;
        let v0 = (s.mean[1] - reach).ceil().max(0.0) as usize;
        let u1 = (s.mean[0] + reach).floor().min(intr.width as f64 - 1.0);
        let v1 = (s.mean[1] + reach).floor().min(intr.height as f64 - 1.0);
        if u1 < u0 as f64 || v1 < v0 as f64 {
            continue;
        }
        let (u1, v1) = (u1 as usize, v1 as usize);
        for ty in v0 / ts..=v1 / ts {
            for tx in u0 / ts..=u1 / ts {
                bins[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    Prepared { splats, tiles_x, tile_size: ts, bins }
}

impl Prepared {
    fn tile_rect(&self, tile: usize, intr: &PinholeIntrinsics) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let u0 = tx * self.tile_size;
        let v0 = ty * self.tile_size;
        (u0, v0, (u0 + self.tile_size).min(intr.width), (v0 + self.tile_size).min(intr.height))
    }
}

#[derive(Clone, Copy, Default)]
struct PixelResult {
    color: Rgb,
    depth: f64,
    silhouette: f64,
    count: u32,
}

/// One composited term: position in the tile list, influence, the splat's
/// unweighted Gaussian falloff and the transmittance in front of it.
#[derive(Clone, Copy)]
struct Contribution {
    slot: u32,
    f: f64,
    falloff: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

#[inline]
fn composite_pixel(
    splats: &[Splat],
    list: &[u32],
    px: f64,
    py: f64,
    eps: f64,
    mut record: Option<&mut Vec<Contribution>>,
) -> PixelResult {
    let mut out = PixelResult::default();
    let mut t = 1.0;
    for (slot, &si) in list.iter().enumerate() {
        let s = &splats[si as usize];
        let dx = px - s.mean[0];
        let dy = py - s.mean[1];
        let q = dx * dx + dy * dy;
        if q > s.cutoff2 {
            continue;
        }
        let falloff = (-q * s.inv_two_r2).exp();
        let f = s.opacity * falloff;
        let w = f * t;
        out.color[0] += s.color[0] * w;
        out.color[1] += s.color[1] * w;
        out.color[2] += s.color[2] * w;
        out.depth += s.depth * w;
        out.silhouette += w;
        out.count += 1;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(Contribution { slot: slot as u32, f, falloff, transmittance: t, dx, dy });
        }
        t *= 1.0 - f;
        if t < eps {
            break;
        }
    }
    out
}

fn assemble(intr: &PinholeIntrinsics, prep: &Prepared, tiles: Vec<Vec<PixelResult>>) -> RenderOutput {
    let (w, h) = (intr.width, intr.height);
    let mut color = Image::filled(w, h, [0.0; 3]);
    let mut depth = Image::filled(w, h, 0.0);
    let mut silhouette = Image::filled(w, h, 0.0);
    let mut contributors = Image::filled(w, h, 0u32);
    for (tile, pixels) in tiles.into_iter().enumerate() {
        let (u0, v0, u1, _) = prep.tile_rect(tile, intr);
        let tw = u1 - u0;
        for (k, p) in pixels.into_iter().enumerate() {
            let idx = (v0 + k / tw) * w + u0 + k % tw;
            color.data[idx] = p.color;
            depth.data[idx] = p.depth;
            silhouette.data[idx] = p.silhouette;
            contributors.data[idx] = p.count;
        }
    }
    RenderOutput { color, depth, silhouette, contributors }
}

pub fn render(map: &GaussianMap, pose: &CameraPose, intr: &PinholeIntrinsics, cfg: &RenderConfig) -> RenderOutput {
    render_gaussians(&map.gaussians(), pose, intr, cfg)
}

pub fn render_gaussians(
    gs: &[Gaussian],
    pose: &CameraPose,
    intr: &PinholeIntrinsics,
    cfg: &RenderConfig,
) -> RenderOutput {
    let prep = prepare(gs, pose, intr, cfg);
    let tiles = par::map_range(cfg.exec, prep.bins.len(), |tile| {
        let (u0, v0, u1, v1) = prep.tile_rect(tile, intr);
        let list = &prep.bins[tile];
        let mut out = Vec::with_capacity((u1 - u0) * (v1 - v0));
        for v in v0..v1 {
            for u in u0..u1 {
                out.push(composite_pixel(&prep.splats, list, u as f64, v as f64, cfg.termination_eps, None));
            }
        }
        out
    });
    assemble(intr, &prep, tiles)
}

/// Silhouette-only render, used by the view planner.
pub fn render_silhouette(
    gs: &[Gaussian],
    pose: &CameraPose,
    intr: &PinholeIntrinsics,
    cfg: &RenderConfig,
) -> Image<f64> {
    render_gaussians(gs, pose, intr, cfg).silhouette
}

/// Number of pixels whose silhouette is below `threshold`.
pub fn count_missing_pixels(silhouette: &Image<f64>, threshold: f64) -> usize {
    silhouette.data.iter().filter(|s| **s < threshold).count()
}

/// Gradient of a scalar image loss with respect to one splat's constrained
/// parameters (world-space center, radius in meters).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub color: Rgb,
    pub center: Vector3<f64>,
    pub radius: f64,
    pub opacity: f64,
}

/// Per-pixel loss gradient: `(∂L/∂C, ∂L/∂D)`, or `None` when the pixel does
/// not contribute to the loss.
pub type PixelGrad = Option<(Rgb, f64)>;

/// Forward render plus backpropagation of a per-pixel loss gradient.
///
/// `pixel_grad(index, C, D, S)` receives the composited values of each pixel
/// and returns the loss gradient there. The silhouette is passed as a
/// constant; no gradient flows through it.
pub fn render_with_grad<F>(
    gs: &[Gaussian],
    pose: &CameraPose,
    intr: &PinholeIntrinsics,
    cfg: &RenderConfig,
    pixel_grad: F,
) -> (RenderOutput, Vec<SplatGrad>)
where
    F: Fn(usize, &Rgb, f64, f64) -> PixelGrad + Sync,
{
    let prep = prepare(gs, pose, intr, cfg);
    // per tile slot: dC(3), dDepth, dMean(2), dRadius2d, dOpacity
    let tiles = par::map_range(cfg.exec, prep.bins.len(), |tile| {
        let (u0, v0, u1, v1) = prep.tile_rect(tile, intr);
        let list = &prep.bins[tile];
        let mut pixels = Vec::with_capacity((u1 - u0) * (v1 - v0));
        let mut grads = vec![[0.0f64; 8]; list.len()];
        let mut scratch = Vec::new();
        for v in v0..v1 {
            for u in u0..u1 {
                scratch.clear();
                let px = composite_pixel(
                    &prep.splats,
                    list,
                    u as f64,
                    v as f64,
                    cfg.termination_eps,
                    Some(&mut scratch),
                );
                let idx = v * intr.width + u;
                if let Some((g_c, g_d)) = pixel_grad(idx, &px.color, px.depth, px.silhouette) {
                    backprop_pixel(&prep.splats, list, &scratch, &g_c, g_d, &mut grads);
                }
                pixels.push(px);
            }
        }
        (pixels, grads)
    });

    let mut splat_grads = vec![[0.0f64; 8]; prep.splats.len()];
    let mut pixel_tiles = Vec::with_capacity(tiles.len());
    for (tile, (pixels, grads)) in tiles.into_iter().enumerate() {
        for (slot, g) in grads.iter().enumerate() {
            let acc = &mut splat_grads[prep.bins[tile][slot] as usize];
            for k in 0..8 {
                acc[k] += g[k];
            }
        }
        pixel_tiles.push(pixels);
    }

    let mut out = vec![SplatGrad::default(); gs.len()];
    let focal = intr.focal();
    let r_t = pose.rotation.transpose();
    for (s, g) in prep.splats.iter().zip(&splat_grads) {
        let gauss = &gs[s.source];
        let pc = pose.world_to_camera(&gauss.center);
        let d = pc.z;
        let (g_u, g_v, g_r2d, g_depth) = (g[4], g[5], g[6], g[3]);
        let d2 = d * d;
        let g_cam = Vector3::new(
            g_u * intr.fx / d,
            g_v * intr.fy / d,
            -g_u * intr.fx * pc.x / d2 - g_v * intr.fy * pc.y / d2 - g_r2d * focal * gauss.radius / d2 + g_depth,
        );
        out[s.source] = SplatGrad {
            color: [g[0], g[1], g[2]],
            center: r_t * g_cam,
            radius: g_r2d * focal / d,
            opacity: g[7],
        };
    }
    (assemble(intr, &prep, pixel_tiles), out)
}

fn backprop_pixel(
    splats: &[Splat],
    list: &[u32],
    contribs: &[Contribution],
    g_c: &Rgb,
    g_d: f64,
    grads: &mut [[f64; 8]],
) {
    // A_* hold what is composited behind the current splat, starting fresh
    // after it; this avoids dividing by (1 − f).
    let mut behind_c = [0.0; 3];
    let mut behind_d = 0.0;
    for c in contribs.iter().rev() {
        let s = &splats[list[c.slot as usize] as usize];
        let w = c.f * c.transmittance;
        let acc = &mut grads[c.slot as usize];
        acc[0] += g_c[0] * w;
        acc[1] += g_c[1] * w;
        acc[2] += g_c[2] * w;
        acc[3] += g_d * w;

        let mut g_f = g_d * (s.depth - behind_d);
        for k in 0..3 {
            g_f += g_c[k] * (s.color[k] - behind_c[k]);
        }
        g_f *= c.transmittance;

        for k in 0..3 {
            behind_c[k] = s.color[k] * c.f + (1.0 - c.f) * behind_c[k];
        }
        behind_d = s.depth * c.f + (1.0 - c.f) * behind_d;

        let r2 = s.radius * s.radius;
        let q = c.dx * c.dx + c.dy * c.dy;
        acc[4] += g_f * c.f * c.dx / r2;
        acc[5] += g_f * c.f * c.dy / r2;
        acc[6] += g_f * c.f * q / (r2 * s.radius);
        acc[7] += g_f * c.falloff;
    }
}
