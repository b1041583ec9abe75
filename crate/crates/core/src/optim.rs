//! Map optimization: masked L1 rendering loss, analytic gradients, Adam
//! updates, and depth-driven densification.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::PinholeIntrinsics;
use crate::error::{invalid, Error, Result};
use crate::gaussian::{Gaussian, GaussianMap, RawParams, PARAMS_PER_GAUSSIAN};
use crate::image::{DepthImage, Image};
use crate::render::{self, RenderConfig};
use crate::scene::RgbdFrame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub iterations_exploration: usize,
    pub iterations_refinement: usize,
    pub lr_color: f64,
    pub lr_center: f64,
    pub lr_radius: f64,
    pub lr_opacity: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Pixels enter the loss only where the silhouette exceeds this.
    pub silhouette_threshold: f64,
    pub depth_weight: f64,
    pub color_weight: f64,
    /// Depth-error multiple of the median depth error that triggers densification.
    pub densify_lambda: f64,
    /// Silhouette below which a pixel counts as under-covered.
    pub densify_silhouette: f64,
    pub densify_divisor_exploration: usize,
    pub densify_divisor_refinement: usize,
    /// Opacity given to freshly densified splats.
    pub init_opacity: f64,
    /// Post-refinement pruning threshold.
    pub prune_opacity: f64,
    /// Keep optimizer moments across map updates instead of restarting
    /// them for every call.
    pub persistent_moments: bool,
    pub render: RenderConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iterations_exploration: 15,
            iterations_refinement: 60,
            lr_color: 2.5e-3,
            lr_center: 1e-4,
            lr_radius: 1e-3,
            lr_opacity: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            silhouette_threshold: 0.99,
            depth_weight: 1.0,
            color_weight: 0.5,
            densify_lambda: 50.0,
            densify_silhouette: 0.5,
            densify_divisor_exploration: 4,
            densify_divisor_refinement: 1,
            init_opacity: 0.9,
            prune_opacity: 0.05,
            persistent_moments: false,
            render: RenderConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_color, self.lr_center, self.lr_radius, self.lr_opacity];
        if lrs.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if !(self.silhouette_threshold > 0.0 && self.silhouette_threshold < 1.0) {
            return Err(Error::Config("silhouette threshold must lie in (0, 1)".into()));
        }
        if !(self.densify_lambda > 0.0) {
            return Err(Error::Config("densification lambda must be positive".into()));
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Config("initial opacity must lie in (0, 1)".into()));
        }
        if self.densify_divisor_exploration == 0 || self.densify_divisor_refinement == 0 {
            return Err(Error::Config("densification divisors must be at least 1".into()));
        }
        Ok(())
    }

    fn step_sizes(&self) -> RawParams {
        [
            self.lr_color,
            self.lr_color,
            self.lr_color,
            self.lr_center,
            self.lr_center,
            self.lr_center,
            self.lr_radius,
            self.lr_opacity,
        ]
    }
}

/// Value and raw-parameter gradient of the masked rendering loss.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub total: f64,
    pub depth: f64,
    pub color: f64,
    pub masked_pixels: usize,
    pub grad: Vec<RawParams>,
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `L = Σ_p [S(p) > τ_S] · (w_d·|D − D_gt| + w_c·Σ_ch |C − C_gt|)`, with the
/// depth term dropped where the observation has no depth. The silhouette gate
/// is a constant for differentiation.
pub fn loss(map: &GaussianMap, frame: &RgbdFrame, cfg: &OptimConfig) -> Result<LossEval> {
    let gs = map.gaussians();
    let intr = &frame.intrinsics;
    if frame.depth.width != intr.width || frame.depth.height != intr.height {
        return Err(invalid("frame buffers do not match its intrinsics"));
    }
    let tau = cfg.silhouette_threshold;
    let (wd, wc) = (cfg.depth_weight, cfg.color_weight);
    let (out, grads) = render::render_with_grad(&gs, &frame.pose, intr, &cfg.render, |idx, c, d, s| {
        if s <= tau {
            return None;
        }
        let dgt = frame.depth.data[idx];
        let cgt = &frame.color.data[idx];
        let gd = if dgt > 0.0 { wd * sgn(d - dgt) } else { 0.0 };
        Some(([wc * sgn(c[0] - cgt[0]), wc * sgn(c[1] - cgt[1]), wc * sgn(c[2] - cgt[2])], gd))
    });

    let (mut depth_term, mut color_term, mut masked) = (0.0, 0.0, 0usize);
    for idx in 0..out.silhouette.len() {
        if out.silhouette.data[idx] <= tau {
            continue;
        }
        masked += 1;
        let dgt = frame.depth.data[idx];
        if dgt > 0.0 {
            depth_term += wd * (out.depth.data[idx] - dgt).abs();
        }
        let (c, cgt) = (&out.color.data[idx], &frame.color.data[idx]);
        color_term += wc * ((c[0] - cgt[0]).abs() + (c[1] - cgt[1]).abs() + (c[2] - cgt[2]).abs());
    }
    let total = depth_term + color_term;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("rendering loss is {total}")));
    }

    let grad = gs
        .iter()
        .zip(&grads)
        .map(|(g, sg)| {
            let mut r = [0.0; PARAMS_PER_GAUSSIAN];
            for k in 0..3 {
                r[k] = sg.color[k] * g.color[k] * (1.0 - g.color[k]);
                r[3 + k] = sg.center[k];
            }
            r[6] = sg.radius * g.radius;
            r[7] = sg.opacity * g.opacity * (1.0 - g.opacity);
            r
        })
        .collect::<Vec<_>>();
    if grad.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("loss gradient".into()));
    }
    Ok(LossEval { total, depth: depth_term, color: color_term, masked_pixels: masked, grad })
}

/// First-order adaptive-moment optimizer with one step size per parameter slot.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<RawParams>,
    v: Vec<RawParams>,
    t: i32,
    step_sizes: RawParams,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &OptimConfig) -> Self {
        Self {
            m: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            v: vec![[0.0; PARAMS_PER_GAUSSIAN]; n],
            t: 0,
            step_sizes: cfg.step_sizes(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, params: &mut [RawParams], grads: &[RawParams]) {
        debug_assert_eq!(params.len(), grads.len());
        if self.m.len() < params.len() {
            self.m.resize(params.len(), [0.0; PARAMS_PER_GAUSSIAN]);
            self.v.resize(params.len(), [0.0; PARAMS_PER_GAUSSIAN]);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..PARAMS_PER_GAUSSIAN {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= self.step_sizes[k] * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub depth: f64,
    pub color: f64,
}

/// Runs `iterations` optimizer steps, cycling through `keyframes`. The
/// returned trace holds the loss evaluated before each step.
pub fn update_map(
    map: &mut GaussianMap,
    keyframes: &[&RgbdFrame],
    cfg: &OptimConfig,
    iterations: usize,
) -> Result<Vec<LossRecord>> {
    let mut adam = Adam::new(map.len(), cfg);
    update_map_with(map, &mut adam, keyframes, cfg, iterations)
}

/// Like [`update_map`] but continues from existing optimizer moments.
/// Splats appended since the last call start with zero moments.
pub fn update_map_with(
    map: &mut GaussianMap,
    adam: &mut Adam,
    keyframes: &[&RgbdFrame],
    cfg: &OptimConfig,
    iterations: usize,
) -> Result<Vec<LossRecord>> {
    if keyframes.is_empty() {
        return Err(invalid("map update needs at least one keyframe"));
    }
    let mut trace = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let frame = keyframes[it % keyframes.len()];
        let eval = loss(map, frame, cfg)?;
        trace.push(LossRecord { step: it, total: eval.total, depth: eval.depth, color: eval.color });
        adam.step(map.raw_mut(), &eval.grad);
        if !map.all_finite() {
            return Err(Error::NonFinite(format!("map parameters after optimizer step {it}")));
        }
    }
    Ok(trace)
}

pub fn write_loss_trace(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of `|D − D_gt|` over pixels with observed depth and rendered support.
pub fn median_depth_error(rendered: &DepthImage, observed: &DepthImage, silhouette: &Image<f64>) -> f64 {
    let mut errs: Vec<f64> = (0..rendered.len())
        .filter(|&i| observed.data[i] > 0.0 && silhouette.data[i] > 0.0)
        .map(|i| (rendered.data[i] - observed.data[i]).abs())
        .collect();
    median(&mut errs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskReason {
    None,
    LowDensity,
    DepthError,
}

/// Where new splats are needed, sampled at a reduced resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DensificationMask {
    pub width: usize,
    pub height: usize,
    pub divisor: usize,
    pub mask: Vec<bool>,
    pub reason: Vec<MaskReason>,
    pub median_depth_error: f64,
}

impl DensificationMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Full-resolution pixel sampled by mask cell `(i, j)`.
    pub fn source_pixel(&self, i: usize, j: usize) -> (usize, usize) {
        PinholeIntrinsics::subsample_pixel(self.divisor, i, j)
    }
}

/// `M(p) = [S < s_min] ∨ ([D_gt < D] ∧ [|D − D_gt| > λ·MDE])`, restricted to
/// pixels with observed depth.
pub fn densification_mask(
    map: &GaussianMap,
    frame: &RgbdFrame,
    cfg: &OptimConfig,
    divisor: usize,
) -> DensificationMask {
    let low = frame.intrinsics.subsampled(divisor);
    let out = render::render(map, &frame.pose, &low, &cfg.render);
    let observed: Vec<f64> = (0..low.height)
        .flat_map(|j| (0..low.width).map(move |i| (i, j)))
        .map(|(i, j)| {
            let (u, v) = PinholeIntrinsics::subsample_pixel(divisor, i, j);
            *frame.depth.get(u, v)
        })
        .collect();
    let observed = Image { width: low.width, height: low.height, data: observed };
    let mde = median_depth_error(&out.depth, &observed, &out.silhouette);
    let threshold = cfg.densify_lambda * mde;
    let n = low.pixel_count();
    let mut mask = vec![false; n];
    let mut reason = vec![MaskReason::None; n];
    for idx in 0..n {
        let dgt = observed.data[idx];
        if dgt <= 0.0 {
            continue;
        }
        let (s, d) = (out.silhouette.data[idx], out.depth.data[idx]);
        if s < cfg.densify_silhouette {
            mask[idx] = true;
            reason[idx] = MaskReason::LowDensity;
        } else if dgt < d && (d - dgt).abs() > threshold {
            mask[idx] = true;
            reason[idx] = MaskReason::DepthError;
        }
    }
    DensificationMask {
        width: low.width,
        height: low.height,
        divisor: divisor.max(1),
        mask,
        reason,
        median_depth_error: mde,
    }
}

/// Adds one splat per masked pixel at its back-projected observation, sized to
/// roughly one pixel of the densification resolution. Returns the count added.
pub fn densify(map: &mut GaussianMap, frame: &RgbdFrame, cfg: &OptimConfig, divisor: usize) -> Result<usize> {
    let m = densification_mask(map, frame, cfg, divisor);
    let intr = &frame.intrinsics;
    let pixel_scale = m.divisor as f64 * 0.5 * (1.0 / intr.fx + 1.0 / intr.fy);
    let mut added = 0;
    for j in 0..m.height {
        for i in 0..m.width {
            if !m.mask[j * m.width + i] {
                continue;
            }
            let (u, v) = m.source_pixel(i, j);
            let d = *frame.depth.get(u, v);
            let center = frame.pose.back_project(intr, u as f64, v as f64, d);
            let c = frame.color.get(u, v);
            let color = [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)];
            map.push(Gaussian::new(color, center, d * pixel_scale, cfg.init_opacity))?;
            added += 1;
        }
    }
    Ok(added)
}

/// Loss trace writer that appends across several update calls.
pub struct LossTraceWriter {
    inner: csv::Writer<std::fs::File>,
    next_step: usize,
}

impl LossTraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { inner: csv::Writer::from_path(path)?, next_step: 0 })
    }

    pub fn append(&mut self, records: &[LossRecord]) -> Result<()> {
        for r in records {
            self.inner.serialize(LossRecord { step: self.next_step, ..*r })?;
            self.next_step += 1;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
