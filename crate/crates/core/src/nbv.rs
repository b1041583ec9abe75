//! Next-best-view planning over a pool of candidate viewpoints.
//!
//! Candidates sit on a horizontal lattice at fixed heights, each position
//! carrying a spherical Fibonacci set of viewing directions. A candidate's
//! value is the number of pixels the current map leaves uncovered from that
//! viewpoint; the goal trades it off against travel distance.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianMap};
use crate::grid::{OccupancyGrid, VoxelState};
use crate::par::{self, Exec};
use crate::render::{self, RenderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Fine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Lattice spacing in meters.
    pub v1: f64,
    /// Viewing directions per lattice position.
    pub v2: usize,
    pub height_levels: Vec<f64>,
    /// Minimum free clearance around a candidate position.
    pub surface_buffer: f64,
    /// Candidates missing fewer than this fraction of pixels are dropped.
    pub removal_fraction: f64,
    /// Silhouette below which a pixel counts as missing.
    pub missing_threshold: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::coarse()
    }
}

impl SamplingConfig {
    pub fn coarse() -> Self {
        Self {
            v1: 1.0,
            v2: 5,
            height_levels: vec![1.2],
            surface_buffer: 0.3,
            removal_fraction: 0.005,
            missing_threshold: 0.01,
        }
    }

    pub fn fine() -> Self {
        Self { v1: 0.5, v2: 15, height_levels: vec![0.8, 1.6], ..Self::coarse() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v1 > 0.0) || self.v2 == 0 || self.height_levels.is_empty() {
            return Err(Error::Config("sampling needs v1 > 0, v2 >= 1 and a height level".into()));
        }
        if !(self.removal_fraction > 0.0 && self.removal_fraction < 1.0) {
            return Err(Error::Config("removal fraction must lie in (0, 1)".into()));
        }
        if !(self.surface_buffer >= 0.0) || !(self.missing_threshold > 0.0 && self.missing_threshold < 1.0) {
            return Err(Error::Config("invalid surface buffer or missing threshold".into()));
        }
        Ok(())
    }

    /// Lattice coordinate `i` along x or y maps to `(i + 1/2) · v1`.
    pub fn lattice_coord(&self, i: i64) -> f64 {
        (i as f64 + 0.5) * self.v1
    }

    fn removal_count(&self, intr: &PinholeIntrinsics) -> f64 {
        self.removal_fraction * intr.pixel_count() as f64
    }
}

/// `n` directions spread evenly over the unit sphere.
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect()
}

/// Pool key: position quantized to millimeters, direction set size and index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateKey {
    pub position_mm: [i64; 3],
    pub directions: usize,
    pub direction: usize,
}

fn quantize(p: &Vector3<f64>) -> [i64; 3] {
    [p.x, p.y, p.z].map(|c| (c * 1000.0).round() as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub key: CandidateKey,
    pub pose: CameraPose,
    pub n_missing: usize,
    pub last_evaluated_step: usize,
    pub stage_created: Stage,
}

impl Candidate {
    pub fn position(&self) -> Vector3<f64> {
        self.pose.position()
    }
}

#[derive(Clone, Debug)]
pub struct CandidatePool {
    candidates: BTreeMap<CandidateKey, Candidate>,
    stage: Stage,
    /// Lattice positions already admitted in this stage.
    admitted: BTreeSet<[i64; 3]>,
}

impl Default for CandidatePool {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything needed to evaluate candidates at one step.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub map: &'a [Gaussian],
    pub intrinsics: &'a PinholeIntrinsics,
    pub render: &'a RenderConfig,
    pub step: usize,
    pub exec: Exec,
}

impl<'a> EvalContext<'a> {
    pub fn missing(&self, pose: &CameraPose, threshold: f64) -> usize {
        // one candidate per worker; each render runs single-threaded
        let cfg = self.render.with_exec(Exec::Sequential);
        let s = render::render_silhouette(self.map, pose, self.intrinsics, &cfg);
        render::count_missing_pixels(&s, threshold)
    }
}

/// Per-update bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PoolUpdateStats {
    pub added: usize,
    pub removed: usize,
    pub evaluated: usize,
}

impl CandidatePool {
    pub fn new() -> Self {
        Self { candidates: BTreeMap::new(), stage: Stage::Coarse, admitted: BTreeSet::new() }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, key: &CandidateKey) -> Option<&Candidate> {
        self.candidates.get(key)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.values()
    }

    pub fn remove(&mut self, key: &CandidateKey) -> Option<Candidate> {
        self.candidates.remove(key)
    }

    /// Inserts a candidate directly, replacing any with the same key.
    pub fn insert(&mut self, c: Candidate) {
        self.candidates.insert(c.key, c);
    }

    fn admit_position(&mut self, p: Vector3<f64>, cfg: &SamplingConfig, step: usize) -> usize {
        let q = quantize(&p);
        if !self.admitted.insert(q) {
            return 0;
        }
        for (k, dir) in fibonacci_directions(cfg.v2).into_iter().enumerate() {
            let key = CandidateKey { position_mm: q, directions: cfg.v2, direction: k };
            let pose = CameraPose::look_at(p, dir);
            self.candidates.insert(
                key,
                Candidate { key, pose, n_missing: usize::MAX, last_evaluated_step: step, stage_created: self.stage },
            );
        }
        cfg.v2
    }

    /// Adds lattice positions touched by the newly freed voxels, then
    /// re-evaluates and prunes the whole pool.
    pub fn update(
        &mut self,
        newly_freed: &[usize],
        grid: &OccupancyGrid,
        cfg: &SamplingConfig,
        ctx: &EvalContext,
    ) -> PoolUpdateStats {
        let mut added = 0;
        for p in lattice_positions_near(grid, newly_freed, cfg) {
            if !self.admitted.contains(&quantize(&p)) && grid.is_free_region(&p, cfg.surface_buffer) {
                added += self.admit_position(p, cfg, ctx.step);
            }
        }
        let (evaluated, removed) = self.evaluate(cfg, ctx);
        PoolUpdateStats { added, removed, evaluated }
    }

    /// Re-renders every candidate; returns (evaluated, removed).
    pub fn evaluate(&mut self, cfg: &SamplingConfig, ctx: &EvalContext) -> (usize, usize) {
        let poses: Vec<(CandidateKey, CameraPose)> = self.candidates.values().map(|c| (c.key, c.pose)).collect();
        let counts = par::map_slice(ctx.exec, &poses, |(_, pose)| ctx.missing(pose, cfg.missing_threshold));
        let limit = cfg.removal_count(ctx.intrinsics);
        let mut removed = 0;
        for ((key, _), n) in poses.iter().zip(counts) {
            if (n as f64) < limit {
                self.candidates.remove(key);
                removed += 1;
            } else if let Some(c) = self.candidates.get_mut(key) {
                c.n_missing = n;
                c.last_evaluated_step = ctx.step;
            }
        }
        (poses.len(), removed)
    }

    /// Switches to the fine stage and seeds the pool from all free space.
    pub fn advance_stage(&mut self, grid: &OccupancyGrid, fine: &SamplingConfig, ctx: &EvalContext) -> PoolUpdateStats {
        self.stage = Stage::Fine;
        self.admitted.clear();
        self.candidates.clear();
        let mut added = 0;
        for p in lattice_positions_in_free_space(grid, fine) {
            if grid.is_free_region(&p, fine.surface_buffer) {
                added += self.admit_position(p, fine, ctx.step);
            }
        }
        let (evaluated, removed) = self.evaluate(fine, ctx);
        PoolUpdateStats { added, removed, evaluated }
    }

    /// Best candidate by distance-weighted gain; `None` when the pool is empty.
    pub fn goal_search(&self, current: &CameraPose) -> Option<(Candidate, f64)> {
        if self.candidates.is_empty() {
            return None;
        }
        let here = current.position();
        let cands: Vec<&Candidate> = self.candidates.values().collect();
        let l: Vec<f64> = cands.iter().map(|c| (c.position() - here).norm()).collect();
        let n: Vec<f64> = cands.iter().map(|c| c.n_missing as f64).collect();
        let gains = information_gains(&l, &n);
        // keys iterate in ascending order, so the first maximum is the lowest key
        let mut best = 0;
        for (i, g) in gains.iter().enumerate() {
            if *g > gains[best] {
                best = i;
            }
        }
        Some((cands[best].clone(), gains[best]))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            stage: Stage,
            candidates: Vec<&'a Candidate>,
        }
        Ok(serde_json::to_string(&Dump { stage: self.stage, candidates: self.candidates.values().collect() })?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// `I_i = (1 − softmax(l)_i) · softmax(ln N)_i` over the whole candidate set,
/// with `N` floored at 1.
pub fn information_gains(distances: &[f64], missing: &[f64]) -> Vec<f64> {
    assert_eq!(distances.len(), missing.len());
    let softmax = |x: &[f64]| -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    };
    let logs: Vec<f64> = missing.iter().map(|n| n.max(1.0).ln()).collect();
    let sl = softmax(distances);
    let sn = softmax(&logs);
    sl.iter().zip(&sn).map(|(a, b)| (1.0 - a) * b).collect()
}

fn lattice_range(lo: f64, hi: f64, v1: f64) -> std::ops::RangeInclusive<i64> {
    let a = (lo / v1 - 0.5).ceil() as i64;
    let b = (hi / v1 - 0.5).floor() as i64;
    a..=b
}

/// Lattice positions whose surface-buffer ball touches one of `voxels`.
pub fn lattice_positions_near(grid: &OccupancyGrid, voxels: &[usize], cfg: &SamplingConfig) -> Vec<Vector3<f64>> {
    let mut out = BTreeSet::new();
    let r = cfg.surface_buffer;
    for &vi in voxels {
        let b = grid.voxel_box(grid.unlinear(vi));
        for (hi, &z) in cfg.height_levels.iter().enumerate() {
            if z < b.min[2] - r || z > b.max[2] + r {
                continue;
            }
            for i in lattice_range(b.min[0] - r, b.max[0] + r, cfg.v1) {
                for j in lattice_range(b.min[1] - r, b.max[1] + r, cfg.v1) {
                    let p = Vector3::new(cfg.lattice_coord(i), cfg.lattice_coord(j), z);
                    if b.distance(&p) <= r {
                        out.insert((hi, i, j));
                    }
                }
            }
        }
    }
    out.into_iter()
        .map(|(h, i, j)| Vector3::new(cfg.lattice_coord(i), cfg.lattice_coord(j), cfg.height_levels[h]))
        .collect()
}

/// Lattice positions inside the grid whose own voxel is free.
pub fn lattice_positions_in_free_space(grid: &OccupancyGrid, cfg: &SamplingConfig) -> Vec<Vector3<f64>> {
    let o = grid.origin();
    let d = grid.dims();
    let vs = grid.voxel_size();
    let mut out = Vec::new();
    for &z in &cfg.height_levels {
        for j in lattice_range(o.y, o.y + d[1] as f64 * vs, cfg.v1) {
            for i in lattice_range(o.x, o.x + d[0] as f64 * vs, cfg.v1) {
                let p = Vector3::new(cfg.lattice_coord(i), cfg.lattice_coord(j), z);
                if grid.voxel_of(&p).is_some_and(|v| grid.state_at(v) == VoxelState::Free) {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Convenience for callers holding a map rather than a splat slice.
pub fn eval_context<'a>(
    gaussians: &'a [Gaussian],
    intrinsics: &'a PinholeIntrinsics,
    render: &'a RenderConfig,
    step: usize,
    exec: Exec,
) -> EvalContext<'a> {
    EvalContext { map: gaussians, intrinsics, render, step, exec }
}

/// Missing-pixel count of one pose against a map.
pub fn missing_pixels(map: &GaussianMap, pose: &CameraPose, intr: &PinholeIntrinsics, cfg: &RenderConfig, threshold: f64) -> usize {
    let s = render::render_silhouette(&map.gaussians(), pose, intr, cfg);
    render::count_missing_pixels(&s, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fibonacci_unit_norm() {
        for n in [1, 2, 5, 15, 100] {
            let d = fibonacci_directions(n);
            assert_eq!(d.len(), n);
            assert!(d.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn gains_prefer_near_and_missing() {
        let g = information_gains(&[1.0, 2.0, 3.0], &[100.0; 3]);
        assert!(g[0] > g[1] && g[1] > g[2]);
        let g = information_gains(&[2.0; 3], &[10.0, 300.0, 20.0]);
        assert!(g[1] > g[0] && g[1] > g[2]);
    }

    #[test]
    fn lattice_range_is_half_offset() {
        let cfg = SamplingConfig::coarse();
        let r: Vec<i64> = lattice_range(0.0, 3.0, cfg.v1).collect();
        assert_eq!(r, vec![0, 1, 2]);
        assert_eq!(cfg.lattice_coord(2), 2.5);
    }
}
