//! Keyframe database and global-local keyframe selection.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::render::RenderOutput;
use crate::scene::RgbdFrame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframeConfig {
    pub stride: usize,
    /// Frames handed to each map update.
    pub k: usize,
    /// New-pixel fraction above which a keyframe is global.
    pub completeness_fraction: f64,
    /// Silhouette below which a pixel counts as new.
    pub new_pixel_silhouette: f64,
    /// Insert-time PSNR below which a keyframe is global.
    pub quality_threshold_db: f64,
    /// When false no keyframe is ever global (ablation).
    pub use_global: bool,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        Self {
            stride: 5,
            k: 8,
            completeness_fraction: 0.10,
            new_pixel_silhouette: 0.5,
            quality_threshold_db: 22.0,
            use_global: true,
        }
    }
}

impl KeyframeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("keyframe stride must be positive".into()));
        }
        if self.k < 2 || self.k % 2 != 0 {
            return Err(Error::Config("keyframe k must be even and at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalReason {
    Completeness,
    Quality,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeRecord {
    pub frame: RgbdFrame,
    pub is_global: bool,
    pub global_reason: GlobalReason,
    pub new_pixel_fraction: f64,
    pub psnr_at_insert: f64,
}

#[derive(Clone, Debug, Default)]
pub struct KeyframeDatabase {
    pub records: Vec<KeyframeRecord>,
    pub cfg: KeyframeConfig,
}

#[derive(Serialize)]
struct RecordJson<'a> {
    step: usize,
    pose: &'a CameraPose,
    is_global: bool,
    reason: GlobalReason,
    new_pixel_fraction: f64,
    psnr: f64,
}

impl KeyframeDatabase {
    pub fn new(cfg: KeyframeConfig) -> Self {
        Self { records: Vec::new(), cfg }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_keyframe_step(&self, step: usize) -> bool {
        step % self.cfg.stride == 0
    }

    /// Stores `frame` as a keyframe. `rendered` is the map rendered at the
    /// frame's pose before the map is updated with it.
    pub fn insert(&mut self, frame: RgbdFrame, rendered: &RenderOutput) -> Result<&KeyframeRecord> {
        let step = frame.step_index;
        if !self.is_keyframe_step(step) {
            return Err(invalid(format!("step {step} is not a keyframe step")));
        }
        if self.records.last().is_some_and(|r| r.frame.step_index >= step) {
            return Err(invalid("keyframe steps must increase"));
        }
        if !rendered.silhouette.same_shape(&frame.depth) {
            return Err(invalid("rendered view does not match the frame"));
        }
        let s = &rendered.silhouette.data;
        let new = s.iter().filter(|v| **v < self.cfg.new_pixel_silhouette).count();
        let new_pixel_fraction = new as f64 / s.len() as f64;
        let psnr_at_insert = metrics::psnr(&rendered.color, &frame.color);
        let global_reason = if !self.cfg.use_global {
            GlobalReason::None
        } else if new_pixel_fraction > self.cfg.completeness_fraction {
            GlobalReason::Completeness
        } else if psnr_at_insert < self.cfg.quality_threshold_db {
            GlobalReason::Quality
        } else {
            GlobalReason::None
        };
        self.records.push(KeyframeRecord {
            frame,
            is_global: global_reason != GlobalReason::None,
            global_reason,
            new_pixel_fraction,
            psnr_at_insert,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn globals(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].is_global).collect()
    }

    /// Record indices to optimize alongside `current`, at most `k − 1` of
    /// them. The local half holds the latest keyframe and the keyframes
    /// whose frustum sees most of the current depth points; the global half
    /// is drawn uniformly (seeded) from the remaining global keyframes, and
    /// any shortfall is backfilled with the next-best local keyframes.
    pub fn select_for_update(&self, current: &RgbdFrame, k: usize, seed: u64) -> Vec<usize> {
        let candidates: Vec<usize> =
            (0..self.records.len()).filter(|&i| self.records[i].frame.step_index != current.step_index).collect();
        if candidates.is_empty() || k < 2 {
            return Vec::new();
        }
        let half = k / 2;
        let last = *candidates.iter().max_by_key(|&&i| self.records[i].frame.step_index).expect("nonempty");

        let overlaps: Vec<usize> = candidates.iter().map(|&i| overlap(current, &self.records[i].frame)).collect();
        let mut ranked: Vec<(usize, usize)> =
            candidates.iter().zip(&overlaps).filter(|(i, _)| **i != last).map(|(i, o)| (*i, *o)).collect();
        // highest overlap first, newest first among equals
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(b.0.cmp(&a.0)));
        let mut ranked = ranked.into_iter().map(|(i, _)| i);

        let mut chosen = vec![last];
        for i in ranked.by_ref().take(half.saturating_sub(2)) {
            chosen.push(i);
        }

        let pool: Vec<usize> =
            candidates.iter().copied().filter(|i| self.records[*i].is_global && !chosen.contains(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let take = half.min(pool.len());
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), take).into_iter().map(|j| pool[j]).collect();
        picked.sort_unstable();
        chosen.extend(&picked);

        for i in ranked {
            if chosen.len() + 1 >= k {
                break;
            }
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
        chosen.truncate(k - 1);
        chosen
    }

    /// `current` followed by the selected keyframes.
    pub fn frames_for_update<'a>(&'a self, current: &'a RgbdFrame, k: usize, seed: u64) -> Vec<&'a RgbdFrame> {
        let mut out = vec![current];
        out.extend(self.select_for_update(current, k, seed).into_iter().map(|i| &self.records[i].frame));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let rows: Vec<RecordJson> = self
            .records
            .iter()
            .map(|r| RecordJson {
                step: r.frame.step_index,
                pose: &r.frame.pose,
                is_global: r.is_global,
                reason: r.global_reason,
                new_pixel_fraction: r.new_pixel_fraction,
                psnr: r.psnr_at_insert,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Number of `current`'s valid depth points that land inside `other`'s view
/// frustum in front of its camera.
pub fn overlap(current: &RgbdFrame, other: &RgbdFrame) -> usize {
    let intr = &current.intrinsics;
    let oi = &other.intrinsics;
    let mut n = 0;
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = current.depth.data[v * intr.width + u];
            if d <= 0.0 {
                continue;
            }
            let pw = current.pose.back_project(intr, u as f64, v as f64, d);
            let pc = other.pose.world_to_camera(&pw);
            if pc.z <= 0.0 {
                continue;
            }
            let (pu, pv) = oi.project(&pc);
            if oi.contains(pu, pv) {
                n += 1;
            }
        }
    }
    n
}
