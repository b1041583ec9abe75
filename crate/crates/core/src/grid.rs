//! Exploration occupancy grid.
//!
//! Voxels start unknown. Integrating a depth frame frees every voxel a sensor
//! ray crosses before its hit and marks the voxel just beyond the hit as
//! occupied. Occupied always wins: a voxel never returns to free.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par::{self, Exec};
use crate::scene::{Aabb, RgbdFrame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum VoxelState {
    Unknown = 0,
    Free = 1,
    Occupied = 2,
}

impl VoxelState {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Unknown),
            1 => Some(Self::Free),
            2 => Some(Self::Occupied),
            _ => None,
        }
    }
}

/// Nudge applied past a depth hit so the surface voxel is the one behind it.
const HIT_NUDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    origin: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    states: Vec<VoxelState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub encoding: String,
}

impl OccupancyGrid {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || dims.iter().any(|d| *d == 0) {
            return Err(invalid("grid needs a positive voxel size and non-zero dims"));
        }
        Ok(Self { origin, voxel_size, dims, states: vec![VoxelState::Unknown; dims[0] * dims[1] * dims[2]] })
    }

    /// Grid covering `bounds` padded by `pad` voxels on every side.
    pub fn covering(bounds: &Aabb, voxel_size: f64, pad: usize) -> Result<Self> {
        let p = pad as f64 * voxel_size;
        let origin = Vector3::new(bounds.min[0] - p, bounds.min[1] - p, bounds.min[2] - p);
        let e = bounds.extent();
        let dims = [0, 1, 2].map(|k| ((e[k] + 2.0 * p) / voxel_size).ceil() as usize);
        Self::new(origin, voxel_size, dims)
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    #[inline]
    pub fn linear(&self, v: [usize; 3]) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    pub fn unlinear(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[0];
        let y = (i / self.dims[0]) % self.dims[1];
        [x, y, i / (self.dims[0] * self.dims[1])]
    }

    #[inline]
    pub fn state(&self, i: usize) -> VoxelState {
        self.states[i]
    }

    pub fn state_at(&self, v: [usize; 3]) -> VoxelState {
        self.states[self.linear(v)]
    }

    pub fn states(&self) -> &[VoxelState] {
        &self.states
    }

    /// Signed voxel coordinates of a point (may be out of range).
    #[inline]
    pub fn coord_of(&self, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|k| ((p[k] - self.origin[k]) / self.voxel_size).floor() as i64)
    }

    pub fn in_range(&self, c: [i64; 3]) -> bool {
        (0..3).all(|k| c[k] >= 0 && (c[k] as usize) < self.dims[k])
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let c = self.coord_of(p);
        self.in_range(c).then(|| c.map(|v| v as usize))
    }

    pub fn voxel_box(&self, v: [usize; 3]) -> Aabb {
        let lo = [0, 1, 2].map(|k| self.origin[k] + v[k] as f64 * self.voxel_size);
        Aabb::new(lo, lo.map(|x| x + self.voxel_size))
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (v[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (v[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (v[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn count(&self, state: VoxelState) -> usize {
        self.states.iter().filter(|s| **s == state).count()
    }

    pub fn free_voxels(&self) -> Vec<usize> {
        (0..self.states.len()).filter(|i| self.states[*i] == VoxelState::Free).collect()
    }

    /// Voxels crossed by the segment `a→b` in traversal order (3D DDA),
    /// restricted to the grid.
    pub fn traverse(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        let dir = b - a;
        let mut cur = self.coord_of(a);
        let end = self.coord_of(b);
        let mut step = [0i64; 3];
        let mut next_t = [f64::INFINITY; 3];
        for k in 0..3 {
            if dir[k] > 0.0 {
                step[k] = 1;
            } else if dir[k] < 0.0 {
                step[k] = -1;
            }
        }
        let boundary_t = |k: usize, c: i64| -> f64 {
            let plane = if step[k] > 0 { c + 1 } else { c } as f64 * self.voxel_size + self.origin[k];
            (plane - a[k]) / dir[k]
        };
        for k in 0..3 {
            if step[k] != 0 {
                next_t[k] = boundary_t(k, cur[k]);
            }
        }
        loop {
            if self.in_range(cur) {
                out.push(cur.map(|v| v as usize));
            }
            if cur == end {
                break;
            }
            let k = if next_t[0] <= next_t[1] && next_t[0] <= next_t[2] {
                0
            } else if next_t[1] <= next_t[2] {
                1
            } else {
                2
            };
            if !(next_t[k] < 1.0) {
                break;
            }
            cur[k] += step[k];
            next_t[k] = boundary_t(k, cur[k]);
        }
        out
    }

    /// Free and occupied voxels implied by one frame, without mutating the grid.
    fn frame_rays(&self, frame: &RgbdFrame, max_range: f64, exec: Exec) -> (Vec<usize>, Vec<usize>) {
        let intr = &frame.intrinsics;
        let origin = frame.pose.position();
        let c2w = frame.pose.camera_to_world_rotation();
        let rows = par::map_range(exec, intr.height, |v| {
            let mut free = Vec::new();
            let mut occ = Vec::new();
            for u in 0..intr.width {
                let depth = *frame.depth.get(u, v);
                if !(depth > 0.0) {
                    continue;
                }
                let ray = c2w * intr.ray(u as f64, v as f64);
                let length = depth * ray.norm();
                let unit = ray / ray.norm();
                let (reach, hit) = if length > max_range { (max_range, false) } else { (length, true) };
                let end = origin + unit * reach;
                let hit_voxel = if hit {
                    let c = self.coord_of(&(origin + unit * (length + HIT_NUDGE)));
                    self.in_range(c).then(|| self.linear(c.map(|x| x as usize)))
                } else {
                    None
                };
                for vx in self.traverse(&origin, &end) {
                    let i = self.linear(vx);
                    if Some(i) != hit_voxel {
                        free.push(i);
                    }
                }
                if let Some(i) = hit_voxel {
                    occ.push(i);
                }
            }
            (free, occ)
        });
        let mut free: Vec<usize> = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        let mut occ: Vec<usize> = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
        free.sort_unstable();
        free.dedup();
        occ.sort_unstable();
        occ.dedup();
        (free, occ)
    }

    /// Integrates a posed depth frame; returns voxels that went unknown→free,
    /// sorted by linear index.
    pub fn integrate(&mut self, frame: &RgbdFrame, max_range: f64) -> Vec<usize> {
        self.integrate_with(frame, max_range, Exec::Parallel)
    }

    pub fn integrate_with(&mut self, frame: &RgbdFrame, max_range: f64, exec: Exec) -> Vec<usize> {
        let (free, occ) = self.frame_rays(frame, max_range, exec);
        for &i in &occ {
            self.states[i] = VoxelState::Occupied;
        }
        let mut newly = Vec::new();
        for &i in &free {
            if self.states[i] == VoxelState::Unknown {
                self.states[i] = VoxelState::Free;
                newly.push(i);
            }
        }
        newly
    }

    /// Marks the voxels within `radius` of `center` free unless occupied.
    /// Used to seed the space the agent's own body fills at start-up.
    pub fn mark_free_sphere(&mut self, center: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut newly = Vec::new();
        for i in self.sphere_voxels(center, radius).into_iter().flatten() {
            if self.states[i] == VoxelState::Unknown {
                self.states[i] = VoxelState::Free;
                newly.push(i);
            }
        }
        newly.sort_unstable();
        newly
    }

    /// Linear indices of voxels intersecting the sphere; `None` entries stand
    /// for voxels outside the grid.
    fn sphere_voxels(&self, center: &Vector3<f64>, radius: f64) -> Vec<Option<usize>> {
        let r = radius.max(0.0);
        let lo = self.coord_of(&center.add_scalar(-r));
        let hi = self.coord_of(&center.add_scalar(r));
        let mut out = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let c = [x, y, z];
                    if !self.in_range(c) {
                        out.push(None);
                        continue;
                    }
                    let v = c.map(|k| k as usize);
                    if self.voxel_box(v).distance(center) <= r {
                        out.push(Some(self.linear(v)));
                    }
                }
            }
        }
        out
    }

    /// True iff every voxel touching the ball is free; unknown voxels and
    /// voxels outside the grid count as not free.
    pub fn is_free_region(&self, center: &Vector3<f64>, radius: f64) -> bool {
        let r = radius.max(0.0);
        let lo = self.coord_of(&center.add_scalar(-r));
        let hi = self.coord_of(&center.add_scalar(r));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let c = [x, y, z];
                    if !self.in_range(c) {
                        return false;
                    }
                    let v = c.map(|k| k as usize);
                    if self.states[self.linear(v)] != VoxelState::Free && self.voxel_box(v).distance(center) <= r {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// True iff every point of the segment `a→b` is a free region of `radius`:
    /// all voxels within `radius` of the segment are free.
    pub fn is_free_capsule(&self, a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> bool {
        let r = radius.max(0.0);
        let lo_p = a.inf(b).add_scalar(-r);
        let hi_p = a.sup(b).add_scalar(r);
        let lo = self.coord_of(&lo_p);
        let hi = self.coord_of(&hi_p);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let c = [x, y, z];
                    if !self.in_range(c) {
                        return false;
                    }
                    let v = c.map(|k| k as usize);
                    if self.states[self.linear(v)] != VoxelState::Free
                        && self.voxel_box(v).segment_distance(a, b) <= r
                    {
                        return false;
                    }
                }
            }
        }
        true
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            origin: self.origin.into(),
            voxel_size: self.voxel_size,
            dims: self.dims,
            encoding: "rle-u8-u32le".into(),
        }
    }

    /// Run-length encoding: repeated `(state: u8, run: u32 little-endian)`.
    pub fn encode_rle(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.states.len() {
            let s = self.states[i];
            let mut run = 1u32;
            while i + (run as usize) < self.states.len() && self.states[i + run as usize] == s && run < u32::MAX {
                run += 1;
            }
            out.push(s as u8);
            out.extend_from_slice(&run.to_le_bytes());
            i += run as usize;
        }
        out
    }

    pub fn decode_rle(header: &GridHeader, bytes: &[u8]) -> Result<Self> {
        let mut g = Self::new(Vector3::from(header.origin), header.voxel_size, header.dims)?;
        let mut pos = 0usize;
        let mut i = 0usize;
        while pos < bytes.len() {
            if pos + 5 > bytes.len() {
                return Err(Error::GridDump("truncated run".into()));
            }
            let s = VoxelState::from_u8(bytes[pos]).ok_or_else(|| Error::GridDump("bad state byte".into()))?;
            let run = u32::from_le_bytes(bytes[pos + 1..pos + 5].try_into().unwrap()) as usize;
            if i + run > g.states.len() {
                return Err(Error::GridDump("runs exceed grid size".into()));
            }
            g.states[i..i + run].fill(s);
            i += run;
            pos += 5;
        }
        if i != g.states.len() {
            return Err(Error::GridDump("runs do not cover the grid".into()));
        }
        Ok(g)
    }

    pub fn save(&self, bin_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::File::create(bin_path)?.write_all(&self.encode_rle())?;
        std::fs::write(json_path, serde_json::to_string_pretty(&self.header())?)?;
        Ok(())
    }

    pub fn load(bin_path: &Path, json_path: &Path) -> Result<Self> {
        let header: GridHeader = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        let mut bytes = Vec::new();
        std::fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
        Self::decode_rle(&header, &bytes)
    }

    /// Free voxel indices as an ordered set (for diffing snapshots).
    pub fn free_set(&self) -> BTreeSet<usize> {
        self.free_voxels().into_iter().collect()
    }
}
