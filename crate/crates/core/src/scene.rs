//! Synthetic indoor environment and RGB-D sensor.
//!
//! Scenes are unions of axis-aligned boxes with one flat albedo per face.
//! Rooms are laid out in a row along +x and joined by door openings cut into
//! the partition walls. Rendering is an exact per-pixel ray cast.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::error::{invalid, Result};
use crate::image::{ColorImage, DepthImage, Image, Rgb};
use crate::par::{self, Exec};

/// Face order used for `face_colors`: −x, +x, −y, +y, −z, +z.
pub const FACE_NORMALS: [[f64; 3]; 6] = [
    [-1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, -1.0],
    [0.0, 0.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Floor,
    Ceiling,
    Wall,
    Furniture,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2])
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Strict interior test with a tolerance band on every face.
    pub fn contains_strict(&self, p: &Vector3<f64>, eps: f64) -> bool {
        (0..3).all(|k| p[k] > self.min[k] + eps && p[k] < self.max[k] - eps)
    }

    pub fn encloses(&self, other: &Aabb) -> bool {
        (0..3).all(|k| other.min[k] >= self.min[k] && other.max[k] <= self.max[k])
    }

    /// Euclidean distance from a point to the box (0 inside).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let mut s = 0.0;
        for k in 0..3 {
            let d = (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]);
            s += d * d;
        }
        s.sqrt()
    }

    /// Slab-method ray intersection. Returns the entry parameter and the
    /// entered face index when the ray starts outside and hits the box.
    pub fn ray_entry(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut face = 0;
        for k in 0..3 {
            if dir[k] == 0.0 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let (t0, t1, entered) = if inv > 0.0 {
                ((self.min[k] - origin[k]) * inv, (self.max[k] - origin[k]) * inv, 2 * k)
            } else {
                ((self.max[k] - origin[k]) * inv, (self.min[k] - origin[k]) * inv, 2 * k + 1)
            };
            if t0 > t_near {
                t_near = t0;
                face = entered;
            }
            t_far = t_far.min(t1);
        }
        if t_near > 0.0 && t_near <= t_far {
            Some((t_near, face))
        } else {
            None
        }
    }

    /// Minimum distance between the segment `a→b` and the box, computed
    /// exactly from the piecewise-quadratic squared-distance profile.
    pub fn segment_distance(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let d = b - a;
        let mut breaks = vec![0.0, 1.0];
        for k in 0..3 {
            if d[k] != 0.0 {
                for bound in [self.min[k], self.max[k]] {
                    let t = (bound - a[k]) / d[k];
                    if t > 0.0 && t < 1.0 {
                        breaks.push(t);
                    }
                }
            }
        }
        breaks.sort_by(f64::total_cmp);
        let sq_at = |t: f64| {
            let p = a + d * t;
            let r = self.distance(&p);
            r * r
        };
        let mut best = f64::INFINITY;
        for w in breaks.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            best = best.min(sq_at(t0)).min(sq_at(t1));
            if t1 - t0 <= 0.0 {
                continue;
            }
            // On this interval each axis is below, inside or above its slab,
            // so the squared distance is a single quadratic A t² + B t + C.
            let tm = 0.5 * (t0 + t1);
            let pm = a + d * tm;
            let (mut qa, mut qb) = (0.0, 0.0);
            for k in 0..3 {
                let bound = if pm[k] < self.min[k] {
                    self.min[k]
                } else if pm[k] > self.max[k] {
                    self.max[k]
                } else {
                    continue;
                };
                let alpha = a[k] - bound;
                qa += d[k] * d[k];
                qb += 2.0 * alpha * d[k];
            }
            if qa > 0.0 {
                let ts = -qb / (2.0 * qa);
                if ts > t0 && ts < t1 {
                    best = best.min(sq_at(ts));
                }
            }
        }
        best.max(0.0).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub kind: PrimitiveKind,
    pub aabb: Aabb,
    pub face_colors: [Rgb; 6],
}

impl BoxPrimitive {
    pub fn face_area(&self, face: usize) -> f64 {
        let e = self.aabb.extent();
        let axis = face / 2;
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        e[a] * e[b]
    }
}

/// Parameters for procedural scene generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub room_count: usize,
    /// Interior room width/depth range in meters.
    pub room_size_min: f64,
    pub room_size_max: f64,
    pub height: f64,
    pub wall_thickness: f64,
    pub door_width: f64,
    pub door_height: f64,
    pub furniture_per_room: usize,
    /// Diameter of the navigating agent; doors must admit it.
    pub agent_diameter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room_count: 2,
            room_size_min: 3.0,
            room_size_max: 4.0,
            height: 2.5,
            wall_thickness: 0.1,
            door_width: 1.0,
            door_height: 2.0,
            furniture_per_room: 2,
            agent_diameter: 0.4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.room_size_min,
            self.room_size_max,
            self.height,
            self.wall_thickness,
            self.door_width,
            self.door_height,
            self.agent_diameter,
        ];
        if self.room_count == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("scene spec ranges must be positive"));
        }
        if self.room_size_min > self.room_size_max {
            return Err(invalid("room_size_min exceeds room_size_max"));
        }
        if self.room_size_min < self.door_width + self.agent_diameter {
            return Err(invalid(format!(
                "minimum room size {} m cannot hold a {} m door plus a {} m agent",
                self.room_size_min, self.door_width, self.agent_diameter
            )));
        }
        if self.door_height + self.agent_diameter > self.height {
            return Err(invalid("door height leaves no headroom below the ceiling"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub primitives: Vec<BoxPrimitive>,
    pub bounds: Aabb,
    /// Interior (air) volume of each room.
    pub rooms: Vec<Aabb>,
    pub seed: u64,
}

/// A ray/primitive hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub primitive: usize,
    pub face: usize,
}

/// Surface samples with their albedo and source face.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<Rgb>,
    pub primitive: Vec<usize>,
    pub face: Vec<usize>,
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)]
}

fn colored_box(rng: &mut ChaCha8Rng, kind: PrimitiveKind, min: [f64; 3], max: [f64; 3]) -> BoxPrimitive {
    let mut face_colors = [[0.0; 3]; 6];
    for c in face_colors.iter_mut() {
        *c = random_color(rng);
    }
    BoxPrimitive { kind, aabb: Aabb::new(min, max), face_colors }
}

/// Shell of a room (or row of rooms) spanning `[0,x]×[0,y]×[0,z]` inside.
fn push_shell(rng: &mut ChaCha8Rng, out: &mut Vec<BoxPrimitive>, x: f64, y: f64, z: f64, t: f64) {
    use PrimitiveKind::*;
    out.push(colored_box(rng, Floor, [-t, -t, -t], [x + t, y + t, 0.0]));
    out.push(colored_box(rng, Ceiling, [-t, -t, z], [x + t, y + t, z + t]));
    out.push(colored_box(rng, Wall, [-t, -t, 0.0], [0.0, y + t, z]));
    out.push(colored_box(rng, Wall, [x, -t, 0.0], [x + t, y + t, z]));
    out.push(colored_box(rng, Wall, [0.0, -t, 0.0], [x, 0.0, z]));
    out.push(colored_box(rng, Wall, [0.0, y, 0.0], [x, y + t, z]));
}

impl SceneModel {
    /// Single closed room with interior `[0,dx]×[0,dy]×[0,dz]` and no furniture.
    pub fn single_room(dims: [f64; 3], wall_thickness: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = Vec::new();
        let t = wall_thickness;
        push_shell(&mut rng, &mut primitives, dims[0], dims[1], dims[2], t);
        Self {
            primitives,
            bounds: Aabb::new([-t, -t, -t], [dims[0] + t, dims[1] + t, dims[2] + t]),
            rooms: vec![Aabb::new([0.0; 3], dims)],
            seed,
        }
    }

    pub fn generate(seed: u64, spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = spec.wall_thickness;
        let h = spec.height;
        let depth = rng.gen_range(spec.room_size_min..=spec.room_size_max);
        let widths: Vec<f64> = (0..spec.room_count)
            .map(|_| rng.gen_range(spec.room_size_min..=spec.room_size_max))
            .collect();

        let mut rooms = Vec::with_capacity(widths.len());
        let mut x = 0.0;
        for (i, w) in widths.iter().enumerate() {
            if i > 0 {
                x += t;
            }
            rooms.push(Aabb::new([x, 0.0, 0.0], [x + w, depth, h]));
            x += w;
        }
        let total_x = x;

        let mut primitives = Vec::new();
        push_shell(&mut rng, &mut primitives, total_x, depth, h, t);

        // partition walls with a door opening
        let margin = 0.5 * spec.agent_diameter;
        for pair in rooms.windows(2) {
            let x0 = pair[0].max[0];
            let x1 = pair[1].min[0];
            let y_lo = margin;
            let y_hi = depth - margin - spec.door_width;
            let yd = if y_hi > y_lo { rng.gen_range(y_lo..=y_hi) } else { 0.5 * (depth - spec.door_width) };
            let yd2 = yd + spec.door_width;
            primitives.push(colored_box(&mut rng, PrimitiveKind::Wall, [x0, 0.0, 0.0], [x1, yd, h]));
            primitives.push(colored_box(&mut rng, PrimitiveKind::Wall, [x0, yd2, 0.0], [x1, depth, h]));
            primitives.push(colored_box(
                &mut rng,
                PrimitiveKind::Wall,
                [x0, yd, spec.door_height],
                [x1, yd2, h],
            ));
        }

        // furniture blocks against the ±y walls, clear of the partitions
        for room in &rooms {
            let mut placed: Vec<Aabb> = Vec::new();
            for _ in 0..spec.furniture_per_room {
                let sx = rng.gen_range(0.5..1.0);
                let sy = rng.gen_range(0.4..0.7);
                let sz = rng.gen_range(0.3..0.5);
                let against_max = rng.gen_bool(0.5);
                let lo = room.min[0] + 0.8;
                let hi = room.max[0] - 0.8 - sx;
                let u = rng.gen_range(0.0..1.0);
                if hi <= lo {
                    continue;
                }
                let fx = lo + u * (hi - lo);
                let (y0, y1) = if against_max { (room.max[1] - sy, room.max[1]) } else { (0.0, sy) };
                let aabb = Aabb::new([fx, y0, 0.0], [fx + sx, y1, sz]);
                let clash = placed.iter().any(|p| {
                    (0..3).all(|k| aabb.min[k] - 0.7 < p.max[k] && aabb.max[k] + 0.7 > p.min[k])
                });
                if clash {
                    continue;
                }
                placed.push(aabb);
                primitives.push(colored_box(&mut rng, PrimitiveKind::Furniture, aabb.min, aabb.max));
            }
        }

        Ok(Self {
            primitives,
            bounds: Aabb::new([-t, -t, -t], [total_x + t, depth + t, h + t]),
            rooms,
            seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Nearest hit with `t > 0` along `origin + t·dir`.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, face)) = p.aabb.ray_entry(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, primitive: i, face });
                }
            }
        }
        best
    }

    pub fn color_of(&self, hit: &Hit) -> Rgb {
        self.primitives[hit.primitive].face_colors[hit.face]
    }

    /// True if `p` lies strictly inside some primitive.
    pub fn is_inside_solid(&self, p: &Vector3<f64>, eps: f64) -> bool {
        self.primitives.iter().any(|b| b.aabb.contains_strict(p, eps))
    }

    /// Distance from a point to the nearest primitive (0 inside one).
    pub fn clearance(&self, p: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|b| b.aabb.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Ray-cast RGB-D frame. Depth is camera-frame z, 0 where nothing is hit.
    pub fn render_rgbd(&self, pose: &CameraPose, intr: &PinholeIntrinsics, exec: Exec) -> RgbdFrame {
        let (w, h) = (intr.width, intr.height);
        let origin = pose.position();
        let c2w = pose.camera_to_world_rotation();
        let mut pixels = vec![([0.0; 3], 0.0); w * h];
        par::for_each_chunk_mut(exec, &mut pixels, w, |v, row| {
            for (u, px) in row.iter_mut().enumerate() {
                // camera ray has unit z, so the hit parameter is the z-depth
                let dir = c2w * intr.ray(u as f64, v as f64);
                if let Some(hit) = self.cast_ray(&origin, &dir) {
                    *px = (self.color_of(&hit), hit.t);
                }
            }
        });
        let color = Image { width: w, height: h, data: pixels.iter().map(|p| p.0).collect() };
        let depth = Image { width: w, height: h, data: pixels.iter().map(|p| p.1).collect() };
        RgbdFrame { pose: *pose, intrinsics: *intr, color, depth, step_index: 0 }
    }

    /// Area-weighted uniform samples on surfaces that face the interior air.
    ///
    /// Faces are drawn proportionally to their full area; a sample is kept
    /// only when a point just off the surface along its normal is inside the
    /// scene bounds and outside every primitive.
    pub fn sample_gt_points(&self, n: usize, seed: u64) -> Result<SurfaceSamples> {
        if n == 0 {
            return Err(invalid("sample count must be positive"));
        }
        let mut faces = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for (i, p) in self.primitives.iter().enumerate() {
            for f in 0..6 {
                let a = p.face_area(f);
                if a > 0.0 {
                    total += a;
                    faces.push((i, f));
                    cumulative.push(total);
                }
            }
        }
        if total <= 0.0 {
            return Err(invalid("scene has no surface area"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = SurfaceSamples {
            points: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            primitive: Vec::with_capacity(n),
            face: Vec::with_capacity(n),
        };
        let mut attempts = 0usize;
        while out.points.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 100_000 {
                return Err(invalid("scene exposes (almost) no interior surface"));
            }
            let r = rng.gen_range(0.0..total);
            let idx = cumulative.partition_point(|c| *c <= r).min(faces.len() - 1);
            let (pi, f) = faces[idx];
            let b = &self.primitives[pi].aabb;
            let axis = f / 2;
            let mut p = Vector3::zeros();
            for k in 0..3 {
                p[k] = if k == axis {
                    if f % 2 == 0 { b.min[k] } else { b.max[k] }
                } else {
                    rng.gen_range(b.min[k]..=b.max[k])
                };
            }
            let probe = p + Vector3::from(FACE_NORMALS[f]) * 1e-6;
            if !self.bounds.contains_strict(&probe, 0.0) || self.is_inside_solid(&probe, 0.0) {
                continue;
            }
            out.points.push(p);
            out.colors.push(self.primitives[pi].face_colors[f]);
            out.primitive.push(pi);
            out.face.push(f);
        }
        Ok(out)
    }

    /// Whether a sphere of `radius` swept from `a` to `b` touches any primitive.
    pub fn segment_collides(&self, a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> bool {
        let r = radius.max(0.0);
        self.primitives.iter().any(|p| p.aabb.segment_distance(a, b) <= r)
    }

    /// A collision-free start position near the middle of the first room.
    pub fn default_start(&self, height: f64) -> Vector3<f64> {
        let c = self.rooms[0].center();
        Vector3::new(c.x, c.y, height)
    }
}

/// Posed color + depth observation.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub pose: CameraPose,
    pub intrinsics: PinholeIntrinsics,
    pub color: ColorImage,
    pub depth: DepthImage,
    pub step_index: usize,
}

impl RgbdFrame {
    pub fn with_step(mut self, step: usize) -> Self {
        self.step_index = step;
        self
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data.iter().filter(|d| **d > 0.0).count()
    }
}
