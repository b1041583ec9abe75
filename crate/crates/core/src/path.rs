//! Local path planning: RRT through free space of the occupancy grid,
//! greedy shortcutting, and per-step pose interpolation.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{invalid, Error, Result};
use crate::grid::OccupancyGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Radius of the spherical agent.
    pub agent_radius: f64,
    pub goal_bias: f64,
    /// Longest RRT edge.
    pub steer_step: f64,
    pub max_iterations: usize,
    /// Longest translation of one agent step.
    pub max_step_length: f64,
    pub max_angular_step_deg: f64,
    /// Radius around the start position assumed free before the first
    /// observation (the agent's own surroundings).
    pub start_clearance: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            agent_radius: 0.2,
            goal_bias: 0.1,
            steer_step: 0.5,
            max_iterations: 5000,
            max_step_length: 0.1,
            max_angular_step_deg: 10.0,
            start_clearance: 0.5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.agent_radius >= 0.0
            && (0.0..=1.0).contains(&self.goal_bias)
            && self.steer_step > 0.0
            && self.max_iterations > 0
            && self.max_step_length > 0.0
            && self.max_angular_step_deg > 0.0
            && self.start_clearance >= self.agent_radius;
        if !ok {
            return Err(Error::Config("invalid path planner settings".into()));
        }
        Ok(())
    }

    pub fn max_angular_step(&self) -> f64 {
        self.max_angular_step_deg.to_radians()
    }
}

fn edge_free(grid: &OccupancyGrid, a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> bool {
    grid.is_free_capsule(a, b, r)
}

/// Collision-free waypoints from `start` to `goal`, both included.
///
/// Edges are accepted only if the agent ball swept along them stays in free
/// voxels. Fails with [`Error::Unreachable`] after `max_iterations` samples.
pub fn plan_path(
    grid: &OccupancyGrid,
    start: &Vector3<f64>,
    goal: &Vector3<f64>,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<Vec<Vector3<f64>>> {
    let r = cfg.agent_radius;
    if !grid.is_free_region(start, r) {
        return Err(invalid("start position lacks agent clearance"));
    }
    if !grid.is_free_region(goal, r) {
        return Err(invalid("goal position lacks agent clearance"));
    }
    if (goal - start).norm() <= 1e-12 {
        return Ok(vec![*start]);
    }
    if edge_free(grid, start, goal, r) {
        return Ok(vec![*start, *goal]);
    }

    let free = grid.free_voxels();
    let vs = grid.voxel_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<(Vector3<f64>, usize)> = vec![(*start, usize::MAX)];
    let mut reached = None;
    for _ in 0..cfg.max_iterations {
        let sample = if rng.gen::<f64>() < cfg.goal_bias {
            *goal
        } else {
            let v = grid.unlinear(free[rng.gen_range(0..free.len())]);
            let lo = grid.voxel_box(v).min;
            Vector3::new(
                lo[0] + rng.gen::<f64>() * vs,
                lo[1] + rng.gen::<f64>() * vs,
                lo[2] + rng.gen::<f64>() * vs,
            )
        };
        let (near, _) = nodes
            .iter()
            .enumerate()
            .map(|(i, (p, _))| (i, (p - sample).norm_squared()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let from = nodes[near].0;
        let delta = sample - from;
        let len = delta.norm();
        if len <= 1e-12 {
            continue;
        }
        let to = if len > cfg.steer_step { from + delta * (cfg.steer_step / len) } else { sample };
        if !edge_free(grid, &from, &to, r) {
            continue;
        }
        nodes.push((to, near));
        let id = nodes.len() - 1;
        if (goal - to).norm() <= cfg.steer_step && edge_free(grid, &to, goal, r) {
            nodes.push((*goal, id));
            reached = Some(nodes.len() - 1);
            break;
        }
    }
    let Some(mut i) = reached else {
        return Err(Error::Unreachable(cfg.max_iterations));
    };
    let mut raw = Vec::new();
    while i != usize::MAX {
        raw.push(nodes[i].0);
        i = nodes[i].1;
    }
    raw.reverse();
    Ok(shortcut(grid, &raw, r))
}

/// Greedy smoothing: from each kept waypoint jump to the farthest later one
/// reachable by a free straight edge.
pub fn shortcut(grid: &OccupancyGrid, path: &[Vector3<f64>], r: f64) -> Vec<Vector3<f64>> {
    if path.len() <= 2 {
        return path.to_vec();
    }
    let mut out = vec![path[0]];
    let mut i = 0;
    while i < path.len() - 1 {
        let mut j = path.len() - 1;
        while j > i + 1 && !edge_free(grid, &path[i], &path[j], r) {
            j -= 1;
        }
        out.push(path[j]);
        i = j;
    }
    out
}

pub fn path_length(path: &[Vector3<f64>]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Constant-rate geodesic interpolation from `start` to `goal`, excluding
/// `start` and ending exactly at `goal`.
pub fn plan_rotation(
    start: &UnitQuaternion<f64>,
    goal: &UnitQuaternion<f64>,
    max_step: f64,
) -> Vec<UnitQuaternion<f64>> {
    let angle = start.angle_to(goal);
    let n = (angle / max_step - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return vec![*goal];
    }
    (1..=n)
        .map(|i| if i == n { *goal } else { slerp(start, goal, i as f64 / n as f64) })
        .collect()
}

fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, t: f64) -> UnitQuaternion<f64> {
    // shortest arc; antipodal pairs (angle π) fall back to an arbitrary axis
    a.try_slerp(b, t, 1e-12).unwrap_or_else(|| {
        let rel = a.inverse() * b;
        let axis = rel.axis().unwrap_or(Vector3::z_axis());
        a * UnitQuaternion::from_axis_angle(&axis, rel.angle() * t)
    })
}

/// A sequence of agent poses consumed one per step.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPlan {
    pub poses: Vec<CameraPose>,
    pub goal: CameraPose,
    pub cursor: usize,
}

impl PathPlan {
    pub fn next_pose(&mut self) -> Option<CameraPose> {
        let p = self.poses.get(self.cursor).copied();
        if p.is_some() {
            self.cursor += 1;
        }
        p
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor >= self.poses.len()
    }

    pub fn remaining(&self) -> usize {
        self.poses.len() - self.cursor
    }
}

fn heading(from: &Vector3<f64>, to: &Vector3<f64>, fallback: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let d = to - from;
    if d.norm() <= 1e-12 {
        *fallback
    } else {
        CameraPose::look_at(*from, d).orientation()
    }
}

/// Turns waypoints into per-step poses.
///
/// Leg `k` runs from waypoint `k` to `k+1`, moving at most `max_step_length`
/// and turning at most `max_angular_step` per step. Orientation at interior
/// waypoints faces along the outgoing segment; the first leg starts from the
/// start orientation and the last ends at the goal orientation.
pub fn assemble_plan(
    waypoints: &[Vector3<f64>],
    start: &CameraPose,
    goal: &CameraPose,
    max_step_length: f64,
    max_angular_step: f64,
) -> Result<PathPlan> {
    if waypoints.is_empty() {
        return Err(invalid("empty waypoint list"));
    }
    let q_start = start.orientation();
    let q_goal = goal.orientation();
    let m = waypoints.len() - 1;
    let orient: Vec<UnitQuaternion<f64>> = (0..=m)
        .map(|k| match k {
            0 => q_start,
            k if k == m => q_goal,
            k => heading(&waypoints[k], &waypoints[k + 1], &q_goal),
        })
        .collect();

    let mut poses = Vec::new();
    if m == 0 {
        for q in plan_rotation(&q_start, &q_goal, max_angular_step) {
            poses.push(CameraPose::from_orientation(&q, &waypoints[0]));
        }
    }
    for k in 0..m {
        let (a, b) = (waypoints[k], waypoints[k + 1]);
        let len = (b - a).norm();
        let ang = orient[k].angle_to(&orient[k + 1]);
        let n = ((len / max_step_length - 1e-9).ceil())
            .max((ang / max_angular_step - 1e-9).ceil())
            .max(1.0) as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let p = a + (b - a) * t;
            let q = slerp(&orient[k], &orient[k + 1], t);
            poses.push(CameraPose::from_orientation(&q, &p));
        }
    }
    if let Some(last) = poses.last_mut() {
        *last = CameraPose::from_orientation(&q_goal, &waypoints[m]);
    }
    Ok(PathPlan { poses, goal: CameraPose::from_orientation(&q_goal, &waypoints[m]), cursor: 0 })
}
