//! The exploration loop, post-refinement, and run artifacts.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, PinholeIntrinsics};
use crate::error::{Error, Result};
use crate::gaussian::GaussianMap;
use crate::grid::OccupancyGrid;
use crate::keyframe::{KeyframeConfig, KeyframeDatabase};
use crate::metrics::{self, GeomReport, RenderReport};
use crate::nbv::{CandidateKey, CandidatePool, EvalContext, SamplingConfig, Stage};
use crate::optim::{self, LossRecord, LossTraceWriter, OptimConfig};
use crate::par::Exec;
use crate::path::{self, PathPlan, PlannerConfig};
use crate::ply;
use crate::render;
use crate::scene::{SceneModel, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    /// Height of the agent's starting position.
    pub start_height: f64,
    #[serde(flatten)]
    pub spec: SceneSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { seed: 7, start_height: 1.2, spec: SceneSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { width: 64, height: 64, hfov_deg: 90.0, vfov_deg: 90.0 }
    }
}

impl SensorConfig {
    pub fn intrinsics(&self) -> Result<PinholeIntrinsics> {
        PinholeIntrinsics::from_fov(self.width, self.height, self.hfov_deg, self.vfov_deg)
            .map_err(|e| Error::Config(format!("sensor: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub voxel_size: f64,
    pub max_range: f64,
    /// Padding around the scene bounds, in voxels.
    pub padding: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { voxel_size: 0.05, max_range: 5.0, padding: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbvConfig {
    pub coarse: SamplingConfig,
    pub fine: SamplingConfig,
    /// Resolution of the candidate silhouette renders.
    pub render_width: usize,
    pub render_height: usize,
    /// Goal candidates tried per step before giving up until the next one.
    pub max_replans: usize,
}

impl Default for NbvConfig {
    fn default() -> Self {
        Self {
            coarse: SamplingConfig::coarse(),
            fine: SamplingConfig::fine(),
            render_width: 64,
            render_height: 64,
            max_replans: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    /// Steps after which the coarse stage is cut short.
    pub coarse_steps: usize,
    /// Total exploration steps.
    pub max_steps: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { coarse_steps: 1000, max_steps: 1500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Refinement rounds; each densifies one anchor keyframe and optimizes.
    pub rounds: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { rounds: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub gt_samples: usize,
    pub gt_seed: u64,
    pub threshold_cm: f64,
    /// Opacity above which splat centers count as map points.
    pub min_opacity: f64,
    pub orbit_views: usize,
    pub orbit_height: f64,
    pub orbit_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gt_samples: 100_000,
            gt_seed: 1,
            threshold_cm: 5.0,
            min_opacity: 0.5,
            orbit_views: 36,
            orbit_height: 1.2,
            orbit_radius: 1.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub exec: Exec,
    pub save_keyframe_png: bool,
    pub scene: SceneConfig,
    pub sensor: SensorConfig,
    pub grid: GridConfig,
    pub nbv: NbvConfig,
    pub optim: OptimConfig,
    pub keyframes: KeyframeConfig,
    pub path: PlannerConfig,
    pub budget: BudgetConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            exec: Exec::Parallel,
            save_keyframe_png: false,
            scene: SceneConfig::default(),
            sensor: SensorConfig::default(),
            grid: GridConfig::default(),
            nbv: NbvConfig::default(),
            optim: OptimConfig::default(),
            keyframes: KeyframeConfig::default(),
            path: PlannerConfig::default(),
            budget: BudgetConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.spec.validate().map_err(|e| Error::Config(format!("scene: {e}")))?;
        self.sensor.intrinsics()?;
        if !(self.grid.voxel_size > 0.0 && self.grid.max_range > 0.0) {
            return Err(Error::Config("voxel size and max range must be positive".into()));
        }
        self.nbv.coarse.validate()?;
        self.nbv.fine.validate()?;
        if self.nbv.render_width == 0 || self.nbv.render_height == 0 || self.nbv.max_replans == 0 {
            return Err(Error::Config("planner render size and replan count must be positive".into()));
        }
        self.optim.validate()?;
        self.keyframes.validate()?;
        self.path.validate()?;
        if self.budget.max_steps == 0 || self.budget.coarse_steps == 0 {
            return Err(Error::Config("step budgets must be positive".into()));
        }
        if self.eval.gt_samples == 0 || self.eval.orbit_views == 0 {
            return Err(Error::Config("evaluation sizes must be positive".into()));
        }
        if self.nbv.coarse.surface_buffer < self.path.agent_radius || self.nbv.fine.surface_buffer < self.path.agent_radius
        {
            return Err(Error::Config("surface buffer must be at least the agent radius".into()));
        }
        Ok(())
    }

    pub fn build_scene(&self) -> Result<SceneModel> {
        SceneModel::generate(self.scene.seed, &self.scene.spec)
    }

    pub fn planner_intrinsics(&self) -> Result<PinholeIntrinsics> {
        SensorConfig { width: self.nbv.render_width, height: self.nbv.render_height, ..self.sensor.clone() }.intrinsics()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStage {
    Coarse,
    Fine,
    Refine,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub position: [f64; 3],
    /// Camera→world rotation as `[w, x, y, z]`.
    pub orientation: [f64; 4],
    pub stage: RunStage,
}

impl TrajectoryRecord {
    fn new(step: usize, pose: &CameraPose, stage: RunStage) -> Self {
        let q = pose.orientation();
        let p = pose.position();
        Self { step, position: [p.x, p.y, p.z], orientation: [q.w, q.i, q.j, q.k], stage }
    }
}

/// Mutable state of a run.
pub struct RunState {
    pub t: usize,
    pub stage: RunStage,
    pub pose: CameraPose,
    pub plan: Option<PathPlan>,
    pub plan_required: bool,
    pub map: GaussianMap,
    pub grid: OccupancyGrid,
    pub pool: CandidatePool,
    pub db: KeyframeDatabase,
    pub goal: Option<CandidateKey>,
    /// The agent reached its goal and waits for the next keyframe there.
    pub arrived: bool,
    pub trajectory: Vec<TrajectoryRecord>,
    pub loss: Vec<LossRecord>,
    pub coarse_exit: Option<(usize, GaussianMap)>,
    pub budget_exhausted: bool,
    /// Optimizer moments, used when `optim.persistent_moments` is set.
    pub adam: optim::Adam,
}

/// What one step did; handy for tests and logging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub keyframe: bool,
    pub goal_searched: bool,
    pub densified: usize,
    pub newly_freed: usize,
    pub pool_size: usize,
    pub moved: bool,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub scene: SceneModel,
    pub intr: PinholeIntrinsics,
    pub planner_intr: PinholeIntrinsics,
    pub state: RunState,
    start: Vector3<f64>,
    pool_dir: Option<PathBuf>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let scene = cfg.build_scene()?;
        let intr = cfg.sensor.intrinsics()?;
        let planner_intr = cfg.planner_intrinsics()?;
        let grid = OccupancyGrid::covering(&scene.bounds, cfg.grid.voxel_size, cfg.grid.padding)?;
        let start = scene.default_start(cfg.scene.start_height);
        if scene.clearance(&start) < cfg.path.start_clearance {
            return Err(Error::Config(format!(
                "start {start:?} has less than {} m clearance",
                cfg.path.start_clearance
            )));
        }
        let pose = CameraPose::look_at(start, Vector3::x());
        let state = RunState {
            t: 0,
            stage: RunStage::Coarse,
            pose,
            plan: None,
            plan_required: true,
            map: GaussianMap::new(),
            grid,
            pool: CandidatePool::new(),
            db: KeyframeDatabase::new(cfg.keyframes.clone()),
            goal: None,
            arrived: false,
            trajectory: Vec::new(),
            loss: Vec::new(),
            coarse_exit: None,
            budget_exhausted: false,
            adam: optim::Adam::new(0, &cfg.optim),
        };
        Ok(Self { cfg, scene, intr, planner_intr, state, start, pool_dir: None })
    }

    /// Writes a pool snapshot to `dir` at every keyframe step.
    pub fn with_pool_history(mut self, dir: PathBuf) -> Self {
        self.pool_dir = Some(dir);
        self
    }

    fn sampling(&self) -> &SamplingConfig {
        match self.state.pool.stage() {
            Stage::Coarse => &self.cfg.nbv.coarse,
            Stage::Fine => &self.cfg.nbv.fine,
        }
    }

    pub fn is_exploring(&self) -> bool {
        matches!(self.state.stage, RunStage::Coarse | RunStage::Fine)
    }

    /// Advances the agent by one step.
    pub fn step(&mut self) -> Result<StepReport> {
        if !self.is_exploring() {
            return Err(Error::InvalidArgument("step called after exploration ended".into()));
        }
        let mut rep = StepReport::default();
        let t = self.state.t;
        let exec = self.cfg.exec;
        let rcfg = self.cfg.optim.render.with_exec(exec);
        let obs = self.scene.render_rgbd(&self.state.pose, &self.intr, exec).with_step(t);
        self.state.trajectory.push(TrajectoryRecord::new(t, &self.state.pose, self.state.stage));

        if self.state.db.is_keyframe_step(t) {
            rep.keyframe = true;
            let before = render::render(&self.state.map, &obs.pose, &self.intr, &rcfg);
            self.state.db.insert(obs.clone(), &before)?;
            if self.cfg.save_keyframe_png {
                if let Some(dir) = &self.pool_dir {
                    let kdir = dir.with_file_name("keyframes");
                    fs::create_dir_all(&kdir)?;
                    crate::image::save_color_png(&before.color, &kdir.join(format!("render_{t:05}.png")))?;
                    crate::image::save_color_png(&obs.color, &kdir.join(format!("observed_{t:05}.png")))?;
                }
            }
            let optim_cfg = OptimConfig { render: rcfg, ..self.cfg.optim.clone() };
            rep.densified =
                optim::densify(&mut self.state.map, &obs, &optim_cfg, self.cfg.optim.densify_divisor_exploration)?;
            let frames = self.state.db.frames_for_update(&obs, self.cfg.keyframes.k, mix(self.cfg.seed, 1, t as u64));
            let iters = self.cfg.optim.iterations_exploration;
            let trace = update(&mut self.state.map, &mut self.state.adam, &frames, &optim_cfg, iters)?;
            self.state.loss.extend(trace);

            let mut newly = self.state.grid.integrate_with(&obs, self.cfg.grid.max_range, exec);
            if t == 0 {
                let body = self.state.grid.mark_free_sphere(&self.start, self.cfg.path.start_clearance);
                let mut all: BTreeSet<usize> = newly.into_iter().collect();
                all.extend(body);
                newly = all.into_iter().collect();
            }
            rep.newly_freed = newly.len();
            let gs = self.state.map.gaussians();
            let ctx = EvalContext { map: &gs, intrinsics: &self.planner_intr, render: &rcfg, step: t, exec };
            let sampling = self.sampling().clone();
            let stats = self.state.pool.update(&newly, &self.state.grid, &sampling, &ctx);
            debug!("t={t}: pool +{} -{} ({} evaluated)", stats.added, stats.removed, stats.evaluated);
            if self.state.arrived {
                if let Some(k) = self.state.goal.take() {
                    self.state.pool.remove(&k);
                }
                self.state.arrived = false;
                self.state.plan = None;
                self.state.plan_required = true;
            }
            self.check_drain(t)?;
            if let Some(dir) = &self.pool_dir {
                self.state.pool.save_json(&dir.join(format!("pool_{t:05}.json")))?;
            }
        }

        if self.is_exploring() && self.state.plan_required {
            rep.goal_searched = true;
            self.search_goal(t)?;
        }

        if self.is_exploring() {
            if let Some(plan) = self.state.plan.as_mut() {
                if let Some(p) = plan.next_pose() {
                    self.state.pose = p;
                    rep.moved = true;
                }
                if plan.is_exhausted() {
                    self.state.arrived = true;
                }
            }
        }
        rep.pool_size = self.state.pool.len();
        self.state.t += 1;
        if self.is_exploring() {
            if self.state.t >= self.cfg.budget.max_steps {
                warn!("step budget of {} exhausted before the pool drained", self.cfg.budget.max_steps);
                self.state.budget_exhausted = true;
                self.state.stage = RunStage::Refine;
            } else if self.state.stage == RunStage::Coarse && self.state.t >= self.cfg.budget.coarse_steps {
                warn!("coarse budget of {} steps exhausted; moving to the fine stage", self.cfg.budget.coarse_steps);
                self.enter_fine(self.state.t)?;
            }
        }
        Ok(rep)
    }

    fn enter_fine(&mut self, t: usize) -> Result<()> {
        info!("t={t}: coarse stage done, map has {} splats", self.state.map.len());
        self.state.coarse_exit = Some((t, self.state.map.clone()));
        self.state.stage = RunStage::Fine;
        self.state.plan = None;
        self.state.goal = None;
        self.state.arrived = false;
        self.state.plan_required = true;
        let gs = self.state.map.gaussians();
        let rcfg = self.cfg.optim.render.with_exec(self.cfg.exec);
        let ctx = EvalContext { map: &gs, intrinsics: &self.planner_intr, render: &rcfg, step: t, exec: self.cfg.exec };
        let stats = self.state.pool.advance_stage(&self.state.grid, &self.cfg.nbv.fine, &ctx);
        info!("fine stage: {} candidates sampled, {} kept", stats.added, self.state.pool.len());
        Ok(())
    }

    fn check_drain(&mut self, t: usize) -> Result<()> {
        if !self.state.pool.is_empty() {
            return Ok(());
        }
        if self.state.stage == RunStage::Coarse {
            self.enter_fine(t)?;
        }
        if self.state.pool.is_empty() && self.state.stage == RunStage::Fine {
            info!("t={t}: fine pool drained, exploration done");
            self.state.stage = RunStage::Refine;
            self.state.plan = None;
        }
        Ok(())
    }

    fn search_goal(&mut self, t: usize) -> Result<()> {
        let here = self.state.pose.position();
        for attempt in 0..self.cfg.nbv.max_replans {
            let Some((cand, gain)) = self.state.pool.goal_search(&self.state.pose) else {
                break;
            };
            let seed = mix(self.cfg.seed, 2 + attempt as u64, t as u64);
            match path::plan_path(&self.state.grid, &here, &cand.position(), &self.cfg.path, seed) {
                Ok(wps) => {
                    let plan = path::assemble_plan(
                        &wps,
                        &self.state.pose,
                        &cand.pose,
                        self.cfg.path.max_step_length,
                        self.cfg.path.max_angular_step(),
                    )?;
                    debug!("t={t}: goal {:?} gain {gain:.4}, {} steps", cand.key, plan.poses.len());
                    self.state.plan = Some(plan);
                    self.state.goal = Some(cand.key);
                    self.state.plan_required = false;
                    return Ok(());
                }
                Err(e) => {
                    debug!("t={t}: dropping unreachable candidate {:?}: {e}", cand.key);
                    self.state.pool.remove(&cand.key);
                }
            }
        }
        self.check_drain(t)
    }

    /// Steps until the pool drains or the budget runs out.
    pub fn explore(&mut self) -> Result<()> {
        while self.is_exploring() {
            self.step()?;
        }
        Ok(())
    }

    /// Post-refinement over the keyframe database, then opacity pruning.
    pub fn refine(&mut self) -> Result<Vec<LossRecord>> {
        let rcfg = self.cfg.optim.render.with_exec(self.cfg.exec);
        let optim_cfg = OptimConfig { render: rcfg, ..self.cfg.optim.clone() };
        let db = &self.state.db;
        let mut anchors = if self.cfg.keyframes.use_global { db.globals() } else { Vec::new() };
        if anchors.is_empty() {
            anchors = (0..db.len()).collect();
        }
        let mut trace = Vec::new();
        if !anchors.is_empty() {
            for round in 0..self.cfg.refine.rounds {
                let a = &db.records[anchors[round % anchors.len()]].frame;
                optim::densify(&mut self.state.map, a, &optim_cfg, self.cfg.optim.densify_divisor_refinement)?;
                let seed = mix(self.cfg.seed, 3, round as u64);
                let frames = db.frames_for_update(a, self.cfg.keyframes.k, seed);
                trace.extend(update(
                    &mut self.state.map,
                    &mut self.state.adam,
                    &frames,
                    &optim_cfg,
                    self.cfg.optim.iterations_refinement,
                )?);
            }
        }
        if self.cfg.refine.rounds > 0 {
            let pruned = self.state.map.prune(self.cfg.optim.prune_opacity);
            info!("refinement pruned {pruned} splats, {} remain", self.state.map.len());
        }
        self.state.stage = RunStage::Done;
        Ok(trace)
    }
}

fn update(
    map: &mut GaussianMap,
    adam: &mut optim::Adam,
    frames: &[&crate::scene::RgbdFrame],
    cfg: &OptimConfig,
    iterations: usize,
) -> Result<Vec<LossRecord>> {
    if cfg.persistent_moments {
        optim::update_map_with(map, adam, frames, cfg, iterations)
    } else {
        optim::update_map(map, frames, cfg, iterations)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub budget_exhausted: bool,
    pub coarse_exit_step: Option<usize>,
    pub keyframes: usize,
    pub global_keyframes: usize,
    pub exploration_splats: usize,
    pub refined_splats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeomMetrics {
    /// Primary geometric result: the map at the end of exploration.
    pub exploration: GeomReport,
    pub refined: GeomReport,
    pub coarse_exit: Option<GeomReport>,
    pub budget_exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderMetrics {
    /// Primary rendering result: the refined map.
    pub refined: RenderReport,
    pub exploration: RenderReport,
    pub budget_exhausted: bool,
}

pub mod artifacts {
    pub const CONFIG: &str = "config.toml";
    pub const SCENE: &str = "scene.json";
    pub const TRAJECTORY: &str = "trajectory.jsonl";
    pub const EXPLORATION_MODEL: &str = "exploration_model.ply";
    pub const REFINED_MODEL: &str = "refined_model.ply";
    pub const COARSE_MODEL: &str = "coarse_model.ply";
    pub const GRID_BIN: &str = "grid.bin";
    pub const GRID_JSON: &str = "grid.json";
    pub const KEYFRAMES: &str = "keyframes.json";
    pub const POOL_HISTORY: &str = "pool_history";
    pub const METRICS_GEOM: &str = "metrics_geom.json";
    pub const METRICS_RENDER: &str = "metrics_render.json";
    pub const LOSS_TRACE: &str = "loss_trace.csv";
    pub const SUMMARY: &str = "run_summary.json";
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub geom: GeomMetrics,
    pub render: RenderMetrics,
}

impl RunOutcome {
    /// Process exit code: 0 on success, 2 when the step budget ran out.
    pub fn exit_code(&self) -> i32 {
        if self.summary.budget_exhausted {
            2
        } else {
            0
        }
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

/// Full run: exploration, refinement, artifacts and metrics.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    use artifacts::*;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(dir.join(POOL_HISTORY))?;
    fs::write(dir.join(CONFIG), cfg.to_toml()?)?;

    let mut pipe = Pipeline::new(cfg.clone())?.with_pool_history(dir.join(POOL_HISTORY));
    fs::write(dir.join(SCENE), pipe.scene.to_json()?)?;
    info!("scene seed {} with {} primitives", cfg.scene.seed, pipe.scene.primitives.len());
    pipe.explore()?;
    info!(
        "exploration finished after {} steps with {} splats ({} keyframes)",
        pipe.state.t,
        pipe.state.map.len(),
        pipe.state.db.len()
    );
    let exploration = pipe.state.map.clone();
    let refine_trace = pipe.refine()?;

    let st = &pipe.state;
    let mut traj = std::io::BufWriter::new(fs::File::create(dir.join(TRAJECTORY))?);
    for r in &st.trajectory {
        writeln!(traj, "{}", serde_json::to_string(r)?)?;
    }
    traj.flush()?;
    ply::save_ply(&exploration, &dir.join(EXPLORATION_MODEL))?;
    ply::save_ply(&st.map, &dir.join(REFINED_MODEL))?;
    if let Some((_, m)) = &st.coarse_exit {
        ply::save_ply(m, &dir.join(COARSE_MODEL))?;
    }
    st.grid.save(&dir.join(GRID_BIN), &dir.join(GRID_JSON))?;
    st.db.save_json(&dir.join(KEYFRAMES))?;
    let mut lw = LossTraceWriter::create(&dir.join(LOSS_TRACE))?;
    lw.append(&st.loss)?;
    lw.append(&refine_trace)?;
    lw.finish()?;

    let summary = RunSummary {
        steps: st.t,
        budget_exhausted: st.budget_exhausted,
        coarse_exit_step: st.coarse_exit.as_ref().map(|c| c.0),
        keyframes: st.db.len(),
        global_keyframes: st.db.globals().len(),
        exploration_splats: exploration.len(),
        refined_splats: st.map.len(),
    };
    write_json(&dir.join(SUMMARY), &summary)?;
    let (geom, render) = evaluate_run_dir(&dir)?;
    Ok(RunOutcome { dir, summary, geom, render })
}

/// Recomputes both metric reports from the artifacts in `dir` and writes them.
pub fn evaluate_run_dir(dir: &Path) -> Result<(GeomMetrics, RenderMetrics)> {
    use artifacts::*;
    let cfg = RunConfig::load(&dir.join(CONFIG))?;
    let scene = SceneModel::from_json(&fs::read_to_string(dir.join(SCENE))?)?;
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY))?)?;
    let exploration = ply::load_ply(&dir.join(EXPLORATION_MODEL))?;
    let refined = ply::load_ply(&dir.join(REFINED_MODEL))?;
    let coarse = dir.join(COARSE_MODEL);
    let coarse = if coarse.exists() { Some(ply::load_ply(&coarse)?) } else { None };

    let e = &cfg.eval;
    let exec = cfg.exec;
    let gt = scene.sample_gt_points(e.gt_samples, e.gt_seed)?.points;
    let geo = |m: &GaussianMap| metrics::geometric_eval(m, &gt, e.threshold_cm, e.min_opacity, exec);
    let geom = GeomMetrics {
        exploration: geo(&exploration)?,
        refined: geo(&refined)?,
        coarse_exit: coarse.as_ref().map(geo).transpose()?,
        budget_exhausted: summary.budget_exhausted,
    };
    let intr = cfg.sensor.intrinsics()?;
    let poses = metrics::orbit_poses(&scene, e.orbit_views, e.orbit_height, e.orbit_radius, cfg.path.agent_radius);
    let rcfg = cfg.optim.render.with_exec(exec);
    let render = RenderMetrics {
        refined: metrics::render_eval(&refined, &poses, &scene, &intr, &rcfg)?.0,
        exploration: metrics::render_eval(&exploration, &poses, &scene, &intr, &rcfg)?.0,
        budget_exhausted: summary.budget_exhausted,
    };
    write_json(&dir.join(METRICS_GEOM), &geom)?;
    write_json(&dir.join(METRICS_RENDER), &render)?;
    Ok((geom, render))
}

/// Loads the refined (or exploration) model of a run and renders it at `pose`.
pub fn render_from_run_dir(dir: &Path, pose: &CameraPose, exploration: bool) -> Result<render::RenderOutput> {
    use artifacts::*;
    let cfg = RunConfig::load(&dir.join(CONFIG))?;
    let model = if exploration { EXPLORATION_MODEL } else { REFINED_MODEL };
    let map = ply::load_ply(&dir.join(model))?;
    pose.validate()?;
    Ok(render::render(&map, pose, &cfg.sensor.intrinsics()?, &cfg.optim.render.with_exec(cfg.exec)))
}
