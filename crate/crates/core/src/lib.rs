//! Active reconstruction of synthetic box scenes with isotropic Gaussian
//! splats: a simulated RGB-D agent builds a splat map by differentiable
//! rendering and picks its next views from the map's coverage gaps.

pub mod camera;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod image;
pub mod keyframe;
pub mod metrics;
pub mod nbv;
pub mod optim;
pub mod par;
pub mod path;
pub mod pipeline;
pub mod ply;
pub mod render;
pub mod scene;

pub use camera::{CameraPose, PinholeIntrinsics};
pub use error::{Error, Result};
pub use gaussian::{Gaussian, GaussianMap};
pub use grid::{OccupancyGrid, VoxelState};
pub use keyframe::{KeyframeConfig, KeyframeDatabase};
pub use nbv::{CandidatePool, SamplingConfig};
pub use optim::OptimConfig;
pub use par::Exec;
pub use path::{PathPlan, PlannerConfig};
pub use pipeline::{RunConfig, RunOutcome};
pub use render::{RenderConfig, RenderOutput};
pub use scene::{RgbdFrame, SceneModel, SceneSpec};
