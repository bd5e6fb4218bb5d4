//! A scripted tabletop world: blocks, buttons and slots on a table, seen by
//! synthetic pinhole RGB-D cameras, manipulated by a teleporting gripper.
//!
//! The world renders observations for the voxelizer, generates expert
//! demonstrations in the demo format, executes discrete actions and scores
//! closed-loop episodes.

mod eval;
mod render;
mod scene;
mod tasks;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::voxelizer::WorkspaceBounds;

pub use eval::{
    evaluate, Agent, AgentObservation, EpisodeRecord, EpisodeResult, EvalOptions, EvalReport, EvalRow,
    ExpertReplayAgent, GoalMode, PolicyAgent, RandomAgent, Termination, ToyEpisode,
};
pub use render::{camera_rig, render_views, CameraPose, Hit, Ray};
pub use scene::{GripperState, ObjectShape, SceneObject, SceneState, BLOCK_SIZE};
pub use tasks::{expert_waypoints, generate_demos, reset, scripted_expert, TaskKind, TaskSpec, Waypoint};

/// The 20 color names with fixed RGB values.
pub const PALETTE: [(&str, [u8; 3]); 20] = [
    ("red", [230, 25, 25]),
    ("maroon", [128, 0, 0]),
    ("lime", [60, 230, 40]),
    ("green", [0, 128, 0]),
    ("blue", [30, 60, 230]),
    ("navy", [0, 0, 128]),
    ("yellow", [240, 230, 40]),
    ("cyan", [40, 230, 230]),
    ("magenta", [230, 40, 230]),
    ("silver", [192, 192, 192]),
    ("gray", [128, 128, 128]),
    ("orange", [245, 130, 30]),
    ("olive", [128, 128, 0]),
    ("purple", [128, 0, 128]),
    ("teal", [0, 128, 128]),
    ("azure", [0, 127, 255]),
    ("violet", [143, 0, 255]),
    ("rose", [255, 0, 127]),
    ("black", [20, 20, 20]),
    ("white", [245, 245, 245]),
];

pub fn color_name(index: usize) -> &'static str {
    PALETTE[index].0
}

pub fn color_index(name: &str) -> Result<usize> {
    PALETTE
        .iter()
        .position(|(n, _)| *n == name)
        .ok_or_else(|| invalid(format!("unknown color '{name}'")))
}

pub(crate) const TABLE_RGB: [u8; 3] = [150, 110, 70];
pub(crate) const GRIPPER_RGB: [u8; 3] = [90, 90, 100];

/// World geometry and rendering settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub bounds: WorkspaceBounds,
    /// Square image side in pixels.
    pub image_size: usize,
    /// 1 to 4 cameras: front, overhead, left, right.
    pub num_cameras: usize,
    /// Grasp and press reach in meters; both default to 1.5 voxel edges.
    pub grasp_radius: f64,
    pub press_radius: f64,
    /// Dense frames between consecutive expert waypoints.
    pub frames_per_segment: usize,
}

impl ToyWorldConfig {
    /// A 0.64 m cube over the table (surface at z = 0), `grid` voxels per axis.
    pub fn with_grid(grid: usize) -> Result<Self> {
        let bounds = WorkspaceBounds::cube([-0.32, -0.32, -0.03], 0.64, grid)?;
        let edge = bounds.edge();
        Ok(Self {
            bounds,
            image_size: 80,
            num_cameras: 2,
            grasp_radius: 1.5 * edge,
            press_radius: 1.5 * edge,
            frames_per_segment: 8,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.bounds.validate() {
            errs.push(e.to_string());
        }
        if self.image_size < 8 {
            errs.push(format!("image_size {} is below 8 pixels", self.image_size));
        }
        if !(1..=4).contains(&self.num_cameras) {
            errs.push(format!("num_cameras {} must be between 1 and 4", self.num_cameras));
        }
        for (name, v) in [("grasp_radius", self.grasp_radius), ("press_radius", self.press_radius)] {
            if !(v.is_finite() && v > 0.0) {
                errs.push(format!("{name} {v} must be positive"));
            }
        }
        if self.frames_per_segment < 2 {
            errs.push("frames_per_segment must be at least 2".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self::with_grid(32).expect("valid default workspace")
    }
}
