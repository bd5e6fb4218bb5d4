//! Demonstrations -> keyframes -> supervised next-keyframe tuples.

mod dataset;

use nalgebra::UnitQuaternion;

use crate::action_codec::{discretize, ContinuousAction, DiscreteAction, RotationBins};
use crate::error::{invalid, Result};
use crate::voxelizer::{fuse_points, project_views, CameraView, ColoredPoint, VoxelGrid, WorkspaceBounds};

pub use dataset::{load_dataset, load_episode, save_dataset, DATASET_VERSION};

/// Default joint-speed threshold (rad/s) below which the arm counts as still.
pub const DEFAULT_VEL_EPSILON: f64 = 0.1;

/// Finger joint position (m) of a fully open gripper; closed is zero.
pub const FINGER_OPEN_POSITION: f32 = 0.04;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoFrame {
    pub views: Vec<CameraView>,
    pub gripper_position: [f64; 3],
    pub gripper_orientation: UnitQuaternion<f64>,
    pub gripper_open: bool,
    /// Joint velocities in rad/s.
    pub joint_velocities: Vec<f64>,
    pub timestep: u64,
}

impl DemoFrame {
    fn finger_position(&self) -> f32 {
        if self.gripper_open {
            FINGER_OPEN_POSITION
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoEpisode {
    pub frames: Vec<DemoFrame>,
    pub language_goal: String,
    pub task_id: String,
    pub variation_id: u32,
    /// `collide_flags[i]` describes the motion that arrives at frame `i`.
    pub collide_flags: Vec<bool>,
}

impl DemoEpisode {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(invalid(format!("episode has {} frames; at least 2 required", self.frames.len())));
        }
        if self.language_goal.trim().is_empty() {
            return Err(invalid("episode language goal is empty"));
        }
        if self.collide_flags.len() != self.frames.len() {
            return Err(invalid("collide flags must have one entry per frame"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let n = f.gripper_orientation.quaternion().norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("frame {i} orientation is not a unit quaternion")));
            }
            if i > 0 && f.timestep <= self.frames[i - 1].timestep {
                return Err(invalid(format!("timestep does not increase at frame {i}")));
            }
        }
        Ok(())
    }

    /// Continuous action encoded by frame `i`.
    pub fn action_at(&self, i: usize) -> ContinuousAction {
        let f = &self.frames[i];
        ContinuousAction {
            position: f.gripper_position,
            orientation: f.gripper_orientation,
            open: f.gripper_open,
            collide: self.collide_flags[i],
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn same_pose(a: &DemoFrame, b: &DemoFrame) -> bool {
    let dp = (0..3).map(|k| (a.gripper_position[k] - b.gripper_position[k]).abs()).fold(0.0, f64::max);
    let qa = a.gripper_orientation.quaternion().coords;
    let qb = b.gripper_orientation.quaternion().coords;
    // q and -q are the same rotation.
    let dq = (qa - qb).amax().min((qa + qb).amax());
    dp <= 1e-6 && dq <= 1e-6 && a.gripper_open == b.gripper_open
}

/// Frames where the arm is at rest with an unchanged gripper, or where the
/// gripper state changes. The final frame is always included and
/// consecutive keyframes with identical pose and gripper state collapse to
/// the first.
pub fn extract_keyframes(episode: &DemoEpisode, vel_epsilon: f64) -> Result<Vec<usize>> {
    if episode.frames.len() < 2 {
        return Err(invalid("keyframe extraction needs at least 2 frames"));
    }
    let frames = &episode.frames;
    let mut keys: Vec<usize> = Vec::new();
    let push = |i: usize, keys: &mut Vec<usize>| match keys.last() {
        Some(&k) if same_pose(&frames[k], &frames[i]) => {}
        _ => keys.push(i),
    };
    for i in 1..frames.len() {
        let changed = frames[i].gripper_open != frames[i - 1].gripper_open;
        let still = max_abs(&frames[i].joint_velocities) < vel_epsilon;
        if changed || still {
            push(i, &mut keys);
        }
    }
    let last = frames.len() - 1;
    if keys.last() != Some(&last) {
        push(last, &mut keys);
    }
    Ok(keys)
}

/// Discretization settings shared by tuple construction and training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    pub bounds: WorkspaceBounds,
    pub bins: RotationBins,
}

/// One supervised sample: observation at frame `t`, target = next keyframe.
///
/// The world points are retained so the grid can be rebuilt after a rigid
/// perturbation; [`TrainingTuple::voxel_obs`] fuses them on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub points: Vec<ColoredPoint>,
    pub bounds: WorkspaceBounds,
    /// Gripper open, left finger, right finger, normalized timestep.
    pub proprio: [f32; 4],
    pub language_goal: String,
    pub target: DiscreteAction,
    pub target_pose: ContinuousAction,
    pub task_id: String,
    pub frame_index: usize,
}

impl TrainingTuple {
    pub fn voxel_obs(&self) -> VoxelGrid {
        fuse_points(&self.points, &self.bounds)
    }
}

/// Proprioceptive vector for frame `t` of an episode with `len` frames.
pub fn proprio_for(frame: &DemoFrame, t: usize, len: usize) -> [f32; 4] {
    let f = frame.finger_position();
    let ts = if len > 1 { t as f64 / (len - 1) as f64 } else { 0.0 };
    [if frame.gripper_open { 1.0 } else { 0.0 }, f, f, ts as f32]
}

pub fn make_training_tuples(
    episode: &DemoEpisode,
    keyframes: &[usize],
    codec: &CodecConfig,
) -> Result<Vec<TrainingTuple>> {
    episode.validate()?;
    let n = episode.frames.len();
    if keyframes.is_empty() {
        return Err(invalid("keyframe list is empty"));
    }
    if keyframes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("keyframes must be strictly increasing"));
    }
    if let Some(k) = keyframes.iter().find(|k| **k >= n) {
        return Err(invalid(format!("keyframe {k} is not a frame of a {n}-frame episode")));
    }
    let mut targets = Vec::with_capacity(keyframes.len());
    for &k in keyframes {
        let pose = episode.action_at(k);
        targets.push((discretize(&pose, &codec.bounds, &codec.bins)?, pose));
    }
    let last = *keyframes.last().expect("non-empty");
    let mut out = Vec::with_capacity(last);
    let mut next = 0;
    for t in 0..last {
        while keyframes[next] <= t {
            next += 1;
        }
        let frame = &episode.frames[t];
        let (target, target_pose) = targets[next];
        out.push(TrainingTuple {
            points: project_views(&frame.views)?,
            bounds: codec.bounds,
            proprio: proprio_for(frame, t, n),
            language_goal: episode.language_goal.clone(),
            target,
            target_pose,
            task_id: episode.task_id.clone(),
            frame_index: t,
        });
    }
    Ok(out)
}
