//! Task definitions, seeded scene sampling, success predicates and the
//! scripted expert that produces dense demonstrations.

use nalgebra::UnitQuaternion;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::render_views;
use super::scene::{
    ObjectShape, SceneObject, SceneState, BLOCK_SIZE, BUTTON_HEIGHT, SLOT_FLOOR, SLOT_SIZE,
};
use super::{color_name, ToyWorldConfig, PALETTE};
use crate::action_codec::ContinuousAction;
use crate::demo_pipeline::{DemoEpisode, DemoFrame};
use crate::error::{invalid, Error, Result};

/// Placement draws per object before the whole layout is resampled.
pub(crate) const PLACEMENT_ATTEMPTS: usize = 100;
const LAYOUT_RETRIES: usize = 50;
/// Half-width of the square region object centers are drawn from.
const PLACEMENT_HALF_EXTENT: f64 = 0.2;
/// Clearance between object footprints.
const PLACEMENT_GAP: f64 = 0.03;
const APPROACH_HEIGHT: f64 = 0.08;
const LIFT_HEIGHT: f64 = 0.16;
const PRESS_HOVER: f64 = 0.06;
/// Release height above the resting pose; the object settles on release.
const DROP_CLEARANCE: f64 = 0.005;
/// Peak joint speed (rad/s) of the expert's velocity profile.
const PEAK_JOINT_SPEED: f64 = 1.0;
const JOINT_PROFILE: [f64; 7] = [0.6, -1.0, 0.4, 0.8, -0.3, 0.5, -0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Three buttons of distinct colors; press the named one and no other.
    PressButton,
    /// Two blocks; put the named block on the other.
    StackBlock,
    /// One block, two slots; put the block in the named slot.
    PutInSlot,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::PressButton, TaskKind::StackBlock, TaskKind::PutInSlot];

    pub fn name(self) -> &'static str {
        match self {
            Self::PressButton => "press_button",
            Self::StackBlock => "stack_block",
            Self::PutInSlot => "put_in_slot",
        }
    }

    pub fn goal(self, color: usize) -> String {
        let c = color_name(color);
        match self {
            Self::PressButton => format!("push the {c} button"),
            Self::StackBlock => format!("stack the {c} block on the other block"),
            Self::PutInSlot => format!("put the block in the {c} slot"),
        }
    }

    /// Number of expert waypoints per episode.
    pub fn num_waypoints(self) -> usize {
        match self {
            Self::PressButton => 2,
            Self::StackBlock | Self::PutInSlot => 4,
        }
    }

    /// Shape of the object named by the goal.
    fn target_shape(self) -> ObjectShape {
        match self {
            Self::PressButton => ObjectShape::Button,
            Self::StackBlock => ObjectShape::Block,
            Self::PutInSlot => ObjectShape::Slot,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid(format!("unknown task '{s}' (expected press_button, stack_block or put_in_slot)")))
    }
}

/// A task with its variation set: the palette colors the goal can name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub colors: Vec<usize>,
}

impl TaskSpec {
    /// All 20 palette colors.
    pub fn full(kind: TaskKind) -> Self {
        Self { kind, colors: (0..PALETTE.len()).collect() }
    }

    pub fn with_colors(kind: TaskKind, colors: Vec<usize>) -> Result<Self> {
        let spec = Self { kind, colors };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() {
            return Err(invalid(format!("task {} has no variations", self.kind)));
        }
        let mut seen = [false; PALETTE.len()];
        for &c in &self.colors {
            if c >= PALETTE.len() {
                return Err(invalid(format!("color index {c} is outside the palette")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(invalid(format!("color {} repeated in task {}", color_name(c), self.kind)));
            }
        }
        Ok(())
    }

    pub fn goal(&self, variation: usize) -> String {
        self.kind.goal(variation)
    }
}

/// Pick `n` distinct colors other than `goal`, preferring the variation set.
fn distractor_colors(spec: &TaskSpec, goal: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = spec.colors.iter().copied().filter(|&c| c != goal).collect();
    pool.shuffle(rng);
    if pool.len() < n {
        let mut extra: Vec<usize> = (0..PALETTE.len()).filter(|c| *c != goal && !pool.contains(c)).collect();
        extra.shuffle(rng);
        pool.extend(extra);
    }
    pool.truncate(n);
    pool
}

fn place(shapes: &[(ObjectShape, usize)], rng: &mut impl Rng) -> Option<Vec<SceneObject>> {
    let mut placed: Vec<SceneObject> = Vec::with_capacity(shapes.len());
    for &(shape, color) in shapes {
        let mut ok = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let xy = [
                rng.random_range(-PLACEMENT_HALF_EXTENT..=PLACEMENT_HALF_EXTENT),
                rng.random_range(-PLACEMENT_HALF_EXTENT..=PLACEMENT_HALF_EXTENT),
            ];
            let yaw = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            let cand = SceneObject::new(shape, color, xy, yaw);
            let clear = placed.iter().all(|o| {
                let d = (o.position[0] - xy[0]).hypot(o.position[1] - xy[1]);
                d >= o.footprint_radius() + cand.footprint_radius() + PLACEMENT_GAP
            });
            if clear {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

/// Deterministic initial scene for `variation` (a palette index in the
/// task's color set).
pub fn reset(cfg: &ToyWorldConfig, spec: &TaskSpec, variation: usize, seed: u64) -> Result<SceneState> {
    cfg.validate()?;
    spec.validate()?;
    if !spec.colors.contains(&variation) {
        return Err(invalid(format!(
            "variation {} is not in the color set of task {}",
            color_name(variation),
            spec.kind
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes: Vec<(ObjectShape, usize)> = match spec.kind {
        TaskKind::PressButton => {
            let d = distractor_colors(spec, variation, 2, &mut rng);
            vec![(ObjectShape::Button, variation), (ObjectShape::Button, d[0]), (ObjectShape::Button, d[1])]
        }
        TaskKind::StackBlock => {
            let d = distractor_colors(spec, variation, 1, &mut rng);
            vec![(ObjectShape::Block, variation), (ObjectShape::Block, d[0])]
        }
        TaskKind::PutInSlot => {
            let d = distractor_colors(spec, variation, 1, &mut rng);
            // A neutral block color not used by either slot.
            let block = [19, 9, 10, 18]
                .into_iter()
                .find(|c| *c != variation && *c != d[0])
                .expect("four candidates, two excluded");
            vec![(ObjectShape::Slot, variation), (ObjectShape::Slot, d[0]), (ObjectShape::Block, block)]
        }
    };
    for _ in 0..LAYOUT_RETRIES {
        if let Some(objects) = place(&shapes, &mut rng) {
            return Ok(SceneState::new(objects));
        }
    }
    Err(invalid(format!("could not place {} objects without overlap", shapes.len())))
}

/// Index of the object the goal names.
pub(crate) fn target_object(state: &SceneState, kind: TaskKind, variation: usize) -> Result<usize> {
    state
        .find(kind.target_shape(), variation)
        .ok_or_else(|| invalid(format!("scene has no {} {:?}", color_name(variation), kind.target_shape())))
}

/// Color of another object with the target's shape, for swapped goals.
pub(crate) fn other_color(state: &SceneState, kind: TaskKind, variation: usize) -> Option<usize> {
    let shape = kind.target_shape();
    state.objects.iter().find(|o| o.shape == shape && o.color != variation).map(|o| o.color)
}

pub(crate) fn success(state: &SceneState, kind: TaskKind, variation: usize) -> bool {
    let Ok(target) = target_object(state, kind, variation) else {
        return false;
    };
    match kind {
        TaskKind::PressButton => state
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.shape == ObjectShape::Button)
            .all(|(i, o)| o.pressed == (i == target)),
        TaskKind::StackBlock => {
            let base = state.objects.iter().position(|o| o.shape == ObjectShape::Block && o.color != variation);
            base.is_some_and(|b| state.resting_on(target, b, BLOCK_SIZE / 2.0))
        }
        TaskKind::PutInSlot => {
            let block = state.objects.iter().position(|o| o.shape == ObjectShape::Block);
            block.is_some_and(|b| state.resting_on(b, target, (SLOT_SIZE - BLOCK_SIZE) / 2.0 + 0.005))
        }
    }
}

/// A gripper pose to reach, with the gripper command and collision flag.
pub type Waypoint = ContinuousAction;

fn waypoint(p: [f64; 3], yaw: f64, open: bool, collide: bool) -> Waypoint {
    ContinuousAction { position: p, orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw), open, collide }
}

/// The expert's waypoints from an initial scene.
pub fn expert_waypoints(state: &SceneState, kind: TaskKind, variation: usize) -> Result<Vec<Waypoint>> {
    let target = &state.objects[target_object(state, kind, variation)?];
    let [x, y, _] = target.position;
    Ok(match kind {
        TaskKind::PressButton => vec![
            waypoint([x, y, BUTTON_HEIGHT + PRESS_HOVER], 0.0, false, false),
            waypoint([x, y, BUTTON_HEIGHT], 0.0, false, true),
        ],
        TaskKind::StackBlock | TaskKind::PutInSlot => {
            let (block, dest, rest_z) = if kind == TaskKind::StackBlock {
                let base = state
                    .objects
                    .iter()
                    .find(|o| o.shape == ObjectShape::Block && o.color != variation)
                    .ok_or_else(|| invalid("stack scene needs a second block"))?;
                (target, base, base.top() + BLOCK_SIZE / 2.0)
            } else {
                let block = state
                    .objects
                    .iter()
                    .find(|o| o.shape == ObjectShape::Block)
                    .ok_or_else(|| invalid("slot scene needs a block"))?;
                (block, target, SLOT_FLOOR + BLOCK_SIZE / 2.0)
            };
            let [bx, by, bz] = block.position;
            let [dx, dy, _] = dest.position;
            vec![
                waypoint([bx, by, bz + APPROACH_HEIGHT], block.yaw, true, false),
                waypoint([bx, by, bz], block.yaw, false, true),
                waypoint([bx, by, LIFT_HEIGHT], block.yaw, false, false),
                waypoint([dx, dy, rest_z + DROP_CLEARANCE], dest.yaw, true, true),
            ]
        }
    })
}

/// One dense demonstration. Between waypoints the gripper follows a
/// cosine ease with joint speeds `peak * sin(pi s)`, so the arm is at rest
/// exactly at each waypoint frame and moving on every other frame.
pub fn scripted_expert(cfg: &ToyWorldConfig, spec: &TaskSpec, variation: usize, seed: u64) -> Result<DemoEpisode> {
    let mut state = reset(cfg, spec, variation, seed)?;
    let waypoints = expert_waypoints(&state, spec.kind, variation)?;
    let s_per = cfg.frames_per_segment;
    let frame = |state: &SceneState, speed: f64, t: usize| DemoFrame {
        views: render_views(state, cfg),
        gripper_position: state.gripper.position,
        gripper_orientation: state.gripper.orientation,
        gripper_open: state.gripper.open,
        joint_velocities: JOINT_PROFILE.iter().map(|c| c * speed).collect(),
        timestep: t as u64,
    };
    let mut frames = vec![frame(&state, 0.0, 0)];
    let mut collide_flags = vec![false];
    for wp in &waypoints {
        let (p0, q0) = (state.gripper.position, state.gripper.orientation);
        for j in 1..=s_per {
            let s = j as f64 / s_per as f64;
            let speed = if j == s_per {
                0.0
            } else {
                state_motion(&mut state, p0, q0, wp, s);
                PEAK_JOINT_SPEED * (std::f64::consts::PI * s).sin()
            };
            if j == s_per {
                state.apply(wp, cfg);
            }
            frames.push(frame(&state, speed, frames.len()));
            collide_flags.push(wp.collide);
        }
    }
    Ok(DemoEpisode {
        frames,
        language_goal: spec.goal(variation),
        task_id: spec.kind.name().to_string(),
        variation_id: variation as u32,
        collide_flags,
    })
}

fn state_motion(state: &mut SceneState, p0: [f64; 3], q0: UnitQuaternion<f64>, wp: &Waypoint, s: f64) {
    let e = (1.0 - (std::f64::consts::PI * s).cos()) / 2.0;
    let p = std::array::from_fn(|k| p0[k] + (wp.position[k] - p0[k]) * e);
    let q = q0.slerp(&wp.orientation, e);
    state.move_gripper(p, q);
}

/// Episode seed for demonstration `i` of a run seeded with `seed`.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // SplitMix64 finalizer over the combined words.
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` demonstrations cycling through the task's variations in order.
pub fn generate_demos(cfg: &ToyWorldConfig, spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<DemoEpisode>> {
    spec.validate()?;
    (0..n)
        .map(|i| {
            let variation = spec.colors[i % spec.colors.len()];
            scripted_expert(cfg, spec, variation, mix_seed(seed, spec.kind as u64, i as u64))
        })
        .collect()
}
