//! Scene contents and the teleporting gripper's grasp, release and press rules.

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::render::Primitive;
use super::{ToyWorldConfig, GRIPPER_RGB, PALETTE, TABLE_RGB};
use crate::action_codec::{quat_to_euler_xyz, ContinuousAction};

/// Block edge length (m).
pub const BLOCK_SIZE: f64 = 0.04;
pub(crate) const BUTTON_RADIUS: f64 = 0.025;
pub(crate) const BUTTON_HEIGHT: f64 = 0.02;
pub(crate) const BUTTON_PRESSED_HEIGHT: f64 = 0.01;
pub(crate) const SLOT_SIZE: f64 = 0.08;
pub(crate) const SLOT_FLOOR: f64 = 0.01;
const SLOT_RIM_HEIGHT: f64 = 0.025;
const SLOT_RIM_THICKNESS: f64 = 0.008;
/// A released object may sink this far into a support and still land on it.
pub(crate) const SETTLE_TOLERANCE: f64 = 0.01;

pub(crate) const HOME_POSITION: [f64; 3] = [0.0, 0.0, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Block,
    Button,
    /// Flat square pad with a low rim; blocks placed inside rest on its floor.
    Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ObjectShape,
    /// Palette index.
    pub color: usize,
    /// Geometric center; for slots, the center of the floor slab.
    pub position: [f64; 3],
    /// Rotation about the vertical axis (rad).
    pub yaw: f64,
    pub pressed: bool,
}

impl SceneObject {
    pub(crate) fn new(shape: ObjectShape, color: usize, xy: [f64; 2], yaw: f64) -> Self {
        let z = match shape {
            ObjectShape::Block => BLOCK_SIZE / 2.0,
            ObjectShape::Button => BUTTON_HEIGHT / 2.0,
            ObjectShape::Slot => SLOT_FLOOR / 2.0,
        };
        Self { shape, color, position: [xy[0], xy[1], z], yaw, pressed: false }
    }

    /// Radius of a circle enclosing the footprint.
    pub(crate) fn footprint_radius(&self) -> f64 {
        match self.shape {
            ObjectShape::Block => BLOCK_SIZE / std::f64::consts::SQRT_2,
            ObjectShape::Button => BUTTON_RADIUS,
            ObjectShape::Slot => SLOT_SIZE / std::f64::consts::SQRT_2,
        }
    }

    fn half_height(&self) -> f64 {
        match self.shape {
            ObjectShape::Block => BLOCK_SIZE / 2.0,
            ObjectShape::Button => self.button_height() / 2.0,
            ObjectShape::Slot => SLOT_FLOOR / 2.0,
        }
    }

    fn button_height(&self) -> f64 {
        if self.pressed {
            BUTTON_PRESSED_HEIGHT
        } else {
            BUTTON_HEIGHT
        }
    }

    /// Height of the surface other objects rest on.
    pub(crate) fn top(&self) -> f64 {
        match self.shape {
            ObjectShape::Button => self.button_height(),
            _ => self.position[2] + self.half_height(),
        }
    }

    pub(crate) fn bottom(&self) -> f64 {
        self.position[2] - self.half_height()
    }

    /// `p` expressed in the object's horizontal frame, relative to its center.
    pub(crate) fn local_xy(&self, p: [f64; 3]) -> [f64; 2] {
        let (dx, dy) = (p[0] - self.position[0], p[1] - self.position[1]);
        let (s, c) = self.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Whether the vertical line through `p` meets the support surface.
    fn supports(&self, p: [f64; 3]) -> bool {
        let l = self.local_xy(p);
        match self.shape {
            ObjectShape::Block => l[0].abs() <= BLOCK_SIZE / 2.0 && l[1].abs() <= BLOCK_SIZE / 2.0,
            ObjectShape::Slot => l[0].abs() <= SLOT_SIZE / 2.0 && l[1].abs() <= SLOT_SIZE / 2.0,
            ObjectShape::Button => l[0].hypot(l[1]) <= BUTTON_RADIUS,
        }
    }

    fn rgb(&self) -> [u8; 3] {
        PALETTE[self.color].1
    }

    fn primitives(&self, out: &mut Vec<Primitive>) {
        let rgb = self.rgb();
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw);
        let c = Vector3::from(self.position);
        match self.shape {
            ObjectShape::Block => out.push(Primitive::cuboid(c, Vector3::repeat(BLOCK_SIZE / 2.0), rot, rgb)),
            ObjectShape::Button => {
                out.push(Primitive::Cylinder { center: [c.x, c.y], z0: 0.0, z1: self.button_height(), radius: BUTTON_RADIUS, rgb })
            }
            ObjectShape::Slot => {
                let h = SLOT_SIZE / 2.0;
                out.push(Primitive::cuboid(c, Vector3::new(h, h, SLOT_FLOOR / 2.0), rot, rgb));
                let t = SLOT_RIM_THICKNESS / 2.0;
                let zc = SLOT_RIM_HEIGHT / 2.0;
                for (off, half) in [
                    (Vector3::new(h - t, 0.0, 0.0), Vector3::new(t, h, zc)),
                    (Vector3::new(-(h - t), 0.0, 0.0), Vector3::new(t, h, zc)),
                    (Vector3::new(0.0, h - t, 0.0), Vector3::new(h, t, zc)),
                    (Vector3::new(0.0, -(h - t), 0.0), Vector3::new(h, t, zc)),
                ] {
                    let center = Vector3::new(c.x, c.y, zc) + rot * off;
                    out.push(Primitive::cuboid(center, half, rot, rgb));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripperState {
    /// Point midway between the fingertips.
    pub position: [f64; 3],
    pub orientation: UnitQuaternion<f64>,
    pub open: bool,
    /// Index of the held object.
    pub held: Option<usize>,
    /// Held object's yaw minus the gripper's yaw at grasp time.
    pub held_yaw_offset: f64,
}

impl GripperState {
    pub(crate) fn home() -> Self {
        Self {
            position: HOME_POSITION,
            orientation: UnitQuaternion::identity(),
            open: true,
            held: None,
            held_yaw_offset: 0.0,
        }
    }

    pub(crate) fn yaw(&self) -> f64 {
        quat_to_euler_xyz(&self.orientation)[2]
    }

    /// Fingertip half-gap (m).
    fn finger_offset(&self) -> f64 {
        match (self.open, self.held) {
            (true, _) => 0.035,
            (false, Some(_)) => BLOCK_SIZE / 2.0 + 0.005,
            (false, None) => 0.008,
        }
    }

    fn primitives(&self, out: &mut Vec<Primitive>) {
        let rot = self.orientation.to_rotation_matrix();
        let p = Vector3::from(self.position);
        let g = self.finger_offset();
        let finger_half = Vector3::new(0.01, 0.005, 0.025);
        for side in [-1.0, 1.0] {
            let local = Vector3::new(0.0, side * (g + finger_half.y), 0.0);
            out.push(Primitive::cuboid(p + rot * local, finger_half, rot, GRIPPER_RGB));
        }
        let palm_half = Vector3::new(0.012, g + 2.0 * finger_half.y, 0.008);
        out.push(Primitive::cuboid(p + rot * Vector3::new(0.0, 0.0, 0.033), palm_half, rot, GRIPPER_RGB));
        let wrist_half = Vector3::new(0.01, 0.01, 0.03);
        out.push(Primitive::cuboid(p + rot * Vector3::new(0.0, 0.0, 0.071), wrist_half, rot, GRIPPER_RGB));
    }
}

/// Everything the renderer and the success predicates look at.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    pub gripper: GripperState,
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

impl SceneState {
    pub(crate) fn new(objects: Vec<SceneObject>) -> Self {
        Self { objects, gripper: GripperState::home() }
    }

    /// Move the gripper (and whatever it holds) without grasp, release or
    /// press events. Used for the frames between expert waypoints.
    pub(crate) fn move_gripper(&mut self, position: [f64; 3], orientation: UnitQuaternion<f64>) {
        self.gripper.position = position;
        self.gripper.orientation = orientation;
        if let Some(i) = self.gripper.held {
            let yaw = self.gripper.yaw() + self.gripper.held_yaw_offset;
            let obj = &mut self.objects[i];
            obj.position = position;
            obj.yaw = yaw;
        }
    }

    /// Teleport to `pose` and resolve the gripper command: closing grasps
    /// the nearest block within reach, opening drops the held object onto
    /// the highest support beneath it, and a closed gripper presses any
    /// button whose top center is within reach.
    pub(crate) fn apply(&mut self, pose: &ContinuousAction, cfg: &ToyWorldConfig) {
        let was_open = self.gripper.open;
        self.move_gripper(pose.position, pose.orientation);
        let finger = pose.position;
        if was_open && !pose.open {
            let nearest = self
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.shape == ObjectShape::Block)
                .map(|(i, o)| (i, distance(o.position, finger)))
                .filter(|(_, d)| *d <= cfg.grasp_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = nearest {
                self.gripper.held = Some(i);
                self.gripper.held_yaw_offset = self.objects[i].yaw - self.gripper.yaw();
                self.objects[i].position = finger;
            }
        }
        if !was_open && pose.open {
            if let Some(i) = self.gripper.held.take() {
                self.settle(i);
            }
        }
        self.gripper.open = pose.open;
        if !self.gripper.open {
            for o in self.objects.iter_mut().filter(|o| o.shape == ObjectShape::Button && !o.pressed) {
                let top = [o.position[0], o.position[1], BUTTON_HEIGHT];
                if distance(top, finger) <= cfg.press_radius {
                    o.pressed = true;
                }
            }
        }
    }

    fn settle(&mut self, i: usize) {
        let obj = &self.objects[i];
        let bottom = obj.bottom();
        let support = self
            .objects
            .iter()
            .enumerate()
            .filter(|(j, o)| *j != i && o.supports(obj.position))
            .map(|(_, o)| o.top())
            .filter(|top| *top <= bottom + SETTLE_TOLERANCE)
            .fold(0.0, f64::max);
        let half = obj.position[2] - bottom;
        self.objects[i].position[2] = support + half;
    }

    pub(crate) fn primitives(&self) -> Vec<Primitive> {
        let mut out = vec![Primitive::cuboid(
            Vector3::new(0.0, 0.0, -0.025),
            Vector3::new(0.45, 0.45, 0.025),
            Rotation3::identity(),
            TABLE_RGB,
        )];
        for o in &self.objects {
            o.primitives(&mut out);
        }
        self.gripper.primitives(&mut out);
        out
    }

    /// Objects of `shape` with palette color `color`.
    pub(crate) fn find(&self, shape: ObjectShape, color: usize) -> Option<usize> {
        self.objects.iter().position(|o| o.shape == shape && o.color == color)
    }

    /// Whether object `top` rests on object `base`.
    pub(crate) fn resting_on(&self, top: usize, base: usize, slack: f64) -> bool {
        if self.gripper.held == Some(top) || self.gripper.held == Some(base) {
            return false;
        }
        let (t, b) = (&self.objects[top], &self.objects[base]);
        let l = b.local_xy(t.position);
        (t.bottom() - b.top()).abs() < 1e-6 && l[0].abs() <= slack && l[1].abs() <= slack
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(position: [f64; 3], open: bool) -> ContinuousAction {
        ContinuousAction { position, orientation: UnitQuaternion::identity(), open, collide: false }
    }

    fn two_blocks() -> SceneState {
        SceneState::new(vec![
            SceneObject::new(ObjectShape::Block, 0, [0.0, 0.0], 0.3),
            SceneObject::new(ObjectShape::Block, 1, [0.15, 0.0], 0.0),
        ])
    }

    #[test]
    fn grasp_reach_is_a_closed_ball() {
        let cfg = ToyWorldConfig::default();
        let r = cfg.grasp_radius;
        // Exactly at the boundary grasps.
        let mut s = two_blocks();
        s.apply(&pose([r, 0.0, BLOCK_SIZE / 2.0], false), &cfg);
        assert_eq!(s.gripper.held, Some(0));
        assert_eq!(s.objects[0].position, [r, 0.0, BLOCK_SIZE / 2.0], "object snaps to the fingers");
        // Just outside does not.
        let mut s = two_blocks();
        s.apply(&pose([r + 1e-9, 0.0, BLOCK_SIZE / 2.0], false), &cfg);
        assert_eq!(s.gripper.held, None);
        assert_eq!(s.objects[0].position, [0.0, 0.0, BLOCK_SIZE / 2.0]);
    }

    #[test]
    fn closing_again_does_not_regrasp() {
        let cfg = ToyWorldConfig::default();
        let mut s = two_blocks();
        s.apply(&pose([0.0, 0.0, 0.1], false), &cfg);
        s.apply(&pose([0.0, 0.0, 0.02], false), &cfg);
        assert_eq!(s.gripper.held, None, "the gripper was already closed");
    }

    #[test]
    fn carry_stack_and_release() {
        let cfg = ToyWorldConfig::default();
        let mut s = two_blocks();
        s.apply(&pose([0.0, 0.0, 0.02], false), &cfg);
        s.apply(&pose([0.0, 0.0, 0.2], false), &cfg);
        assert_eq!(s.objects[0].position, [0.0, 0.0, 0.2]);
        // Released 7 mm inside the lower block still lands on top of it.
        s.apply(&pose([0.155, 0.005, 0.053], true), &cfg);
        assert_eq!(s.gripper.held, None);
        assert!((s.objects[0].position[2] - 0.06).abs() < 1e-12);
        assert!(s.resting_on(0, 1, 0.02));
        // Released beside the block it drops to the table.
        s.apply(&pose([0.155, 0.005, 0.06], false), &cfg);
        s.apply(&pose([-0.1, 0.1, 0.3], true), &cfg);
        assert!((s.objects[0].position[2] - 0.02).abs() < 1e-12);
        assert!(!s.resting_on(0, 1, 0.02));
    }

    #[test]
    fn held_object_follows_gripper_yaw() {
        let cfg = ToyWorldConfig::default();
        let mut s = two_blocks();
        s.apply(&pose([0.0, 0.0, 0.02], false), &cfg);
        let q = UnitQuaternion::from_euler_angles(0.0, 0.0, 0.5);
        s.move_gripper([0.0, 0.0, 0.1], q);
        assert!((s.objects[0].yaw - 0.8).abs() < 1e-12);
    }

    #[test]
    fn closed_gripper_presses_only_nearby_buttons() {
        let cfg = ToyWorldConfig::default();
        let mut s = SceneState::new(vec![
            SceneObject::new(ObjectShape::Button, 0, [0.0, 0.0], 0.0),
            SceneObject::new(ObjectShape::Button, 1, [0.1, 0.0], 0.0),
        ]);
        s.apply(&pose([0.0, 0.0, 0.05], true), &cfg);
        s.apply(&pose([0.0, 0.0, 0.0205], true), &cfg);
        assert!(!s.objects[0].pressed, "open fingers do not press");
        s.apply(&pose([0.0, 0.0, 0.06], false), &cfg);
        assert!(!s.objects[0].pressed);
        s.apply(&pose([0.01, 0.01, 0.03], false), &cfg);
        assert!(s.objects[0].pressed && !s.objects[1].pressed);
        assert!((s.objects[0].top() - BUTTON_PRESSED_HEIGHT).abs() < 1e-12);
    }
}
