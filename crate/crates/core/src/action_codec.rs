//! Continuous 6-DoF gripper actions <-> discrete classification targets.
//!
//! Translation is the voxel containing the finger center. Rotation uses
//! extrinsic X-Y-Z Euler angles (`R = Rz(yaw) Ry(pitch) Rx(roll)`), each
//! normalized to `[0, 360)` degrees and binned by floor into half-open bins;
//! decoding returns bin centers.

use nalgebra::{Rotation3, UnitQuaternion};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::QPrediction;
use crate::voxelizer::{voxel_index_of, WorkspaceBounds};

/// Pitch magnitude (radians from +-90 deg) treated as gimbal lock.
pub const GIMBAL_TOL: f64 = 1e-4;

/// Angles closer than this (in bin units) to a bin edge snap onto the edge.
const EDGE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousAction {
    /// Finger center in world coordinates (m).
    pub position: [f64; 3],
    pub orientation: UnitQuaternion<f64>,
    pub open: bool,
    pub collide: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteAction {
    pub trans_index: [usize; 3],
    /// Roll, pitch, yaw bins.
    pub rot_indices: [usize; 3],
    pub open: bool,
    pub collide: bool,
}

/// Uniform angular bins. The width must divide 90 degrees so that bin edges
/// line up with the +-90 degree pitch limits of the Euler decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationBins {
    bin_deg: f64,
    count: usize,
}

impl RotationBins {
    pub fn new(bin_deg: f64) -> Result<Self> {
        if !(bin_deg.is_finite() && bin_deg > 0.0) {
            return Err(invalid(format!("rotation bin width {bin_deg} must be positive")));
        }
        let per_quarter = 90.0 / bin_deg;
        if (per_quarter - per_quarter.round()).abs() > 1e-9 {
            return Err(invalid(format!("rotation bin width {bin_deg} must divide 90 degrees")));
        }
        Ok(Self { bin_deg, count: 4 * per_quarter.round() as usize })
    }

    pub fn bin_deg(&self) -> f64 {
        self.bin_deg
    }

    /// Bins per axis (`360 / bin_deg`).
    pub fn count(&self) -> usize {
        self.count
    }

    fn quarter(&self) -> usize {
        self.count / 4
    }

    /// Pitch bins whose centers lie within the canonical `[-90, 90]` range.
    pub fn pitch_bin_valid(&self, b: usize) -> bool {
        b < self.quarter() || (b >= 3 * self.quarter() && b < self.count)
    }

    fn bin_of(&self, deg: f64) -> usize {
        let a = deg.rem_euclid(360.0);
        let mut q = a / self.bin_deg;
        let r = q.round();
        if (q - r).abs() < EDGE_SNAP {
            q = r;
        }
        (q.floor() as usize) % self.count
    }

    fn center_deg(&self, b: usize) -> f64 {
        (b as f64 + 0.5) * self.bin_deg
    }
}

/// Extrinsic X-Y-Z Euler angles (radians) of a rotation, with pitch in
/// `[-pi/2, pi/2]`. Near gimbal lock roll is set to zero and the remaining
/// rotation is folded into yaw.
pub fn quat_to_euler_xyz(q: &UnitQuaternion<f64>) -> [f64; 3] {
    let m = q.to_rotation_matrix();
    let m = m.matrix();
    let sp = (-m[(2, 0)]).clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if (pitch.abs() - std::f64::consts::FRAC_PI_2).abs() < GIMBAL_TOL {
        let pitch = std::f64::consts::FRAC_PI_2.copysign(pitch);
        let yaw = (-m[(0, 1)]).atan2(m[(1, 1)]);
        return [0.0, pitch, yaw];
    }
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    [roll, pitch, yaw]
}

pub fn euler_xyz_to_quat(angles: [f64; 3]) -> UnitQuaternion<f64> {
    let [r, p, y] = angles;
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_euler_angles(r, p, y))
}

/// Angle between two orientations, in radians.
pub fn geodesic_distance(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.angle_to(b)
}

impl DiscreteAction {
    /// Index ranges only. A pitch bin outside `[-90, 90]` still decodes to a
    /// proper rotation; [`discretize`] just never produces one.
    pub fn validate(&self, grid: [usize; 3], bins: &RotationBins) -> Result<()> {
        if (0..3).any(|a| self.trans_index[a] >= grid[a]) {
            return Err(invalid(format!(
                "translation index {:?} outside grid {grid:?}",
                self.trans_index
            )));
        }
        if self.rot_indices.iter().any(|r| *r >= bins.count()) {
            return Err(invalid(format!("rotation index {:?} out of range", self.rot_indices)));
        }
        Ok(())
    }
}

/// Encode a continuous action into voxel and rotation-bin indices.
pub fn discretize(
    action: &ContinuousAction,
    bounds: &WorkspaceBounds,
    bins: &RotationBins,
) -> Result<DiscreteAction> {
    let trans_index = voxel_index_of(action.position, bounds)
        .ok_or(Error::OutOfBounds { position: action.position })?;
    let euler = quat_to_euler_xyz(&action.orientation).map(f64::to_degrees);
    let mut rot_indices = euler.map(|a| bins.bin_of(a));
    // Pitch of exactly +90 falls on the first non-canonical bin.
    if rot_indices[1] == bins.quarter() {
        rot_indices[1] -= 1;
    }
    Ok(DiscreteAction { trans_index, rot_indices, open: action.open, collide: action.collide })
}

/// Decode to the voxel center and rotation-bin centers.
pub fn undiscretize(d: &DiscreteAction, bounds: &WorkspaceBounds, bins: &RotationBins) -> ContinuousAction {
    let angles = d.rot_indices.map(|b| bins.center_deg(b).to_radians());
    ContinuousAction {
        position: bounds.voxel_center(d.trans_index),
        orientation: euler_xyz_to_quat(angles),
        open: d.open,
        collide: d.collide,
    }
}

/// One-hot classification targets.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabels {
    pub y_trans: Array3<f32>,
    /// `bins x 3`, one column per Euler axis.
    pub y_rot: Array2<f32>,
    pub y_open: [f32; 2],
    pub y_collide: [f32; 2],
}

pub fn encode_labels(d: &DiscreteAction, grid: [usize; 3], bins: &RotationBins) -> Result<OneHotLabels> {
    d.validate(grid, bins)?;
    let mut y_trans = Array3::zeros((grid[0], grid[1], grid[2]));
    y_trans[d.trans_index] = 1.0;
    let mut y_rot = Array2::zeros((bins.count(), 3));
    for axis in 0..3 {
        y_rot[[d.rot_indices[axis], axis]] = 1.0;
    }
    let hot = |b: bool| if b { [0.0, 1.0] } else { [1.0, 0.0] };
    Ok(OneHotLabels { y_trans, y_rot, y_open: hot(d.open), y_collide: hot(d.collide) })
}

impl OneHotLabels {
    /// Recover the indices, rejecting anything that is not exactly one-hot.
    pub fn to_action(&self) -> Result<DiscreteAction> {
        fn hot_index<'a>(it: impl Iterator<Item = &'a f32>, what: &str) -> Result<usize> {
            let mut found = None;
            for (i, v) in it.enumerate() {
                if *v == 1.0 {
                    if found.is_some() {
                        return Err(invalid(format!("{what} label has more than one hot entry")));
                    }
                    found = Some(i);
                } else if *v != 0.0 {
                    return Err(invalid(format!("{what} label entry {v} is not 0 or 1")));
                }
            }
            found.ok_or_else(|| invalid(format!("{what} label has no hot entry")))
        }
        let shape = self.y_trans.shape();
        let flat = hot_index(self.y_trans.iter(), "translation")?;
        let (w, d) = (shape[1], shape[2]);
        let trans_index = [flat / (w * d), (flat / d) % w, flat % d];
        let mut rot_indices = [0; 3];
        for (axis, r) in rot_indices.iter_mut().enumerate() {
            *r = hot_index(self.y_rot.column(axis).iter(), "rotation")?;
        }
        let open = hot_index(self.y_open.iter(), "open")? == 1;
        let collide = hot_index(self.y_collide.iter(), "collide")? == 1;
        Ok(DiscreteAction { trans_index, rot_indices, open, collide })
    }
}

/// Index of the first maximum, so ties resolve to the lowest index.
pub(crate) fn argmax_first<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if *v > best_v {
            best_v = *v;
            best = i;
        }
    }
    best
}

/// Greedy action: independent argmax of each Q-function.
pub fn select_best_action(q: &QPrediction) -> Result<DiscreteAction> {
    if let Some(head) = q.first_non_finite() {
        return Err(invalid(format!("non-finite Q values in the {head} head")));
    }
    let shape = q.q_trans.shape();
    let flat = argmax_first(q.q_trans.iter());
    let (w, d) = (shape[1], shape[2]);
    let trans_index = [flat / (w * d), (flat / d) % w, flat % d];
    let mut rot_indices = [0; 3];
    for (axis, r) in rot_indices.iter_mut().enumerate() {
        *r = argmax_first(q.q_rot.column(axis).iter());
    }
    Ok(DiscreteAction {
        trans_index,
        rot_indices,
        open: argmax_first(q.q_open.iter()) == 1,
        collide: argmax_first(q.q_collide.iter()) == 1,
    })
}
