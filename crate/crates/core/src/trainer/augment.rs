//! Rigid perturbation of observation and target: translation plus yaw about
//! the vertical axis through the workspace center.

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action_codec::{discretize, RotationBins};
use crate::demo_pipeline::TrainingTuple;
use crate::voxelizer::ColoredPoint;

/// Perturbation attempts before falling back to the unperturbed sample.
pub const MAX_AUGMENT_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    /// Half-width of the uniform translation range per axis (m).
    pub trans: [f64; 3],
    /// Half-width of the uniform yaw range (degrees).
    pub yaw_deg: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { trans: [0.125; 3], yaw_deg: 45.0 }
    }
}

impl AugmentRanges {
    pub const NONE: Self = Self { trans: [0.0; 3], yaw_deg: 0.0 };

    pub fn is_identity(&self) -> bool {
        self.trans == [0.0; 3] && self.yaw_deg == 0.0
    }
}

/// A sampled rigid transform `p -> R (p - c) + c + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub translation: [f64; 3],
    pub yaw_rad: f64,
}

impl Perturbation {
    pub fn sample(ranges: &AugmentRanges, rng: &mut impl Rng) -> Self {
        let mut u = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
        let translation = [u(ranges.trans[0]), u(ranges.trans[1]), u(ranges.trans[2])];
        let yaw_rad = u(ranges.yaw_deg).to_radians();
        Self { translation, yaw_rad }
    }

    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw_rad)
    }

    pub fn apply_point(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let c = Vector3::from(center);
        let out = self.rotation() * (Vector3::from(p) - c) + c + Vector3::from(self.translation);
        [out.x, out.y, out.z]
    }

    pub fn apply_orientation(&self, q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation()) * q
    }
}

/// Apply one perturbation; `None` when the moved target leaves the grid.
pub fn perturb(tuple: &TrainingTuple, p: &Perturbation, bins: &RotationBins) -> Option<TrainingTuple> {
    let center = tuple.bounds.center();
    let mut pose = tuple.target_pose;
    pose.position = p.apply_point(pose.position, center);
    pose.orientation = p.apply_orientation(&pose.orientation);
    let target = discretize(&pose, &tuple.bounds, bins).ok()?;
    let points = tuple
        .points
        .iter()
        .map(|pt| {
            let q = p.apply_point(pt.position_f64(), center);
            ColoredPoint { position: q.map(|v| v as f32), rgb: pt.rgb }
        })
        .collect();
    Some(TrainingTuple { points, target, target_pose: pose, ..tuple.clone() })
}

/// Perturb with resampling. Returns the new tuple and whether a perturbation
/// was retained; after [`MAX_AUGMENT_ATTEMPTS`] discards the input is
/// returned unchanged.
pub fn augment(
    tuple: &TrainingTuple,
    ranges: &AugmentRanges,
    bins: &RotationBins,
    rng: &mut impl Rng,
) -> (TrainingTuple, bool) {
    if ranges.is_identity() {
        return (tuple.clone(), false);
    }
    for _ in 0..MAX_AUGMENT_ATTEMPTS {
        let p = Perturbation::sample(ranges, rng);
        if let Some(t) = perturb(tuple, &p, bins) {
            return (t, true);
        }
    }
    (tuple.clone(), false)
}
