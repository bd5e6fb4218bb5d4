//! Four-term cross-entropy over the Q-function heads.

use serde::{Deserialize, Serialize};

use crate::action_codec::{DiscreteAction, OneHotLabels};
use crate::error::{invalid, Error, Result};
use crate::policy::QPrediction;

/// Per-head negative log-likelihoods in nats.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub trans_term: f64,
    pub rot_term: f64,
    pub open_term: f64,
    pub collide_term: f64,
}

impl LossBreakdown {
    fn from_terms(trans_term: f64, rot_term: f64, open_term: f64, collide_term: f64) -> Self {
        Self { total: trans_term + rot_term + open_term + collide_term, trans_term, rot_term, open_term, collide_term }
    }

    /// Running sum weighted by `w`; used for batch means.
    pub(crate) fn add_scaled(&mut self, other: &Self, w: f64) {
        self.trans_term += w * other.trans_term;
        self.rot_term += w * other.rot_term;
        self.open_term += w * other.open_term;
        self.collide_term += w * other.collide_term;
        self.total = self.trans_term + self.rot_term + self.open_term + self.collide_term;
    }

    pub(crate) fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("translation", self.trans_term),
            ("rotation", self.rot_term),
            ("open", self.open_term),
            ("collide", self.collide_term),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(h, _)| h)
    }
}

/// `(-log softmax(logits)[label], softmax(logits) - onehot(label))`.
fn cross_entropy(logits: impl Iterator<Item = f64> + Clone, label: usize) -> (f64, Vec<f64>) {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.map(|v| v - max).collect();
    let sum: f64 = shifted.iter().map(|v| v.exp()).sum();
    let log_z = sum.ln();
    let nll = log_z - shifted[label];
    let mut grad: Vec<f64> = shifted.iter().map(|v| (v - log_z).exp()).collect();
    grad[label] -= 1.0;
    (nll, grad)
}

fn check_shapes(q: &QPrediction, y: &OneHotLabels) -> Result<()> {
    if q.q_trans.shape() != y.y_trans.shape() || q.q_rot.shape() != y.y_rot.shape() {
        return Err(invalid(format!(
            "prediction shapes {:?}/{:?} do not match label shapes {:?}/{:?}",
            q.q_trans.shape(),
            q.q_rot.shape(),
            y.y_trans.shape(),
            y.y_rot.shape()
        )));
    }
    Ok(())
}

/// Loss and its gradient with respect to every Q value.
pub fn loss_and_grad(q: &QPrediction, y: &OneHotLabels) -> Result<(LossBreakdown, QPrediction)> {
    check_shapes(q, y)?;
    let target = y.to_action()?;
    loss_and_grad_for(q, &target)
}

pub(crate) fn loss_and_grad_for(q: &QPrediction, target: &DiscreteAction) -> Result<(LossBreakdown, QPrediction)> {
    if let Some(head) = q.first_non_finite() {
        return Err(Error::NonFiniteLoss { head });
    }
    let shape = q.q_trans.shape();
    let [x, yy, z] = target.trans_index;
    let flat = (x * shape[1] + yy) * shape[2] + z;
    let (trans_term, g) = cross_entropy(q.q_trans.iter().copied(), flat);
    let mut dq = QPrediction::zeros([shape[0], shape[1], shape[2]], q.q_rot.nrows());
    dq.q_trans.iter_mut().zip(g).for_each(|(d, g)| *d = g);

    let mut rot_term = 0.0;
    for axis in 0..3 {
        let (nll, g) = cross_entropy(q.q_rot.column(axis).iter().copied(), target.rot_indices[axis]);
        rot_term += nll;
        dq.q_rot.column_mut(axis).iter_mut().zip(g).for_each(|(d, g)| *d = g);
    }
    let pair = |p: [f64; 2], hot: bool| {
        let (nll, g) = cross_entropy(p.into_iter(), usize::from(hot));
        (nll, [g[0], g[1]])
    };
    let (open_term, g_open) = pair(q.q_open, target.open);
    let (collide_term, g_collide) = pair(q.q_collide, target.collide);
    dq.q_open = g_open;
    dq.q_collide = g_collide;
    let loss = LossBreakdown::from_terms(trans_term, rot_term, open_term, collide_term);
    if let Some(head) = loss.first_non_finite() {
        return Err(Error::NonFiniteLoss { head });
    }
    Ok((loss, dq))
}

/// Cross-entropy of each head against one-hot labels.
pub fn loss(q: &QPrediction, y: &OneHotLabels) -> Result<LossBreakdown> {
    loss_and_grad(q, y).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action_codec::{encode_labels, RotationBins};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn target(grid: usize) -> DiscreteAction {
        DiscreteAction { trans_index: [1, grid - 1, 2], rot_indices: [3, 0, 7], open: true, collide: false }
    }

    #[test]
    fn zero_logits_give_log_class_counts() {
        let bins = RotationBins::new(5.0).unwrap();
        let q = QPrediction::zeros([100; 3], bins.count());
        let y = encode_labels(&target(100), [100; 3], &bins).unwrap();
        let l = loss(&q, &y).unwrap();
        assert!((l.trans_term - 1e6f64.ln()).abs() < 1e-6);
        assert!((l.rot_term - 3.0 * 72f64.ln()).abs() < 1e-6);
        assert!((l.open_term - 2f64.ln()).abs() < 1e-9);
        assert!((l.collide_term - 2f64.ln()).abs() < 1e-9);
        assert!((l.total - (l.trans_term + l.rot_term + l.open_term + l.collide_term)).abs() < 1e-9);
    }

    #[test]
    fn saturated_margin_is_near_zero() {
        let bins = RotationBins::new(30.0).unwrap();
        let d = target(4);
        let mut q = QPrediction::zeros([4; 3], bins.count());
        q.q_trans[d.trans_index] = 30.0;
        for axis in 0..3 {
            q.q_rot[[d.rot_indices[axis], axis]] = 30.0;
        }
        q.q_open = [0.0, 30.0];
        q.q_collide = [30.0, 0.0];
        let y = encode_labels(&d, [4; 3], &bins).unwrap();
        let l = loss(&q, &y).unwrap();
        assert!(l.total < 1e-9, "{l:?}");

        let mut q = QPrediction::zeros([4; 3], bins.count());
        q.q_trans[d.trans_index] = 60.0;
        assert!(loss(&q, &y).unwrap().trans_term < 1e-20);
    }

    #[test]
    fn random_logits_match_scalar_oracle() {
        let bins = RotationBins::new(30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = QPrediction::zeros([4; 3], bins.count());
        q.q_trans.mapv_inplace(|_| rng.random_range(-5.0..5.0));
        q.q_rot.mapv_inplace(|_| rng.random_range(-5.0..5.0));
        q.q_open = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        q.q_collide = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let d = target(4);
        let l = loss(&q, &encode_labels(&d, [4; 3], &bins).unwrap()).unwrap();

        // Straightforward per-class evaluation, no max shift.
        let nll = |vals: &[f64], k: usize| {
            let z: f64 = vals.iter().map(|v| v.exp()).sum();
            -(vals[k].exp() / z).ln()
        };
        let trans: Vec<f64> = q.q_trans.iter().copied().collect();
        let flat = (d.trans_index[0] * 4 + d.trans_index[1]) * 4 + d.trans_index[2];
        assert!((l.trans_term - nll(&trans, flat)).abs() < 1e-12);
        let rot: f64 = (0..3).map(|a| nll(&q.q_rot.column(a).to_vec(), d.rot_indices[a])).sum();
        assert!((l.rot_term - rot).abs() < 1e-12);
        assert!((l.open_term - nll(&q.q_open, 1)).abs() < 1e-12);
        assert!((l.collide_term - nll(&q.q_collide, 0)).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let bins = RotationBins::new(30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut q = QPrediction::zeros([4; 3], bins.count());
        q.q_trans.mapv_inplace(|_| rng.random_range(-3.0..3.0));
        q.q_rot.mapv_inplace(|_| rng.random_range(-3.0..3.0));
        let y = encode_labels(&target(4), [4; 3], &bins).unwrap();
        let (_, g) = loss_and_grad(&q, &y).unwrap();
        // Each head's softmax is g + onehot, which must be a distribution.
        let trans_sum: f64 = g.q_trans.iter().sum::<f64>() + 1.0;
        assert!((trans_sum - 1.0).abs() < 1e-5);
        for axis in 0..3 {
            assert!((g.q_rot.column(axis).sum() + 1.0 - 1.0).abs() < 1e-5);
        }
        let h = 1e-6;
        let mut qp = q.clone();
        qp.q_trans[[0, 0, 0]] += h;
        let mut qm = q.clone();
        qm.q_trans[[0, 0, 0]] -= h;
        let fd = (loss(&qp, &y).unwrap().total - loss(&qm, &y).unwrap().total) / (2.0 * h);
        assert!((fd - g.q_trans[[0, 0, 0]]).abs() < 1e-7);
    }

    #[test]
    fn non_one_hot_and_shape_mismatch_rejected() {
        let bins = RotationBins::new(30.0).unwrap();
        let q = QPrediction::zeros([4; 3], bins.count());
        let mut y = encode_labels(&target(4), [4; 3], &bins).unwrap();
        y.y_trans[[0, 0, 0]] = 1.0;
        assert!(matches!(loss(&q, &y), Err(Error::InvalidInput(_))));
        let mut y = encode_labels(&target(4), [4; 3], &bins).unwrap();
        y.y_trans = Array3::zeros((5, 4, 4));
        assert!(loss(&q, &y).is_err());
    }

    #[test]
    fn non_finite_logits_name_the_head() {
        let bins = RotationBins::new(30.0).unwrap();
        let mut q = QPrediction::zeros([4; 3], bins.count());
        q.q_open[0] = f64::NAN;
        let y = encode_labels(&target(4), [4; 3], &bins).unwrap();
        assert!(matches!(loss(&q, &y), Err(Error::NonFiniteLoss { head: "open" })));
    }
}
