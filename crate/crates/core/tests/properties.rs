//! Randomized invariants across the pipeline.

use std::f64::consts::FRAC_PI_2;

use nalgebra::UnitQuaternion;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

use peract_core::action_codec::{
    discretize, encode_labels, euler_xyz_to_quat, geodesic_distance, quat_to_euler_xyz, select_best_action,
    undiscretize, DiscreteAction, RotationBins,
};
use peract_core::demo_pipeline::{extract_keyframes, make_training_tuples, CodecConfig, DEFAULT_VEL_EPSILON};
use peract_core::policy::{LanguageEncoding, Policy, PolicyConfig, PolicyInput, QPrediction};
use peract_core::toyworld::{
    camera_rig, render_views, reset, scripted_expert, TaskKind, TaskSpec, ToyEpisode, ToyWorldConfig,
};
use peract_core::trainer::loss;
use peract_core::voxelizer::{
    fuse, fuse_points, project_views, voxel_index_of, ColoredPoint, WorkspaceBounds, CH_INDEX, CH_POINT,
};

fn bounds() -> WorkspaceBounds {
    WorkspaceBounds::cube([-0.5, -0.5, 0.0], 1.0, 10).unwrap()
}

fn point() -> impl Strategy<Value = ColoredPoint> {
    (prop::array::uniform3(-0.6f32..0.6), prop::array::uniform3(any::<u8>()))
        .prop_map(|(p, rgb)| ColoredPoint { position: [p[0], p[1], p[2] + 0.5], rgb })
}

fn action(grid: usize, bins: RotationBins) -> impl Strategy<Value = DiscreteAction> {
    let n = bins.count();
    (
        prop::array::uniform3(0..grid),
        0..n,
        (0..n).prop_filter("canonical pitch", move |b| bins.pitch_bin_valid(*b)),
        0..n,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(t, r, p, y, open, collide)| DiscreteAction {
            trans_index: t,
            rot_indices: [r, p, y],
            open,
            collide,
        })
}

fn q_prediction(grid: usize, bins: usize) -> impl Strategy<Value = QPrediction> {
    (
        prop::collection::vec(-5.0f64..5.0, grid * grid * grid),
        prop::collection::vec(-5.0f64..5.0, bins * 3),
        prop::array::uniform2(-5.0f64..5.0),
        prop::array::uniform2(-5.0f64..5.0),
    )
        .prop_map(move |(t, r, o, c)| QPrediction {
            q_trans: Array3::from_shape_vec((grid, grid, grid), t).unwrap(),
            q_rot: Array2::from_shape_vec((bins, 3), r).unwrap(),
            q_open: o,
            q_collide: c,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_points_in_distinct_voxels_keeps_the_grid(pts in prop::collection::vec(point(), 1..60), seed in any::<u64>()) {
        let b = bounds();
        // Keep one point per voxel.
        let mut seen = std::collections::HashSet::new();
        let distinct: Vec<ColoredPoint> = pts
            .into_iter()
            .filter(|p| voxel_index_of(p.position_f64(), &b).is_none_or(|i| seen.insert(i)))
            .collect();
        let mut shuffled = distinct.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.wrapping_mul(i as u64 + 7) % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(fuse_points(&distinct, &b), fuse_points(&shuffled, &b));
    }

    #[test]
    fn stored_points_index_their_own_voxel(pts in prop::collection::vec(point(), 0..80)) {
        let b = bounds();
        let g = fuse_points(&pts, &b);
        for x in 0..10 {
            for y in 0..10 {
                for z in 0..10 {
                    if g.occupied([x, y, z]) {
                        let p = [0, 1, 2].map(|c| f64::from(g.data[[x, y, z, CH_POINT + c]]));
                        prop_assert_eq!(voxel_index_of(p, &b), Some([x, y, z]));
                    }
                }
            }
        }
    }

    #[test]
    fn discretize_inverts_undiscretize(d in action(100, RotationBins::new(5.0).unwrap())) {
        let b = WorkspaceBounds::cube([-0.5, -0.5, 0.0], 1.0, 100).unwrap();
        let bins = RotationBins::new(5.0).unwrap();
        prop_assert_eq!(discretize(&undiscretize(&d, &b, &bins), &b, &bins).unwrap(), d);
    }

    #[test]
    fn argmax_ignores_increasing_transforms(q in q_prediction(4, 12)) {
        let a = select_best_action(&q).unwrap();
        let f = |v: f64| (0.5 * v).exp() * 3.0 - 1.0;
        let t = QPrediction {
            q_trans: q.q_trans.mapv(f),
            q_rot: q.q_rot.mapv(f),
            q_open: q.q_open.map(f),
            q_collide: q.q_collide.map(f),
        };
        prop_assert_eq!(select_best_action(&t).unwrap(), a);
    }

    #[test]
    fn labels_of_the_argmax_mark_maximal_entries(q in q_prediction(4, 12)) {
        let bins = RotationBins::new(30.0).unwrap();
        let a = select_best_action(&q).unwrap();
        let y = encode_labels(&a, [4; 3], &bins).unwrap();
        let max_t = q.q_trans.iter().copied().fold(f64::MIN, f64::max);
        prop_assert_eq!(q.q_trans[a.trans_index], max_t);
        prop_assert_eq!(y.y_trans[a.trans_index], 1.0);
        prop_assert_eq!(y.y_trans.sum(), 1.0);
        for axis in 0..3 {
            let col = q.q_rot.column(axis);
            let max = col.iter().copied().fold(f64::MIN, f64::max);
            prop_assert_eq!(col[a.rot_indices[axis]], max);
            prop_assert_eq!(y.y_rot[[a.rot_indices[axis], axis]], 1.0);
        }
    }

    #[test]
    fn euler_round_trip_away_from_gimbal_lock(r in -3.1f64..3.1, p in -1.55f64..1.55, y in -3.1f64..3.1) {
        let q = UnitQuaternion::from_euler_angles(r, p, y);
        let back = euler_xyz_to_quat(quat_to_euler_xyz(&q));
        prop_assert!(geodesic_distance(&q, &back) < 1e-6);
    }

    #[test]
    fn gimbal_lock_is_canonical(sign in prop::bool::ANY, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let pitch = if sign { FRAC_PI_2 } else { -FRAC_PI_2 };
        let q = UnitQuaternion::from_euler_angles(a, pitch, b);
        let e = quat_to_euler_xyz(&q);
        prop_assert_eq!(e[0], 0.0);
        prop_assert_eq!(e[1], pitch);
        prop_assert!(geodesic_distance(&q, &euler_xyz_to_quat(e)) < 1e-6);
    }

    #[test]
    fn loss_is_non_negative(q in q_prediction(4, 12), d in action(4, RotationBins::new(30.0).unwrap())) {
        let bins = RotationBins::new(30.0).unwrap();
        let l = loss(&q, &encode_labels(&d, [4; 3], &bins).unwrap()).unwrap();
        for v in [l.total, l.trans_term, l.rot_term, l.open_term, l.collide_term] {
            prop_assert!(v >= 0.0);
        }
    }
}

fn small_world() -> ToyWorldConfig {
    ToyWorldConfig { image_size: 32, ..ToyWorldConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fusing_views_equals_fusing_their_concatenated_points(seed in any::<u64>(), k in 0usize..3) {
        let cfg = small_world();
        let kind = TaskKind::ALL[k];
        let state = reset(&cfg, &TaskSpec::full(kind), 2, seed).unwrap();
        let views = render_views(&state, &cfg);
        prop_assert_eq!(views.len(), camera_rig(&cfg).len());
        let points = project_views(&views).unwrap();
        prop_assert_eq!(fuse(&views, &cfg.bounds).unwrap(), fuse_points(&points, &cfg.bounds));
    }

    #[test]
    fn scripted_episodes_satisfy_keyframe_and_tuple_invariants(seed in any::<u64>(), k in 0usize..3, color in 0usize..20) {
        let cfg = small_world();
        let kind = TaskKind::ALL[k];
        let ep = scripted_expert(&cfg, &TaskSpec::full(kind), color, seed).unwrap();
        let keys = extract_keyframes(&ep, DEFAULT_VEL_EPSILON).unwrap();
        prop_assert_eq!(&keys, &extract_keyframes(&ep, DEFAULT_VEL_EPSILON).unwrap());
        for i in 1..ep.frames.len() {
            if ep.frames[i].gripper_open != ep.frames[i - 1].gripper_open {
                prop_assert!(keys.contains(&i), "gripper change at {} missing from {:?}", i, keys);
            }
        }
        prop_assert_eq!(*keys.last().unwrap(), ep.frames.len() - 1);
        prop_assert!((2..=17).contains(&keys.len()));
        let codec = CodecConfig { bounds: cfg.bounds, bins: RotationBins::new(5.0).unwrap() };
        let tuples = make_training_tuples(&ep, &keys, &codec).unwrap();
        prop_assert_eq!(tuples.len(), *keys.last().unwrap());
        for t in &tuples {
            prop_assert_eq!(&t.language_goal, &ep.language_goal);
        }
    }

    #[test]
    fn world_evolution_is_a_pure_function(seed in any::<u64>(), d in action(32, RotationBins::new(5.0).unwrap())) {
        let cfg = ToyWorldConfig::default();
        let bins = RotationBins::new(5.0).unwrap();
        let spec = TaskSpec::full(TaskKind::StackBlock);
        let mut a = ToyEpisode::new(&cfg, &spec, 0, seed, bins).unwrap();
        let mut b = a.clone();
        prop_assert_eq!(a.step(&d), b.step(&d));
        prop_assert_eq!(&a.state, &b.state);
        prop_assert_eq!(a.is_success(), b.is_success());
    }
}

#[test]
fn index_channels_span_the_unit_interval_monotonically() {
    let g = fuse_points(&[], &bounds());
    for axis in 0..3 {
        let mut prev = f32::MIN;
        for i in 0..10 {
            let mut idx = [0usize; 3];
            idx[axis] = i;
            let v = g.data[[idx[0], idx[1], idx[2], CH_INDEX + axis]];
            assert!((-1.0..=1.0).contains(&v));
            assert!(v > prev);
            prev = v;
        }
        assert_eq!(prev, 1.0);
    }
}

#[test]
fn language_order_matters_only_through_positions() {
    let cfg = PolicyConfig::tiny();
    let mut policy = Policy::<f64>::new(cfg.clone(), 4).unwrap();
    let pos = policy.params_mut().get_mut("pos_embedding").unwrap();
    pos.fill(0.0);
    let grid = fuse_points(
        &[ColoredPoint { position: [0.3, 0.6, 0.2], rgb: [200, 10, 10] }],
        &WorkspaceBounds::cube([0.0; 3], 1.0, 8).unwrap(),
    );
    let tokens = Array2::from_shape_fn((3, 6), |(i, j)| (i as f32 + 1.0) * 0.3 - j as f32 * 0.1);
    let mut swapped = tokens.clone();
    for j in 0..6 {
        swapped.swap([0, j], [2, j]);
    }
    let run = |policy: &Policy<f64>, t: &Array2<f32>| {
        let lang = LanguageEncoding { tokens: t.clone() };
        policy.forward(&PolicyInput { voxels: &grid, proprio: [1.0, 0.04, 0.04, 0.5], lang: &lang }).unwrap()
    };
    let (a, b) = (run(&policy, &tokens), run(&policy, &swapped));
    let diff = (&a.q_trans - &b.q_trans).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff < 1e-12, "{diff}");

    // With positions restored the order is visible.
    let with_pos = Policy::<f64>::new(cfg, 4).unwrap();
    let (a, b) = (run(&with_pos, &tokens), run(&with_pos, &swapped));
    assert!((&a.q_trans - &b.q_trans).iter().any(|v| v.abs() > 1e-9));
}
