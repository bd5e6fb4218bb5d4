//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so the checks execute one at a time (the
//! full-size forward pass needs several GB) and print in order.
//!
//! Environment switches:
//! - `PERACT_SKIP_PAPER_SCALE=1` skips the full-size forward pass.
//! - `PERACT_RUN_CLOSED_LOOP=1` runs the closed-loop training experiment
//!   (criteria 9 and 10, hours of CPU time); otherwise those print SKIP.
//! - `PERACT_CLOSED_LOOP_ITERS` overrides its iteration count.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use peract_core::action_codec::{
    discretize, encode_labels, select_best_action, undiscretize, ContinuousAction, DiscreteAction, RotationBins,
};
use peract_core::demo_pipeline::{
    extract_keyframes, make_training_tuples, CodecConfig, DemoEpisode, DemoFrame, TrainingTuple, DEFAULT_VEL_EPSILON,
};
use peract_core::policy::tape::Tape;
use peract_core::policy::{HashLanguageEncoder, LanguageEncoder, Policy, PolicyConfig, PolicyInput, QPrediction};
use peract_core::toyworld::{
    evaluate, generate_demos, EvalOptions, GoalMode, PolicyAgent, RandomAgent, TaskKind, TaskSpec, ToyWorldConfig,
};
use peract_core::trainer::{
    loss, loss_and_grad, perturb, sample_indices, AugmentRanges, OptimizerKind, Perturbation, TaskDataset,
    TrainConfig, Trainer,
};
use peract_core::voxelizer::{fuse_points, voxel_index_of, ColoredPoint, WorkspaceBounds};

// Pinned tolerances.
const TINY_SUITE_SECONDS: f64 = 30.0;
const PAPER_MEMORY_BYTES: f64 = 16.0 * 1024.0 * 1024.0 * 1024.0;
const CODEC_SAMPLES: usize = 10_000;
const ROT_TOL_DEG: f64 = 2.5;
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;
/// Denominator floor so entries with vanishing gradient compare absolutely.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_SECONDS: f64 = 300.0;
const LOSS_TOL: f64 = 1e-6;
const FLAG_LOSS_TOL: f64 = 1e-9;
const OVERFIT_ITERS: u64 = 2_000;
const OVERFIT_LOSS: f64 = 0.01;
const OVERFIT_CHECK_EVERY: u64 = 50;
const OVERFIT_SECONDS: f64 = 3600.0;
const KEYFRAME_EPISODES: usize = 100;
const SAMPLING_DRAWS: usize = 100_000;
const SAMPLING_FREQ_TOL: f64 = 0.01;
const SAMPLING_MIN_P: f64 = 0.01;
const AUGMENT_SAMPLES: usize = 10_000;
const CLOSED_LOOP_DEMOS: usize = 10;
const CLOSED_LOOP_SEEDS: [u64; 3] = [0, 1, 2];
const CLOSED_LOOP_ITERS: u64 = 6_000;
const CLOSED_LOOP_MAX_ITERS: u64 = 50_000;
const CLOSED_LOOP_EPISODES: usize = 25;
/// Goal colors seen in training: the first `CLOSED_LOOP_DEMOS` of the palette.
const CLOSED_LOOP_COLORS: usize = 10;
const LEARNED_MIN_SCORE: f64 = 65.0;
const RANDOM_MAX_SCORE: f64 = 10.0;
const LANGUAGE_MIN_DROP: f64 = 30.0;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

/// Peak resident set size of this process, where the platform reports it.
fn peak_rss_bytes() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024.0)
}

fn random_grid(bounds: &WorkspaceBounds, n: usize, rng: &mut impl Rng) -> peract_core::voxelizer::VoxelGrid {
    let lo = bounds.min_corner;
    let hi = bounds.max_corner;
    let points: Vec<ColoredPoint> = (0..n)
        .map(|_| ColoredPoint {
            position: [0, 1, 2].map(|k| rng.random_range(lo[k]..hi[k]) as f32),
            rgb: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    fuse_points(&points, bounds)
}

fn shape_check(cfg: &PolicyConfig, bounds: &WorkspaceBounds) -> Result<String, String> {
    let bins = cfg.rotation_bins().map_err(|e| e.to_string())?.count();
    let policy = Policy::<f32>::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = random_grid(bounds, 500, &mut rng);
    let lang = HashLanguageEncoder::new(cfg.num_lang_tokens, cfg.lang_feature_dim, 0)
        .encode("push the red button")
        .map_err(|e| e.to_string())?;
    let input = PolicyInput { voxels: &grid, proprio: [1.0, 0.04, 0.04, 0.0], lang: &lang };
    let mut tape = Tape::new(false);
    let trace = policy.forward_trace(&mut tape, &input).map_err(|e| e.to_string())?;
    let seq = tape.value(trace.sequence).shape().to_vec();
    let q = policy.q_prediction(&tape, &trace);
    let n = cfg.grid_size;
    let got = (seq[0], q.q_trans.shape().to_vec(), q.q_rot.shape().to_vec());
    let want = (cfg.seq_len(), vec![n, n, n], vec![bins, 3]);
    if got != want {
        return Err(format!("seq/trans/rot {got:?}, expected {want:?}"));
    }
    Ok(format!("seq {} trans {n}^3 rot {bins}x3 open 2 collide 2", seq[0]))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let tiny = PolicyConfig::tiny();
    let tiny_bounds = WorkspaceBounds::cube([0.0; 3], 1.0, tiny.grid_size).unwrap();
    let toy = PolicyConfig::toy();
    let toy_bounds = WorkspaceBounds::cube([-0.32, -0.32, -0.03], 0.64, toy.grid_size).unwrap();
    for (cfg, b) in [(&tiny, &tiny_bounds), (&toy, &toy_bounds)] {
        if let Err(e) = shape_check(cfg, b) {
            return Outcome::Fail(format!("small config: {e}"));
        }
    }
    let tiny_secs = start.elapsed().as_secs_f64();
    if tiny_secs >= TINY_SUITE_SECONDS {
        return Outcome::Fail(format!("small-config shape suite took {tiny_secs:.1}s"));
    }
    if env_flag("PERACT_SKIP_PAPER_SCALE") {
        return Outcome::Skip(format!(
            "full-size pass skipped by PERACT_SKIP_PAPER_SCALE; small suite ok in {tiny_secs:.1}s"
        ));
    }
    let full = PolicyConfig::default();
    if full.seq_len() != 8077 || full.rotation_bins().unwrap().count() != 72 {
        return Outcome::Fail(format!("full config sequence {} bins", full.seq_len()));
    }
    let bounds = WorkspaceBounds::cube([-0.5, -0.5, 0.0], 1.0, full.grid_size).unwrap();
    let t = Instant::now();
    match shape_check(&full, &bounds) {
        Err(e) => Outcome::Fail(format!("full size: {e}")),
        Ok(d) => {
            let rss = peak_rss_bytes();
            let mem_ok = rss.is_none_or(|b| b < PAPER_MEMORY_BYTES);
            let mem = rss.map_or("n/a".to_string(), |b| format!("{:.2} GiB", b / 1024f64.powi(3)));
            verdict(
                mem_ok,
                format!(
                    "{d}; peak rss {mem}; full pass {:.1}s; small suite {tiny_secs:.1}s",
                    t.elapsed().as_secs_f64()
                ),
            )
        }
    }
}

/// Wrapped difference in degrees.
fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn criterion_2() -> Outcome {
    let bounds = WorkspaceBounds::cube([-0.5, -0.5, 0.0], 1.0, 100).unwrap();
    let bins = RotationBins::new(5.0).unwrap();
    let half_edge = bounds.edge() / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_pos, mut worst_rot, mut failures) = (0.0f64, 0.0f64, 0);
    for _ in 0..CODEC_SAMPLES {
        let position = [0, 1, 2].map(|k| rng.random_range(bounds.min_corner[k]..bounds.max_corner[k]));
        // Pitch kept off the gimbal-lock poles where per-axis angles are
        // not unique.
        let roll = rng.random_range(-PI..PI);
        let pitch = rng.random_range(-0.499 * PI..0.499 * PI);
        let yaw = rng.random_range(-PI..PI);
        let a = ContinuousAction {
            position,
            orientation: UnitQuaternion::from_euler_angles(roll, pitch, yaw),
            open: rng.random(),
            collide: rng.random(),
        };
        let Ok(d) = discretize(&a, &bounds, &bins) else {
            failures += 1;
            continue;
        };
        let back = undiscretize(&d, &bounds, &bins);
        let pos_err = (0..3).map(|k| (back.position[k] - position[k]).abs()).fold(0.0, f64::max);
        let (r2, p2, y2) = back.orientation.euler_angles();
        let rot_err = [(roll, r2), (pitch, p2), (yaw, y2)]
            .iter()
            .map(|(x, y)| angle_diff_deg(x.to_degrees(), y.to_degrees()))
            .fold(0.0, f64::max);
        worst_pos = worst_pos.max(pos_err);
        worst_rot = worst_rot.max(rot_err);
        if pos_err > half_edge + 1e-12 || rot_err > ROT_TOL_DEG + 1e-9 || back.open != a.open || back.collide != a.collide
        {
            failures += 1;
        }
    }
    verdict(
        failures == 0,
        format!(
            "{CODEC_SAMPLES} samples, {failures} failures; max position error {:.4} cm (limit {:.4}), max angle error {worst_rot:.4} deg (limit {ROT_TOL_DEG})",
            worst_pos * 100.0,
            half_edge * 100.0
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = PolicyConfig::tiny();
    let bins = cfg.rotation_bins().unwrap();
    let bounds = WorkspaceBounds::cube([0.0; 3], 1.0, cfg.grid_size).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = random_grid(&bounds, 150, &mut rng);
    let lang = HashLanguageEncoder::new(cfg.num_lang_tokens, cfg.lang_feature_dim, 3).encode("push the red button").unwrap();
    let proprio = [1.0, 0.04, 0.04, 0.3];
    let pitch: Vec<usize> = (0..bins.count()).filter(|b| bins.pitch_bin_valid(*b)).collect();
    let target = DiscreteAction {
        trans_index: [rng.random_range(0..8), rng.random_range(0..8), rng.random_range(0..8)],
        rot_indices: [rng.random_range(0..bins.count()), pitch[rng.random_range(0..pitch.len())], 2],
        open: true,
        collide: false,
    };
    let y = encode_labels(&target, cfg.grid(), &bins).unwrap();
    let mut policy = Policy::<f64>::new(cfg.clone(), 3).unwrap();
    // Non-zero biases and norm shifts so every group carries signal.
    for v in policy.params_mut().values_mut() {
        v.mapv_inplace(|x| x + rng.random_range(-0.1..0.1));
    }
    let input = PolicyInput { voxels: &grid, proprio, lang: &lang };
    let total = |p: &Policy<f64>| loss(&p.forward(&input).unwrap(), &y).unwrap().total;

    let mut tape = Tape::new(true);
    let trace = policy.forward_trace(&mut tape, &input).unwrap();
    let q = policy.q_prediction(&tape, &trace);
    let (_, dq) = loss_and_grad(&q, &y).unwrap();
    let analytic = policy.backward(&tape, &trace, &dq);

    let names = policy.params().names().to_vec();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (g, name) in names.iter().enumerate() {
        let shape = policy.params().values()[g].dim();
        let mut group_worst = 0.0f64;
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = policy.params().values()[g][[i, j]];
                policy.params_mut().values_mut()[g][[i, j]] = orig + GRAD_STEP;
                let up = total(&policy);
                policy.params_mut().values_mut()[g][[i, j]] = orig - GRAD_STEP;
                let down = total(&policy);
                policy.params_mut().values_mut()[g][[i, j]] = orig;
                let numeric = (up - down) / (2.0 * GRAD_STEP);
                let a = analytic[g][[i, j]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                group_worst = group_worst.max(rel);
                checked += 1;
            }
        }
        if group_worst >= worst.0 {
            worst = (group_worst, name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < GRAD_REL_TOL && secs < GRAD_SECONDS,
        format!(
            "{} groups, {checked} entries; max relative error {:.2e} in {} (limit {GRAD_REL_TOL:.0e}); {secs:.1}s",
            names.len(),
            worst.0,
            worst.1
        ),
    )
}

fn criterion_4() -> Outcome {
    let bins = RotationBins::new(5.0).unwrap();
    let grid = [100; 3];
    let q = QPrediction::zeros(grid, bins.count());
    let target = DiscreteAction { trans_index: [3, 50, 99], rot_indices: [0, 17, 71], open: true, collide: false };
    let l = loss(&q, &encode_labels(&target, grid, &bins).unwrap()).unwrap();
    let expect = [1e6f64.ln(), 3.0 * 72f64.ln(), 2f64.ln(), 2f64.ln()];
    let got = [l.trans_term, l.rot_term, l.open_term, l.collide_term];
    let tol = [LOSS_TOL, LOSS_TOL, FLAG_LOSS_TOL, FLAG_LOSS_TOL];
    let ok = (0..4).all(|i| (got[i] - expect[i]).abs() <= tol[i]);
    verdict(
        ok,
        format!(
            "trans {:.9} (ln 1e6 = {:.9}), rot {:.9} (3 ln 72 = {:.9}), open {:.12}, collide {:.12}",
            got[0], expect[0], got[1], expect[1], got[2], got[3]
        ),
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let world = ToyWorldConfig::default();
    let pc = PolicyConfig { num_latents: 128, ..PolicyConfig::toy() };
    let bins = pc.rotation_bins().unwrap();
    let demos = generate_demos(&world, &TaskSpec::full(TaskKind::PressButton), 1, 0).unwrap();
    let codec = CodecConfig { bounds: world.bounds, bins };
    let ds = TaskDataset::from_episodes(&demos, &codec, DEFAULT_VEL_EPSILON).unwrap();
    let enc = HashLanguageEncoder::new(pc.num_lang_tokens, pc.lang_feature_dim, 0);
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        optimizer_kind: OptimizerKind::Adam,
        aug_trans_range: [0.0; 3],
        aug_yaw_range_deg: 0.0,
        total_iterations: OVERFIT_ITERS,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(pc.clone(), cfg, &enc).unwrap();
    let mut last = (f64::NAN, 0usize);
    while trainer.iteration < OVERFIT_ITERS {
        if let Err(e) = trainer.step(&ds) {
            return Outcome::Fail(format!("training failed at iteration {}: {e}", trainer.iteration + 1));
        }
        if trainer.iteration % OVERFIT_CHECK_EVERY != 0 {
            continue;
        }
        let (mut total, mut hits) = (0.0, 0);
        for t in ds.iter() {
            let grid = t.voxel_obs();
            let lang = enc.encode(&t.language_goal).unwrap();
            let q = trainer.policy.forward(&PolicyInput { voxels: &grid, proprio: t.proprio, lang: &lang }).unwrap();
            hits += usize::from(select_best_action(&q).unwrap() == t.target);
            total += loss(&q, &encode_labels(&t.target, pc.grid(), &bins).unwrap()).unwrap().total;
        }
        last = (total / ds.num_tuples() as f64, hits);
        if last.0 < OVERFIT_LOSS && hits == ds.num_tuples() {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        last.0 < OVERFIT_LOSS && last.1 == ds.num_tuples() && secs < OVERFIT_SECONDS,
        format!(
            "iteration {}: mean loss {:.5} (limit {OVERFIT_LOSS}), {}/{} argmax matches; {secs:.0}s",
            trainer.iteration,
            last.0,
            last.1,
            ds.num_tuples()
        ),
    )
}

fn random_quat(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(rng.random_range(-PI..PI), rng.random_range(-1.5..1.5), rng.random_range(-PI..PI))
}

fn synthetic_episode(rng: &mut impl Rng) -> DemoEpisode {
    let n = rng.random_range(2..60);
    let mut frames: Vec<DemoFrame> = Vec::with_capacity(n);
    for t in 0..n {
        let speed = match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(0.0..DEFAULT_VEL_EPSILON),
            // Exactly at the threshold does not count as still.
            2 => DEFAULT_VEL_EPSILON,
            _ => rng.random_range(0.2..1.0),
        };
        let mut v: Vec<f64> = (0..7).map(|_| rng.random_range(-speed..=speed)).collect();
        v[rng.random_range(0..7)] = if rng.random() { speed } else { -speed };
        let (position, orientation, open) = match frames.last() {
            Some(prev) if rng.random_bool(0.4) => {
                // Same pose, sometimes with the sign-flipped quaternion.
                let q = if rng.random() {
                    UnitQuaternion::new_unchecked(-prev.gripper_orientation.into_inner())
                } else {
                    prev.gripper_orientation
                };
                let open = if rng.random_bool(0.2) { !prev.gripper_open } else { prev.gripper_open };
                (prev.gripper_position, q, open)
            }
            Some(prev) => {
                let open = if rng.random_bool(0.15) { !prev.gripper_open } else { prev.gripper_open };
                ([0, 1, 2].map(|_| rng.random_range(-0.5..0.5)), random_quat(rng), open)
            }
            None => ([0, 1, 2].map(|_| rng.random_range(-0.5..0.5)), random_quat(rng), rng.random()),
        };
        frames.push(DemoFrame {
            views: Vec::new(),
            gripper_position: position,
            gripper_orientation: orientation,
            gripper_open: open,
            joint_velocities: v,
            timestep: t as u64,
        });
    }
    DemoEpisode {
        collide_flags: vec![false; n],
        frames,
        language_goal: "synthetic".into(),
        task_id: "synthetic".into(),
        variation_id: 0,
    }
}

fn same_pose_oracle(a: &DemoFrame, b: &DemoFrame) -> bool {
    let dp = (0..3).all(|k| (a.gripper_position[k] - b.gripper_position[k]).abs() <= 1e-6);
    let ra = a.gripper_orientation.to_rotation_matrix();
    let rb = b.gripper_orientation.to_rotation_matrix();
    let dr = (ra.matrix() - rb.matrix()).amax() <= 1e-6;
    dp && dr && a.gripper_open == b.gripper_open
}

/// Frame-by-frame scan of the keyframe rule.
fn brute_force_keyframes(ep: &DemoEpisode, eps: f64) -> Vec<usize> {
    let f = &ep.frames;
    let mut candidates = Vec::new();
    for i in 1..f.len() {
        let still = f[i].joint_velocities.iter().all(|v| v.abs() < eps);
        let same = f[i].gripper_open == f[i - 1].gripper_open;
        if (still && same) || !same {
            candidates.push(i);
        }
    }
    if !candidates.contains(&(f.len() - 1)) {
        candidates.push(f.len() - 1);
    }
    let mut out: Vec<usize> = Vec::new();
    let mut run_start: Option<usize> = None;
    for c in candidates {
        match run_start {
            Some(s) if same_pose_oracle(&f[s], &f[c]) => {}
            _ => {
                out.push(c);
                run_start = Some(c);
            }
        }
    }
    out
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut total_keys = 0;
    let mut first = None;
    for e in 0..KEYFRAME_EPISODES {
        let ep = synthetic_episode(&mut rng);
        let got = extract_keyframes(&ep, DEFAULT_VEL_EPSILON).unwrap();
        let want = brute_force_keyframes(&ep, DEFAULT_VEL_EPSILON);
        total_keys += want.len();
        if got != want {
            mismatches += 1;
            first.get_or_insert(format!("episode {e}: got {got:?} want {want:?}"));
        }
    }
    verdict(
        mismatches == 0,
        format!(
            "{KEYFRAME_EPISODES} episodes, {total_keys} keyframes, {mismatches} mismatches{}",
            first.map_or(String::new(), |f| format!("; {f}"))
        ),
    )
}

fn stub_tuple(task: &str, bounds: WorkspaceBounds) -> TrainingTuple {
    let target_pose = ContinuousAction {
        position: bounds.center(),
        orientation: UnitQuaternion::identity(),
        open: true,
        collide: false,
    };
    TrainingTuple {
        points: Vec::new(),
        bounds,
        proprio: [1.0, 0.04, 0.04, 0.0],
        language_goal: format!("do {task}"),
        target: DiscreteAction { trans_index: [0; 3], rot_indices: [0; 3], open: true, collide: false },
        target_pose,
        task_id: task.into(),
        frame_index: 0,
    }
}

fn criterion_7() -> Outcome {
    let bounds = WorkspaceBounds::cube([0.0; 3], 1.0, 8).unwrap();
    let counts = [("a", 10), ("b", 100), ("c", 1000)];
    let ds = TaskDataset::from_tuples(
        counts.iter().flat_map(|(name, n)| (0..*n).map(move |_| stub_tuple(name, bounds))),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = sample_indices(&ds, SAMPLING_DRAWS, &mut rng).unwrap();
    let mut hist = [0usize; 3];
    for (k, i) in &draws {
        assert!(*i < ds.task(*k).len());
        hist[*k] += 1;
    }
    let expected = SAMPLING_DRAWS as f64 / 3.0;
    let chi2: f64 = hist.iter().map(|&h| (h as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    let freqs = hist.map(|h| h as f64 / SAMPLING_DRAWS as f64);
    let ok = freqs.iter().all(|f| (f - 1.0 / 3.0).abs() <= SAMPLING_FREQ_TOL) && p > SAMPLING_MIN_P;
    verdict(ok, format!("frequencies {freqs:.4?} for tuple counts (10, 100, 1000); chi-square {chi2:.3}, p = {p:.3}"))
}

/// `R_z(yaw) (p - c) + c + t`, written out by hand.
fn rigid_oracle(p: [f64; 3], c: [f64; 3], t: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, co) = yaw.sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    [co * dx - s * dy + c[0] + t[0], s * dx + co * dy + c[1] + t[1], p[2] + t[2]]
}

fn criterion_8() -> Outcome {
    let world = ToyWorldConfig::default();
    let bins = PolicyConfig::toy().rotation_bins().unwrap();
    let codec = CodecConfig { bounds: world.bounds, bins };
    let mut tuples = Vec::new();
    for kind in TaskKind::ALL {
        let demos = generate_demos(&world, &TaskSpec::full(kind), 1, 8).unwrap();
        let keys = extract_keyframes(&demos[0], DEFAULT_VEL_EPSILON).unwrap();
        tuples.extend(make_training_tuples(&demos[0], &keys, &codec).unwrap());
    }
    let ranges = AugmentRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut retained, mut violations) = (0, 0);
    let mut first = None;
    for s in 0..AUGMENT_SAMPLES {
        let tuple = &tuples[s % tuples.len()];
        let p = Perturbation::sample(&ranges, &mut rng);
        let moved = rigid_oracle(tuple.target_pose.position, world.bounds.center(), p.translation, p.yaw_rad);
        let oracle = voxel_index_of(moved, &world.bounds);
        let bad = match (perturb(tuple, &p, &bins), oracle) {
            (Some(t), Some(idx)) => {
                retained += 1;
                let in_grid = (0..3).all(|k| t.target.trans_index[k] < world.bounds.grid_size[k]);
                let pt = rigid_oracle(tuple.points[0].position_f64(), world.bounds.center(), p.translation, p.yaw_rad);
                let pt_ok = (0..3).all(|k| (f64::from(t.points[0].position[k]) - pt[k]).abs() < 1e-5);
                !in_grid
                    || t.target.trans_index != idx
                    || t.target.open != tuple.target.open
                    || t.target.collide != tuple.target.collide
                    || !pt_ok
            }
            (None, None) => false,
            _ => true,
        };
        if bad {
            violations += 1;
            first.get_or_insert(format!("sample {s}: perturbation {p:?}"));
        }
    }
    verdict(
        violations == 0,
        format!(
            "{AUGMENT_SAMPLES} samples at +-{:.3} m / +-{} deg, {retained} retained, {violations} violations{}",
            ranges.trans[0],
            ranges.yaw_deg,
            first.map_or(String::new(), |f| format!("; {f}"))
        ),
    )
}

struct ClosedLoop {
    learned: Vec<f64>,
    swapped: f64,
    best_seed: u64,
    random: f64,
    iterations: u64,
    hours: f64,
}

fn closed_loop() -> ClosedLoop {
    let start = Instant::now();
    let iterations = std::env::var("PERACT_CLOSED_LOOP_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(CLOSED_LOOP_ITERS)
        .min(CLOSED_LOOP_MAX_ITERS);
    let world = ToyWorldConfig::default();
    let pc = PolicyConfig::toy();
    let bins = pc.rotation_bins().unwrap();
    let codec = CodecConfig { bounds: world.bounds, bins };
    let colors: Vec<usize> = (0..CLOSED_LOOP_COLORS).collect();
    let mut demos = Vec::new();
    for kind in TaskKind::ALL {
        let spec = TaskSpec::with_colors(kind, colors.clone()).unwrap();
        demos.extend(generate_demos(&world, &spec, CLOSED_LOOP_DEMOS, 0).unwrap());
    }
    let ds = TaskDataset::from_episodes(&demos, &codec, DEFAULT_VEL_EPSILON).unwrap();
    let enc = HashLanguageEncoder::new(pc.num_lang_tokens, pc.lang_feature_dim, 0);
    let press = [TaskSpec::with_colors(TaskKind::PressButton, colors).unwrap()];
    let opts = |goal_mode| EvalOptions { episodes_per_task: CLOSED_LOOP_EPISODES, goal_mode, ..EvalOptions::default() };

    let mut learned = Vec::new();
    let mut best: Option<(f64, u64, Policy<f32>)> = None;
    for seed in CLOSED_LOOP_SEEDS {
        let cfg = TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer_kind: OptimizerKind::Adam,
            total_iterations: iterations,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(pc.clone(), cfg, &enc).unwrap();
        while trainer.iteration < iterations {
            trainer.step(&ds).unwrap();
        }
        let mut agent = PolicyAgent::new(&trainer.policy, &enc, world.bounds);
        let report = evaluate(&world, &press, &mut agent, bins, &opts(GoalMode::Correct)).unwrap();
        let score = report.task_mean(TaskKind::PressButton).unwrap();
        learned.push(score);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, seed, trainer.policy));
        }
    }
    let (_, best_seed, policy) = best.expect("at least one seed");
    let mut agent = PolicyAgent::new(&policy, &enc, world.bounds);
    let swapped = evaluate(&world, &press, &mut agent, bins, &opts(GoalMode::Swapped)).unwrap();
    let mut random_agent = RandomAgent::new(world.bounds.grid_size, bins, 0);
    let random = evaluate(&world, &press, &mut random_agent, bins, &opts(GoalMode::Correct)).unwrap();
    ClosedLoop {
        learned,
        swapped: swapped.task_mean(TaskKind::PressButton).unwrap(),
        best_seed,
        random: random.task_mean(TaskKind::PressButton).unwrap(),
        iterations,
        hours: start.elapsed().as_secs_f64() / 3600.0,
    }
}

fn criteria_9_10() -> [Outcome; 2] {
    if !env_flag("PERACT_RUN_CLOSED_LOOP") {
        let why = "closed-loop experiment not run; set PERACT_RUN_CLOSED_LOOP=1";
        return [Outcome::Skip(why.into()), Outcome::Skip(why.into())];
    }
    let r = closed_loop();
    let best = r.learned.iter().copied().fold(f64::MIN, f64::max);
    let c9 = verdict(
        best >= LEARNED_MIN_SCORE && r.random < RANDOM_MAX_SCORE,
        format!(
            "press_button per seed {:?} (best {best:.0}, need >= {LEARNED_MIN_SCORE}); random {:.0} (need < {RANDOM_MAX_SCORE}); {} iterations per seed; {:.2} h",
            r.learned, r.random, r.iterations, r.hours
        ),
    );
    let drop = best - r.swapped;
    let c10 = verdict(
        drop >= LANGUAGE_MIN_DROP,
        format!(
            "seed {}: correct goals {best:.0}, swapped goals {:.0}, drop {drop:.0} (need >= {LANGUAGE_MIN_DROP})",
            r.best_seed, r.swapped
        ),
    );
    [c9, c10]
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters come through as arguments.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        let (tag, detail) = match o {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n:>2}: {tag} {detail}");
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8());
    let [c9, c10] = criteria_9_10();
    report(9, c9);
    report(10, c10);
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
