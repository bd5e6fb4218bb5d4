//! The five subcommands. Each takes a resolved config and an output
//! directory, writes its artifacts there and returns a printable summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde_json::json;

use peract_core::action_codec::{quat_to_euler_xyz, select_best_action, undiscretize, DiscreteAction, RotationBins};
use peract_core::demo_pipeline::{extract_keyframes, load_dataset, save_dataset, CodecConfig};
use peract_core::policy::{Checkpoint, HashLanguageEncoder, LanguageEncoder, Policy, PolicyInput, QPrediction};
use peract_core::toyworld::{
    color_index, color_name, evaluate, generate_demos, Agent, EvalOptions, EvalReport, ExpertReplayAgent,
    PolicyAgent, RandomAgent, ToyEpisode, PALETTE,
};
use peract_core::trainer::{latest_checkpoint, loss_and_grad, train, RunOptions, TaskDataset};
use peract_core::voxelizer::fuse;
use peract_core::{Error, Result};

use crate::config::{AgentKind, RunConfig};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const PREDICTION_FILE: &str = "prediction.json";
pub const INSPECT_SUMMARY_FILE: &str = "summary.txt";
/// Max-projection images, one per collapsed axis.
pub const HEATMAP_FILES: [&str; 3] = ["q_trans_max_x.png", "q_trans_max_y.png", "q_trans_max_z.png"];
const HEATMAP_SCALE: u32 = 8;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

/// Create `out` and prove it is writable before any long computation.
fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let probe = out.join(".write_probe");
    fs::write(&probe, b"")?;
    fs::remove_file(probe)?;
    Ok(())
}

fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

fn require_existing(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = p.clone().ok_or_else(|| invalid(format!("no {what} given (set {what} = PATH)")))?;
    if !p.exists() {
        return Err(invalid(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let world = cfg.world()?;
    let specs = cfg.task_specs()?;
    prepare_out(out)?;
    let mut all = Vec::new();
    let mut summary = String::from("task demos keyframes\n");
    for spec in &specs {
        let demos = generate_demos(&world, spec, cfg.demos_per_task, cfg.seed)?;
        let mut keys = 0;
        for d in &demos {
            keys += extract_keyframes(d, cfg.vel_epsilon)?.len();
        }
        let _ = writeln!(summary, "{} {} {keys}", spec.kind, demos.len());
        all.extend(demos);
    }
    save_dataset(&all, out)?;
    write_snapshot(cfg, out)?;
    Ok(summary)
}

fn bins(cfg: &RunConfig) -> Result<RotationBins> {
    cfg.policy.rotation_bins()
}

pub fn load_tuples(cfg: &RunConfig) -> Result<TaskDataset> {
    let path = require_existing(&cfg.dataset, "dataset")?;
    let episodes = load_dataset(&path)?;
    let codec = CodecConfig { bounds: cfg.world()?.bounds, bins: bins(cfg)? };
    TaskDataset::from_episodes(&episodes, &codec, cfg.vel_epsilon)
}

fn encoder(cfg: &RunConfig, lang_seed: u64) -> HashLanguageEncoder {
    HashLanguageEncoder::new(cfg.policy.num_lang_tokens, cfg.policy.lang_feature_dim, lang_seed)
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<String> {
    require_existing(&cfg.dataset, "dataset")?;
    prepare_out(out)?;
    write_snapshot(cfg, out)?;
    let dataset = load_tuples(cfg)?;
    let enc = encoder(cfg, cfg.lang_seed);
    let resume = if cfg.resume { latest_checkpoint(out)? } else { None };
    let options = RunOptions {
        resume: resume.clone(),
        metadata: json!({ "lang_seed": cfg.lang_seed, "resolved_config": cfg.to_text() }),
        verbose: false,
    };
    let outcome = train(&dataset, &cfg.policy, &cfg.train, &enc, out, &options)?;
    let last = outcome.log.last();
    let mut s = String::new();
    if let Some(r) = &resume {
        let _ = writeln!(s, "resumed from {}", r.display());
    }
    let _ = writeln!(
        s,
        "trained {} tasks, {} tuples to iteration {}; final loss {}; checkpoint {}",
        dataset.num_tasks(),
        dataset.num_tuples(),
        last.map_or(0, |r| r.iteration),
        last.map_or("n/a".to_string(), |r| format!("{:.5}", r.loss.total)),
        outcome.final_checkpoint.display()
    );
    Ok(s)
}

/// Policy and the encoder it was trained with. A directory resolves to its
/// latest checkpoint.
pub fn load_policy(cfg: &RunConfig) -> Result<(Policy<f32>, HashLanguageEncoder)> {
    let mut path = require_existing(&cfg.checkpoint, "checkpoint")?;
    if path.is_dir() {
        path = latest_checkpoint(&path)?.ok_or_else(|| invalid(format!("no checkpoint in {}", path.display())))?;
    }
    let ck = Checkpoint::read(&path)?;
    let world = cfg.world()?;
    if ck.policy_config.grid() != world.bounds.grid_size {
        return Err(invalid(format!(
            "checkpoint grid {:?} does not match the environment grid {:?}",
            ck.policy_config.grid(),
            world.bounds.grid_size
        )));
    }
    let lang_seed = ck.metadata["extra"]["lang_seed"].as_u64().unwrap_or(cfg.lang_seed);
    let policy = ck.policy::<f32>(None)?;
    let enc = HashLanguageEncoder::new(policy.config().num_lang_tokens, policy.config().lang_feature_dim, lang_seed);
    Ok((policy, enc))
}

pub fn eval_report(cfg: &RunConfig) -> Result<EvalReport> {
    let world = cfg.world()?;
    let specs = cfg.task_specs()?;
    let b = bins(cfg)?;
    let opts = EvalOptions {
        episodes_per_task: cfg.episodes,
        max_steps: cfg.max_steps,
        seed: cfg.seed,
        goal_mode: cfg.goal_mode,
    };
    match cfg.agent {
        AgentKind::Expert => evaluate(&world, &specs, &mut ExpertReplayAgent::new(world.clone(), b), b, &opts),
        AgentKind::Random => {
            let mut a = RandomAgent::new(world.bounds.grid_size, b, cfg.seed);
            evaluate(&world, &specs, &mut a, b, &opts)
        }
        AgentKind::Policy => {
            let (policy, enc) = load_policy(cfg)?;
            let b = policy.config().rotation_bins()?;
            let mut a = PolicyAgent::new(&policy, &enc, world.bounds);
            evaluate(&world, &specs, &mut a as &mut dyn Agent, b, &opts)
        }
    }
}

pub fn eval_cmd(cfg: &RunConfig, out: &Path) -> Result<String> {
    if cfg.agent == AgentKind::Policy {
        require_existing(&cfg.checkpoint, "checkpoint")?;
    }
    prepare_out(out)?;
    write_snapshot(cfg, out)?;
    let report = eval_report(cfg)?;
    fs::write(out.join(EVAL_REPORT_FILE), report.to_json()?)?;
    let mut s = String::from("task variation episodes mean_score terminations\n");
    for r in &report.rows {
        let hist: Vec<String> = r.terminations.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "{} {} {} {:.1} {}", r.task, r.variation, r.episodes, r.mean_score, hist.join(","));
    }
    Ok(s)
}

fn action_json(a: &DiscreteAction, cfg: &RunConfig) -> Result<serde_json::Value> {
    let pose = undiscretize(a, &cfg.world()?.bounds, &bins(cfg)?);
    Ok(json!({
        "trans_index": a.trans_index,
        "rot_indices": a.rot_indices,
        "open": a.open,
        "collide": a.collide,
        "position": pose.position,
        "euler_deg": quat_to_euler_xyz(&pose.orientation).map(f64::to_degrees),
    }))
}

/// Greedy action for a fresh toy scene of the first configured task.
pub fn predict_cmd(cfg: &RunConfig, out: &Path) -> Result<String> {
    let (policy, enc) = load_policy(cfg)?;
    prepare_out(out)?;
    write_snapshot(cfg, out)?;
    let spec = cfg.task_specs()?.into_iter().next().ok_or_else(|| invalid("no task configured"))?;
    let variation = cfg.variation.unwrap_or(spec.colors[0]);
    let world = cfg.world()?;
    let ep = ToyEpisode::new(&world, &spec, variation, cfg.seed, policy.config().rotation_bins()?)?;
    let goal = cfg.goal.clone().unwrap_or_else(|| spec.goal(variation));
    let voxels = fuse(&ep.observe(), &world.bounds)?;
    let lang = enc.encode(&goal)?;
    let q = policy.forward(&PolicyInput { voxels: &voxels, proprio: ep.proprio(), lang: &lang })?;
    let action = select_best_action(&q)?;
    let doc = json!({
        "task": spec.kind,
        "variation": color_name(variation),
        "seed": cfg.seed,
        "goal": goal,
        "action": action_json(&action, cfg)?,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(out.join(PREDICTION_FILE), &text)?;
    Ok(text + "\n")
}

fn softmax3(q: &Array3<f64>) -> Array3<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = q.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Max over each axis of the softmaxed translation Q-values.
pub fn max_projections(q_trans: &Array3<f64>) -> [Array2<f64>; 3] {
    let p = softmax3(q_trans);
    [0, 1, 2].map(|a| p.map_axis(Axis(a), |lane| lane.iter().copied().fold(0.0, f64::max)))
}

fn write_heatmap(m: &Array2<f64>, path: &Path) -> Result<()> {
    let max = m.iter().copied().fold(0.0, f64::max);
    let (h, w) = m.dim();
    let img = image::GrayImage::from_fn(w as u32 * HEATMAP_SCALE, h as u32 * HEATMAP_SCALE, |x, y| {
        let v = m[[(y / HEATMAP_SCALE) as usize, (x / HEATMAP_SCALE) as usize]];
        image::Luma([(255.0 * v / max).round() as u8])
    });
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Replace the first palette color word in `goal` with the next color of
/// the variation set (or palette) that differs from it.
pub fn swap_goal_color(goal: &str, colors: &[usize]) -> Option<String> {
    let words: Vec<&str> = goal.split(' ').collect();
    let (pos, current) = words.iter().enumerate().find_map(|(i, w)| color_index(w).ok().map(|c| (i, c)))?;
    let pool: Vec<usize> = if colors.len() > 1 { colors.to_vec() } else { (0..PALETTE.len()).collect() };
    let at = pool.iter().position(|c| *c == current).unwrap_or(0);
    let replacement = (1..=pool.len()).map(|k| pool[(at + k) % pool.len()]).find(|c| *c != current)?;
    let mut out: Vec<&str> = words;
    out[pos] = color_name(replacement);
    Some(out.join(" "))
}

fn predict_tuple(policy: &Policy<f32>, enc: &dyn LanguageEncoder, voxels: &peract_core::voxelizer::VoxelGrid, proprio: [f32; 4], goal: &str) -> Result<QPrediction> {
    let lang = enc.encode(goal)?;
    policy.forward(&PolicyInput { voxels, proprio, lang: &lang })
}

/// Heatmaps and an argmax-versus-label summary for one dataset tuple.
pub fn inspect_cmd(cfg: &RunConfig, out: &Path) -> Result<String> {
    let (policy, enc) = load_policy(cfg)?;
    let dataset = load_tuples(cfg)?;
    let tuple = dataset
        .iter()
        .nth(cfg.tuple)
        .ok_or_else(|| invalid(format!("tuple {} does not exist; the dataset has {}", cfg.tuple, dataset.num_tuples())))?
        .clone();
    prepare_out(out)?;
    write_snapshot(cfg, out)?;
    let voxels = tuple.voxel_obs();
    let labels = peract_core::action_codec::encode_labels(&tuple.target, policy.config().grid(), &policy.config().rotation_bins()?)?;

    let mut goal = cfg.goal.clone().unwrap_or_else(|| tuple.language_goal.clone());
    if cfg.swap_goal && cfg.goal.is_none() {
        goal = swap_goal_color(&tuple.language_goal, &cfg.colors)
            .ok_or_else(|| invalid(format!("goal '{}' names no palette color to swap", tuple.language_goal)))?;
    }
    let q = predict_tuple(&policy, &enc, &voxels, tuple.proprio, &goal)?;
    let action = select_best_action(&q)?;
    let (loss, _) = loss_and_grad(&q, &labels)?;
    for (m, name) in max_projections(&q.q_trans).iter().zip(HEATMAP_FILES) {
        write_heatmap(m, &out.join(name))?;
    }
    let mut s = String::new();
    let _ = writeln!(s, "tuple {} task {} frame {}", cfg.tuple, tuple.task_id, tuple.frame_index);
    let _ = writeln!(s, "goal: {goal}");
    if goal != tuple.language_goal {
        let _ = writeln!(s, "original goal: {}", tuple.language_goal);
        let orig = select_best_action(&predict_tuple(&policy, &enc, &voxels, tuple.proprio, &tuple.language_goal)?)?;
        let _ = writeln!(s, "original argmax trans {:?}", orig.trans_index);
        let _ = writeln!(s, "argmax changed: {}", orig.trans_index != action.trans_index);
    }
    let _ = writeln!(
        s,
        "argmax trans {:?} rot {:?} open {} collide {}",
        action.trans_index, action.rot_indices, action.open, action.collide
    );
    let t = &tuple.target;
    let _ = writeln!(s, "label  trans {:?} rot {:?} open {} collide {}", t.trans_index, t.rot_indices, t.open, t.collide);
    let _ = writeln!(s, "match: {}", action == tuple.target);
    let _ = writeln!(
        s,
        "loss total {:.6} trans {:.6} rot {:.6} open {:.6} collide {:.6}",
        loss.total, loss.trans_term, loss.rot_term, loss.open_term, loss.collide_term
    );
    let peak = max_projections(&q.q_trans)[2].iter().copied().fold(0.0, f64::max);
    let _ = writeln!(s, "peak translation probability {peak:.6}");
    fs::write(out.join(INSPECT_SUMMARY_FILE), &s)?;
    Ok(s)
}
