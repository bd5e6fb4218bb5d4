//! Supervised training: augmentation, task-uniform batches, the four-head
//! cross-entropy objective, optimization and checkpointing.

mod augment;
mod loss;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_codec::RotationBins;
use crate::demo_pipeline::{extract_keyframes, make_training_tuples, CodecConfig, DemoEpisode, TrainingTuple};
use crate::error::{invalid, Error, Result};
use crate::policy::{Checkpoint, LanguageEncoder, Policy, PolicyConfig, PolicyInput, Scalar};
use crate::policy::tape::Tape;

pub use augment::{augment, perturb, AugmentRanges, Perturbation, MAX_AUGMENT_ATTEMPTS};
pub use loss::{loss, loss_and_grad, LossBreakdown};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iterations: u64,
    pub learning_rate: f64,
    pub optimizer_kind: OptimizerKind,
    /// Half-width of the translation perturbation per axis (m).
    pub aug_trans_range: [f64; 3],
    pub aug_yaw_range_deg: f64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub grad_clip_norm: f64,
    pub warmup_iterations: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_iterations: 600_000,
            learning_rate: 1e-3,
            optimizer_kind: OptimizerKind::Lamb,
            aug_trans_range: [0.125; 3],
            aug_yaw_range_deg: 45.0,
            checkpoint_interval: 10_000,
            seed: 0,
            weight_decay: 0.0,
            grad_clip_norm: 0.0,
            warmup_iterations: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            errs.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.aug_trans_range.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            errs.push(format!("aug_trans_range {:?} must be non-negative", self.aug_trans_range));
        }
        if !(self.aug_yaw_range_deg.is_finite() && self.aug_yaw_range_deg >= 0.0) {
            errs.push(format!("aug_yaw_range_deg {} must be non-negative", self.aug_yaw_range_deg));
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("grad_clip_norm", self.grad_clip_norm)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{name} {v} must be non-negative"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn ranges(&self) -> AugmentRanges {
        AugmentRanges { trans: self.aug_trans_range, yaw_deg: self.aug_yaw_range_deg }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer_kind,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip_norm,
            warmup_steps: self.warmup_iterations,
            ..OptimizerConfig::default()
        }
    }
}

/// Training tuples grouped by task, tasks in sorted id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskDataset {
    tasks: Vec<(String, Vec<TrainingTuple>)>,
}

impl TaskDataset {
    pub fn from_tuples(tuples: impl IntoIterator<Item = TrainingTuple>) -> Self {
        let mut map = std::collections::BTreeMap::<String, Vec<TrainingTuple>>::new();
        for t in tuples {
            map.entry(t.task_id.clone()).or_default().push(t);
        }
        Self { tasks: map.into_iter().collect() }
    }

    /// Keyframes and tuples for every episode.
    pub fn from_episodes(episodes: &[DemoEpisode], codec: &CodecConfig, vel_epsilon: f64) -> Result<Self> {
        let mut all = Vec::new();
        for ep in episodes {
            let keys = extract_keyframes(ep, vel_epsilon)?;
            all.extend(make_training_tuples(ep, &keys, codec)?);
        }
        Ok(Self::from_tuples(all))
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_tuples(&self) -> usize {
        self.tasks.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_tuples() == 0
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|(id, _)| id.as_str())
    }

    pub fn task(&self, index: usize) -> &[TrainingTuple] {
        &self.tasks[index].1
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainingTuple> {
        self.tasks.iter().flat_map(|(_, t)| t.iter())
    }
}

/// `(task, tuple)` index pairs: task uniformly with replacement, then a
/// uniform tuple within it.
pub fn sample_indices(dataset: &TaskDataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if dataset.tasks.is_empty() || dataset.tasks.iter().any(|(_, t)| t.is_empty()) {
        return Err(invalid("cannot sample from an empty dataset"));
    }
    let tasks: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..dataset.tasks.len())).collect();
    Ok(tasks.into_iter().map(|k| (k, rng.random_range(0..dataset.tasks[k].1.len()))).collect())
}

pub fn sample_batch<'a>(
    dataset: &'a TaskDataset,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<&'a TrainingTuple>> {
    Ok(sample_indices(dataset, batch_size, rng)?.into_iter().map(|(k, i)| &dataset.tasks[k].1[i]).collect())
}

/// Mean loss over `batch` and its parameter gradients.
pub fn batch_gradients<F: Scalar>(
    policy: &Policy<F>,
    batch: &[TrainingTuple],
    encoder: &dyn LanguageEncoder,
) -> Result<(LossBreakdown, Vec<Array2<F>>)> {
    if batch.is_empty() {
        return Err(invalid("batch is empty"));
    }
    let w = 1.0 / batch.len() as f64;
    let mut total = LossBreakdown::default();
    let mut grads: Vec<Array2<F>> = policy.params().values().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
    for tuple in batch {
        let voxels = tuple.voxel_obs();
        let lang = encoder.encode(&tuple.language_goal)?;
        let input = PolicyInput { voxels: &voxels, proprio: tuple.proprio, lang: &lang };
        let mut tape = Tape::new(true);
        let trace = policy.forward_trace(&mut tape, &input)?;
        let q = policy.q_prediction(&tape, &trace);
        let (l, mut dq) = loss::loss_and_grad_for(&q, &tuple.target)?;
        total.add_scaled(&l, w);
        dq.q_trans.mapv_inplace(|v| v * w);
        dq.q_rot.mapv_inplace(|v| v * w);
        dq.q_open = dq.q_open.map(|v| v * w);
        dq.q_collide = dq.q_collide.map(|v| v * w);
        for (acc, g) in grads.iter_mut().zip(policy.backward(&tape, &trace, &dq)) {
            *acc += &g;
        }
    }
    Ok((total, grads))
}

/// One optimization step on a prepared batch.
pub fn train_step<F: Scalar>(
    policy: &mut Policy<F>,
    batch: &[TrainingTuple],
    optimizer: &mut Optimizer<F>,
    encoder: &dyn LanguageEncoder,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(policy, batch, encoder)?;
    if let Some(head) = loss.first_non_finite() {
        return Err(Error::NonFiniteLoss { head });
    }
    optimizer.apply(policy.params_mut().values_mut(), grads)?;
    Ok(loss)
}

/// Generator for iteration `iteration`: independent of how many iterations
/// ran before, so resumed runs draw the same batches.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Policy, optimizer state and iteration counter of a training run.
pub struct Trainer<'a> {
    pub policy: Policy<f32>,
    pub optimizer: Optimizer<f32>,
    pub config: TrainConfig,
    pub iteration: u64,
    bins: RotationBins,
    encoder: &'a dyn LanguageEncoder,
}

const AUX_STEP: &str = "optimizer/step";

impl<'a> Trainer<'a> {
    pub fn new(policy_config: PolicyConfig, config: TrainConfig, encoder: &'a dyn LanguageEncoder) -> Result<Self> {
        config.validate()?;
        let policy = Policy::new(policy_config, config.seed)?;
        Self::from_policy(policy, config, encoder)
    }

    pub fn from_policy(policy: Policy<f32>, config: TrainConfig, encoder: &'a dyn LanguageEncoder) -> Result<Self> {
        config.validate()?;
        let pc = policy.config();
        if encoder.num_tokens() != pc.num_lang_tokens || encoder.feature_dim() != pc.lang_feature_dim {
            return Err(invalid(format!(
                "language encoder produces {}x{} but the policy expects {}x{}",
                encoder.num_tokens(),
                encoder.feature_dim(),
                pc.num_lang_tokens,
                pc.lang_feature_dim
            )));
        }
        let bins = pc.rotation_bins()?;
        let optimizer = Optimizer::new(config.optimizer(), policy.params().values());
        Ok(Self { policy, optimizer, config, iteration: 0, bins, encoder })
    }

    /// Restore policy, optimizer moments and iteration from a checkpoint.
    pub fn resume(ck: &Checkpoint, config: TrainConfig, encoder: &'a dyn LanguageEncoder) -> Result<Self> {
        let policy = ck.policy::<f32>(None)?;
        let mut t = Self::from_policy(policy, config, encoder)?;
        let step = ck.aux(AUX_STEP).ok_or_else(|| invalid("checkpoint carries no optimizer state"))?;
        t.optimizer.step = step[[0, 0]] as u64;
        t.iteration = ck.metadata.get("iteration").and_then(|v| v.as_u64()).unwrap_or(t.optimizer.step);
        let names = t.policy.params().names().to_vec();
        for (i, name) in names.iter().enumerate() {
            for (kind, dst) in [("m", &mut t.optimizer.m[i]), ("v", &mut t.optimizer.v[i])] {
                let a = ck
                    .aux(&format!("optimizer/{kind}/{name}"))
                    .ok_or_else(|| invalid(format!("checkpoint lacks optimizer moment {kind} for {name}")))?;
                if a.raw_dim() != dst.raw_dim() {
                    return Err(invalid(format!("optimizer moment {kind} for {name} has the wrong shape")));
                }
                *dst = a.mapv(|v| v as f32);
            }
        }
        Ok(t)
    }

    /// Run iteration `self.iteration + 1`.
    pub fn step(&mut self, dataset: &TaskDataset) -> Result<LossBreakdown> {
        let it = self.iteration + 1;
        let mut rng = iteration_rng(self.config.seed, it);
        let ranges = self.config.ranges();
        let batch: Vec<TrainingTuple> = sample_batch(dataset, self.config.batch_size, &mut rng)?
            .into_iter()
            .map(|t| augment(t, &ranges, &self.bins, &mut rng).0)
            .collect();
        let loss = train_step(&mut self.policy, &batch, &mut self.optimizer, self.encoder)?;
        self.iteration = it;
        Ok(loss)
    }

    pub fn checkpoint(&self, extra: &serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "iteration": self.iteration,
            "train_config": self.config,
            "extra": extra,
        });
        let mut ck = Checkpoint::from_policy(&self.policy, meta);
        ck.push_aux(AUX_STEP, Array2::from_elem((1, 1), self.optimizer.step as f64));
        for (i, name) in self.policy.params().names().iter().enumerate() {
            ck.push_aux(&format!("optimizer/m/{name}"), self.optimizer.m[i].mapv(f64::from));
            ck.push_aux(&format!("optimizer/v/{name}"), self.optimizer.v[i].mapv(f64::from));
        }
        ck
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub wall_secs: f64,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{} {:e} {:e} {:e} {:e} {:e} {:.3}",
            self.iteration, l.total, l.trans_term, l.rot_term, l.open_term, l.collide_term, self.wall_secs
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(Error::Corrupt(format!("loss log line has {} fields: {line}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Corrupt(format!("bad number '{s}' in loss log")));
        Ok(Self {
            iteration: f[0].parse().map_err(|_| Error::Corrupt(format!("bad iteration '{}'", f[0])))?,
            loss: LossBreakdown {
                total: num(f[1])?,
                trans_term: num(f[2])?,
                rot_term: num(f[3])?,
                open_term: num(f[4])?,
                collide_term: num(f[5])?,
            },
            wall_secs: num(f[6])?,
        })
    }
}

pub const LOSS_LOG_HEADER: &str = "# iteration total trans rot open collide wall_secs";
pub const LOSS_LOG_FILE: &str = "loss.log";

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{iteration:08}.ckpt"))
}

/// Most recent checkpoint in `out_dir`, by iteration number.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(u64, PathBuf)> = None;
    if !out_dir.exists() {
        return Ok(None);
    }
    for entry in fs::read_dir(out_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(num) = name.strip_prefix("checkpoint_").and_then(|n| n.strip_suffix(".ckpt")) else { continue };
        if let Ok(it) = num.parse::<u64>() {
            if best.as_ref().is_none_or(|(b, _)| it > *b) {
                best = Some((it, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        out.push(LossRecord::parse(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
    /// Stored under `extra` in every checkpoint's metadata.
    pub metadata: serde_json::Value,
    /// Echo each loss record to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: Vec<LossRecord>,
}

/// Train until `config.total_iterations`, logging every iteration to
/// `out_dir/loss.log` and checkpointing every `checkpoint_interval`.
///
/// A resumed run truncates the log to the checkpoint's iteration and then
/// reproduces the uninterrupted trajectory.
pub fn train(
    dataset: &TaskDataset,
    policy_config: &PolicyConfig,
    config: &TrainConfig,
    encoder: &dyn LanguageEncoder,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<TrainOutcome> {
    policy_config.validate()?;
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    if let Some(t) = dataset.iter().find(|t| t.bounds.grid_size != policy_config.grid()) {
        return Err(invalid(format!(
            "dataset grid {:?} does not match the policy grid {:?}",
            t.bounds.grid_size,
            policy_config.grid()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(LOSS_LOG_FILE);
    let mut trainer = match &options.resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if &ck.policy_config != policy_config {
                return Err(invalid("checkpoint policy config differs from the requested one"));
            }
            Trainer::resume(&ck, config.clone(), encoder)?
        }
        None => Trainer::new(policy_config.clone(), config.clone(), encoder)?,
    };
    let mut log: Vec<LossRecord> = if options.resume.is_some() && log_path.exists() {
        read_loss_log(&log_path)?.into_iter().filter(|r| r.iteration <= trainer.iteration).collect()
    } else {
        Vec::new()
    };
    {
        let mut w = BufWriter::new(File::create(&log_path)?);
        writeln!(w, "{LOSS_LOG_HEADER}")?;
        for r in &log {
            writeln!(w, "{}", r.to_line())?;
        }
        w.flush()?;
    }
    let mut log_file = BufWriter::new(OpenOptions::new().append(true).open(&log_path)?);
    let offset = log.last().map_or(0.0, |r| r.wall_secs);
    let start = Instant::now();
    let mut last_ckpt = None;
    while trainer.iteration < config.total_iterations {
        let loss = trainer.step(dataset)?;
        let rec = LossRecord { iteration: trainer.iteration, loss, wall_secs: offset + start.elapsed().as_secs_f64() };
        writeln!(log_file, "{}", rec.to_line())?;
        if options.verbose {
            eprintln!("{}", rec.to_line());
        }
        log.push(rec);
        let it = trainer.iteration;
        if config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 {
            log_file.flush()?;
            let path = checkpoint_path(out_dir, it);
            trainer.checkpoint(&options.metadata).write(&path)?;
            last_ckpt = Some(path);
        }
    }
    log_file.flush()?;
    let final_path = checkpoint_path(out_dir, trainer.iteration);
    if last_ckpt.as_ref() != Some(&final_path) {
        trainer.checkpoint(&options.metadata).write(&final_path)?;
    }
    Ok(TrainOutcome { final_checkpoint: final_path, log })
}
