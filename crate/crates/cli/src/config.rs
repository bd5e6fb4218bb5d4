//! Plain-text `key = value` run configuration.
//!
//! Precedence is defaults, then the config file, then command-line flags.
//! Unknown keys and unparsable values are collected and reported together.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use peract_core::demo_pipeline::DEFAULT_VEL_EPSILON;
use peract_core::policy::PolicyConfig;
use peract_core::toyworld::{color_index, color_name, GoalMode, TaskKind, TaskSpec, ToyWorldConfig, PALETTE};
use peract_core::trainer::{OptimizerKind, TrainConfig};
use peract_core::{Error, Result};

/// Which agent `eval` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Policy,
    Expert,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub tasks: Vec<TaskKind>,
    /// Palette indices forming every task's variation set.
    pub colors: Vec<usize>,
    pub demos_per_task: usize,
    pub episodes: usize,
    pub max_steps: usize,
    pub image_size: usize,
    pub num_cameras: usize,
    pub vel_epsilon: f64,
    pub lang_seed: u64,
    pub goal_mode: GoalMode,
    pub agent: AgentKind,
    pub resume: bool,
    /// Index into the dataset's tuples, in task order.
    pub tuple: usize,
    /// Goal text that replaces the tuple's own in `inspect`.
    pub goal: Option<String>,
    pub swap_goal: bool,
    /// Scene color for `predict`.
    pub variation: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::toy(),
            train: TrainConfig::default(),
            seed: 0,
            dataset: None,
            checkpoint: None,
            tasks: TaskKind::ALL.to_vec(),
            colors: (0..PALETTE.len()).collect(),
            demos_per_task: 10,
            episodes: 25,
            max_steps: 25,
            image_size: 80,
            num_cameras: 2,
            vel_epsilon: DEFAULT_VEL_EPSILON,
            lang_seed: 0,
            goal_mode: GoalMode::Correct,
            agent: AgentKind::Policy,
            resume: false,
            tuple: 0,
            goal: None,
            swap_goal: false,
            variation: None,
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "seed",
    "dataset",
    "checkpoint",
    "tasks",
    "colors",
    "demos_per_task",
    "episodes",
    "max_steps",
    "image_size",
    "num_cameras",
    "vel_epsilon",
    "lang_seed",
    "goal_mode",
    "agent",
    "resume",
    "tuple",
    "goal",
    "swap_goal",
    "variation",
    "grid_size",
    "patch_size",
    "num_latents",
    "latent_dim",
    "num_self_attn_layers",
    "embed_dim",
    "rotation_bin_deg",
    "num_lang_tokens",
    "lang_feature_dim",
    "num_attention_heads",
    "voxel_feature_dim",
    "ff_mult",
    "batch_size",
    "total_iterations",
    "learning_rate",
    "optimizer",
    "aug_trans_range",
    "aug_yaw_range_deg",
    "checkpoint_interval",
    "weight_decay",
    "grad_clip_norm",
    "warmup_iterations",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("'{v}' is not a valid number"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("'{v}' is not a boolean")),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Set one key. The error names the problem without the key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let p = &mut self.policy;
        let t = &mut self.train;
        match key {
            "seed" => {
                self.seed = num(v)?;
                t.seed = self.seed;
            }
            "dataset" => self.dataset = opt_path(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "tasks" => self.tasks = list(v).map(|s| s.parse::<TaskKind>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?,
            "colors" => {
                self.colors = if v == "all" {
                    (0..PALETTE.len()).collect()
                } else {
                    list(v).map(|s| color_index(s).map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?
                }
            }
            "demos_per_task" => self.demos_per_task = num(v)?,
            "episodes" => self.episodes = num(v)?,
            "max_steps" => self.max_steps = num(v)?,
            "image_size" => self.image_size = num(v)?,
            "num_cameras" => self.num_cameras = num(v)?,
            "vel_epsilon" => self.vel_epsilon = num(v)?,
            "lang_seed" => self.lang_seed = num(v)?,
            "goal_mode" => {
                self.goal_mode = match v {
                    "correct" => GoalMode::Correct,
                    "swapped" => GoalMode::Swapped,
                    _ => return Err(format!("'{v}' is not correct or swapped")),
                }
            }
            "agent" => {
                self.agent = match v {
                    "policy" => AgentKind::Policy,
                    "expert" => AgentKind::Expert,
                    "random" => AgentKind::Random,
                    _ => return Err(format!("'{v}' is not policy, expert or random")),
                }
            }
            "resume" => self.resume = boolean(v)?,
            "tuple" => self.tuple = num(v)?,
            "goal" => self.goal = (!v.is_empty()).then(|| v.to_string()),
            "swap_goal" => self.swap_goal = boolean(v)?,
            "variation" => {
                self.variation = if v.is_empty() { None } else { Some(color_index(v).map_err(|e| e.to_string())?) }
            }
            "grid_size" => p.grid_size = num(v)?,
            "patch_size" => p.patch_size = num(v)?,
            "num_latents" => p.num_latents = num(v)?,
            "latent_dim" => p.latent_dim = num(v)?,
            "num_self_attn_layers" => p.num_self_attn_layers = num(v)?,
            "embed_dim" => p.embed_dim = num(v)?,
            "rotation_bin_deg" => p.rotation_bin_deg = num(v)?,
            "num_lang_tokens" => p.num_lang_tokens = num(v)?,
            "lang_feature_dim" => p.lang_feature_dim = num(v)?,
            "num_attention_heads" => p.num_attention_heads = num(v)?,
            "voxel_feature_dim" => p.voxel_feature_dim = num(v)?,
            "ff_mult" => p.ff_mult = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "total_iterations" => t.total_iterations = num(v)?,
            "learning_rate" => t.learning_rate = num(v)?,
            "optimizer" => t.optimizer_kind = v.parse::<OptimizerKind>().map_err(|e| e.to_string())?,
            "aug_trans_range" => {
                let vals: Vec<f64> = list(v).map(num).collect::<std::result::Result<_, _>>()?;
                t.aug_trans_range = match vals[..] {
                    [a] => [a; 3],
                    [a, b, c] => [a, b, c],
                    _ => return Err("expected one value or three comma-separated values".into()),
                };
            }
            "aug_yaw_range_deg" => t.aug_yaw_range_deg = num(v)?,
            "checkpoint_interval" => t.checkpoint_interval = num(v)?,
            "weight_decay" => t.weight_decay = num(v)?,
            "grad_clip_norm" => t.grad_clip_norm = num(v)?,
            "warmup_iterations" => t.warmup_iterations = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let (p, t) = (&self.policy, &self.train);
        let path = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "seed" => self.seed.to_string(),
            "dataset" => path(&self.dataset),
            "checkpoint" => path(&self.checkpoint),
            "tasks" => join(&self.tasks, |k| k.name().to_string()),
            "colors" => join(&self.colors, |c| color_name(*c).to_string()),
            "demos_per_task" => self.demos_per_task.to_string(),
            "episodes" => self.episodes.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "image_size" => self.image_size.to_string(),
            "num_cameras" => self.num_cameras.to_string(),
            "vel_epsilon" => self.vel_epsilon.to_string(),
            "lang_seed" => self.lang_seed.to_string(),
            "goal_mode" => match self.goal_mode {
                GoalMode::Correct => "correct".into(),
                GoalMode::Swapped => "swapped".into(),
            },
            "agent" => match self.agent {
                AgentKind::Policy => "policy".into(),
                AgentKind::Expert => "expert".into(),
                AgentKind::Random => "random".into(),
            },
            "resume" => self.resume.to_string(),
            "tuple" => self.tuple.to_string(),
            "goal" => self.goal.clone().unwrap_or_default(),
            "swap_goal" => self.swap_goal.to_string(),
            "variation" => self.variation.map(|c| color_name(c).to_string()).unwrap_or_default(),
            "grid_size" => p.grid_size.to_string(),
            "patch_size" => p.patch_size.to_string(),
            "num_latents" => p.num_latents.to_string(),
            "latent_dim" => p.latent_dim.to_string(),
            "num_self_attn_layers" => p.num_self_attn_layers.to_string(),
            "embed_dim" => p.embed_dim.to_string(),
            "rotation_bin_deg" => p.rotation_bin_deg.to_string(),
            "num_lang_tokens" => p.num_lang_tokens.to_string(),
            "lang_feature_dim" => p.lang_feature_dim.to_string(),
            "num_attention_heads" => p.num_attention_heads.to_string(),
            "voxel_feature_dim" => p.voxel_feature_dim.to_string(),
            "ff_mult" => p.ff_mult.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "total_iterations" => t.total_iterations.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "optimizer" => match t.optimizer_kind {
                OptimizerKind::Lamb => "lamb".into(),
                OptimizerKind::Adam => "adam".into(),
            },
            "aug_trans_range" => join(&t.aug_trans_range, f64::to_string),
            "aug_yaw_range_deg" => t.aug_yaw_range_deg.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "grad_clip_norm" => t.grad_clip_norm.to_string(),
            "warmup_iterations" => t.warmup_iterations.to_string(),
            other => unreachable!("key {other} missing from get"),
        }
    }

    /// Build from config-file text and `key=value` overrides; every bad
    /// line, key or value is reported at once.
    pub fn resolve(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errs = Vec::new();
        if let Some(text) = file_text {
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) => {
                        if let Err(e) = cfg.set(k.trim(), v) {
                            errs.push(format!("line {}: {}: {e}", n + 1, k.trim()));
                        }
                    }
                    None => errs.push(format!("line {}: expected key = value", n + 1)),
                }
            }
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k, v) {
                errs.push(format!("flag {k}: {e}"));
            }
        }
        if let Err(Error::Config(more)) = cfg.validate() {
            errs.extend(more);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = path.map(fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for r in [self.policy.validate(), self.train.validate(), self.world().and_then(|w| w.validate())] {
            match r {
                Err(Error::Config(e)) => errs.extend(e),
                Err(e) => errs.push(e.to_string()),
                Ok(()) => {}
            }
        }
        if self.colors.is_empty() {
            errs.push("colors must name at least one palette color".into());
        }
        if self.max_steps == 0 {
            errs.push("max_steps must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn world(&self) -> Result<ToyWorldConfig> {
        let base = ToyWorldConfig::with_grid(self.policy.grid_size)?;
        Ok(ToyWorldConfig { image_size: self.image_size, num_cameras: self.num_cameras, ..base })
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        self.tasks.iter().map(|k| TaskSpec::with_colors(*k, self.colors.clone())).collect()
    }

    /// Every key with its resolved value; loads back to the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }
}
