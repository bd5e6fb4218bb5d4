//! Closed-loop episodes, agents and the evaluation report.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::render_views;
use super::scene::SceneState;
use super::tasks::{expert_waypoints, mix_seed, other_color, reset, success, TaskKind, TaskSpec};
use super::{color_name, ToyWorldConfig};
use crate::action_codec::{discretize, select_best_action, undiscretize, DiscreteAction, RotationBins};
use crate::demo_pipeline::FINGER_OPEN_POSITION;
use crate::error::{invalid, Result};
use crate::policy::{LanguageEncoder, LanguageEncoding, Policy, PolicyInput};
use crate::voxelizer::{fuse, CameraView, WorkspaceBounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Success,
    StepLimit,
    /// The agent failed to produce a decodable action.
    InvalidAction,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Self::Success => "success",
            Self::StepLimit => "step_limit",
            Self::InvalidAction => "invalid_action",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// 100 on success, else 0.
    pub score: f64,
    pub steps_taken: usize,
    pub termination: Termination,
}

/// What an agent sees at each step. `state` is privileged and only meant for
/// scripted agents.
pub struct AgentObservation<'a> {
    pub views: &'a [CameraView],
    pub proprio: [f32; 4],
    pub goal: &'a str,
    pub step: usize,
    pub task: TaskKind,
    pub state: &'a SceneState,
    /// True goal color, for scripted agents.
    pub variation: usize,
}

pub trait Agent {
    /// Called before the first step of each episode.
    fn reset(&mut self) {}
    fn act(&mut self, obs: &AgentObservation) -> Result<DiscreteAction>;
}

/// Replays the discretized expert waypoints planned from the initial scene.
pub struct ExpertReplayAgent {
    config: ToyWorldConfig,
    bins: RotationBins,
    plan: Vec<DiscreteAction>,
}

impl ExpertReplayAgent {
    pub fn new(config: ToyWorldConfig, bins: RotationBins) -> Self {
        Self { config, bins, plan: Vec::new() }
    }
}

impl Agent for ExpertReplayAgent {
    fn reset(&mut self) {
        self.plan.clear();
    }

    fn act(&mut self, obs: &AgentObservation) -> Result<DiscreteAction> {
        if obs.step == 0 || self.plan.is_empty() {
            self.plan = expert_waypoints(obs.state, obs.task, obs.variation)?
                .iter()
                .map(|w| discretize(w, &self.config.bounds, &self.bins))
                .collect::<Result<_>>()?;
        }
        let i = obs.step.min(self.plan.len() - 1);
        Ok(self.plan[i])
    }
}

/// Uniform over voxels, rotation bins (canonical pitch only) and both flags.
pub struct RandomAgent {
    rng: ChaCha8Rng,
    grid: [usize; 3],
    bins: RotationBins,
}

impl RandomAgent {
    pub fn new(grid: [usize; 3], bins: RotationBins, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), grid, bins }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, _: &AgentObservation) -> Result<DiscreteAction> {
        let n = self.bins.count();
        let pitch: Vec<usize> = (0..n).filter(|b| self.bins.pitch_bin_valid(*b)).collect();
        let r = &mut self.rng;
        Ok(DiscreteAction {
            trans_index: self.grid.map(|g| r.random_range(0..g)),
            rot_indices: [r.random_range(0..n), pitch[r.random_range(0..pitch.len())], r.random_range(0..n)],
            open: r.random(),
            collide: r.random(),
        })
    }
}

/// Greedy argmax of a trained policy's Q-functions.
pub struct PolicyAgent<'a> {
    policy: &'a Policy<f32>,
    encoder: &'a dyn LanguageEncoder,
    bounds: WorkspaceBounds,
    cache: HashMap<String, LanguageEncoding>,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(policy: &'a Policy<f32>, encoder: &'a dyn LanguageEncoder, bounds: WorkspaceBounds) -> Self {
        Self { policy, encoder, bounds, cache: HashMap::new() }
    }
}

impl Agent for PolicyAgent<'_> {
    fn act(&mut self, obs: &AgentObservation) -> Result<DiscreteAction> {
        if !self.cache.contains_key(obs.goal) {
            self.cache.insert(obs.goal.to_string(), self.encoder.encode(obs.goal)?);
        }
        let lang = &self.cache[obs.goal];
        let voxels = fuse(obs.views, &self.bounds)?;
        let q = self.policy.forward(&PolicyInput { voxels: &voxels, proprio: obs.proprio, lang })?;
        select_best_action(&q)
    }
}

/// One closed-loop episode in progress.
#[derive(Debug, Clone)]
pub struct ToyEpisode {
    pub config: ToyWorldConfig,
    pub task: TaskKind,
    pub variation: usize,
    pub state: SceneState,
    pub steps: usize,
    bins: RotationBins,
}

impl ToyEpisode {
    pub fn new(config: &ToyWorldConfig, spec: &TaskSpec, variation: usize, seed: u64, bins: RotationBins) -> Result<Self> {
        let state = reset(config, spec, variation, seed)?;
        Ok(Self { config: config.clone(), task: spec.kind, variation, state, steps: 0, bins })
    }

    pub fn observe(&self) -> Vec<CameraView> {
        render_views(&self.state, &self.config)
    }

    /// Gripper state and task progress: step count over the expert's
    /// waypoint count, which matches the demo timestep at each keyframe.
    pub fn proprio(&self) -> [f32; 4] {
        let open = self.state.gripper.open;
        let f = if open { FINGER_OPEN_POSITION } else { 0.0 };
        let progress = (self.steps as f64 / self.task.num_waypoints() as f64).min(1.0);
        [if open { 1.0 } else { 0.0 }, f, f, progress as f32]
    }

    pub fn is_success(&self) -> bool {
        success(&self.state, self.task, self.variation)
    }

    /// Execute one action. Returns `Some` when the episode has ended.
    pub fn step(&mut self, action: &DiscreteAction) -> Option<Termination> {
        self.steps += 1;
        if action.validate(self.config.bounds.grid_size, &self.bins).is_err() {
            return Some(Termination::InvalidAction);
        }
        let pose = undiscretize(action, &self.config.bounds, &self.bins);
        self.state.apply(&pose, &self.config);
        self.is_success().then_some(Termination::Success)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    Correct,
    /// The agent is told the color of another object of the target's shape
    /// while success is still judged against the true goal.
    Swapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes_per_task: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub goal_mode: GoalMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { episodes_per_task: 25, max_steps: 25, seed: 0, goal_mode: GoalMode::Correct }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: TaskKind,
    pub variation: String,
    pub seed: u64,
    pub goal: String,
    pub result: EpisodeResult,
}

/// One table row: a task overall (`variation == "all"`) or one variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: TaskKind,
    pub variation: String,
    pub episodes: usize,
    pub mean_score: f64,
    pub terminations: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub goal_mode: GoalMode,
    pub rows: Vec<EvalRow>,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn task_mean(&self, task: TaskKind) -> Option<f64> {
        self.rows.iter().find(|r| r.task == task && r.variation == "all").map(|r| r.mean_score)
    }

    /// Mean over all episodes.
    pub fn mean_score(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.result.score).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn row(task: TaskKind, variation: String, records: &[&EpisodeRecord]) -> EvalRow {
    let mut terminations = BTreeMap::new();
    for r in records {
        *terminations.entry(r.result.termination.name().to_string()).or_insert(0) += 1;
    }
    let mean_score = records.iter().map(|r| r.result.score).sum::<f64>() / records.len().max(1) as f64;
    EvalRow { task, variation, episodes: records.len(), mean_score, terminations }
}

fn run_episode(
    config: &ToyWorldConfig,
    spec: &TaskSpec,
    agent: &mut dyn Agent,
    bins: RotationBins,
    variation: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<(String, EpisodeResult)> {
    let mut ep = ToyEpisode::new(config, spec, variation, seed, bins)?;
    let goal_color = match opts.goal_mode {
        GoalMode::Correct => variation,
        GoalMode::Swapped => other_color(&ep.state, spec.kind, variation)
            .ok_or_else(|| invalid("scene has no second object to swap the goal to"))?,
    };
    let goal = spec.kind.goal(goal_color);
    agent.reset();
    let mut termination = Termination::StepLimit;
    while ep.steps < opts.max_steps {
        let views = ep.observe();
        let obs = AgentObservation {
            views: &views,
            proprio: ep.proprio(),
            goal: &goal,
            step: ep.steps,
            task: spec.kind,
            state: &ep.state,
            variation,
        };
        let outcome = match agent.act(&obs) {
            Ok(a) => ep.step(&a),
            Err(_) => {
                ep.steps += 1;
                Some(Termination::InvalidAction)
            }
        };
        if let Some(t) = outcome {
            termination = t;
            break;
        }
    }
    let score = if termination == Termination::Success { 100.0 } else { 0.0 };
    Ok((goal, EpisodeResult { score, steps_taken: ep.steps, termination }))
}

/// Run `episodes_per_task` seeded episodes per task, each with a variation
/// drawn uniformly from the task's color set.
pub fn evaluate(
    config: &ToyWorldConfig,
    tasks: &[TaskSpec],
    agent: &mut dyn Agent,
    bins: RotationBins,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    config.validate()?;
    if opts.max_steps == 0 {
        return Err(invalid("max_steps must be positive"));
    }
    let mut episodes = Vec::new();
    let mut rows = Vec::new();
    for spec in tasks {
        spec.validate()?;
        let start = episodes.len();
        for i in 0..opts.episodes_per_task {
            let seed = mix_seed(opts.seed, 1000 + spec.kind as u64, i as u64);
            let variation = spec.colors[ChaCha8Rng::seed_from_u64(seed).random_range(0..spec.colors.len())];
            let (goal, result) = run_episode(config, spec, agent, bins, variation, seed, opts)?;
            episodes.push(EpisodeRecord { task: spec.kind, variation: color_name(variation).into(), seed, goal, result });
        }
        let mine: Vec<&EpisodeRecord> = episodes[start..].iter().collect();
        rows.push(row(spec.kind, "all".into(), &mine));
        let mut by_var: BTreeMap<&str, Vec<&EpisodeRecord>> = BTreeMap::new();
        for r in &mine {
            by_var.entry(r.variation.as_str()).or_default().push(r);
        }
        for (v, recs) in by_var {
            rows.push(row(spec.kind, v.to_string(), &recs));
        }
    }
    Ok(EvalReport { goal_mode: opts.goal_mode, rows, episodes })
}
