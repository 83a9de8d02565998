//! Experiment configuration, orchestration and reporting.
//!
//! A config names one experiment, its environments, methods, split grid and
//! seeds. [`run_experiment`] expands that into independent
//! (environment, method, split, seed) jobs, runs them on a worker pool and
//! returns one [`ResultRow`] per metric. Every job derives its randomness
//! from its own seed, so results do not depend on scheduling.

pub mod metrics;
pub mod plot;
pub mod results;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    build_test_set, sample_train_split, to_img, DatasetSplit, Provenance, RelabelMode, StateFormat, Transition,
};
use crate::error::{Error, Result};
use crate::gridworld::{
    conditional_entropies, generate_maze, make_open_grid, sample_goals, sample_trajectory, solve_expert,
    state_visitation, ExpertPolicy, Grid,
};
use crate::latent::{
    lapo_plus_stage2_decode_idm, lapo_plus_stage3_label, lapo_stage1, lapo_stage2_policy, lapo_stage3_decode_policy,
    latent_variance, LatentConfig,
};
use crate::learning::{
    compose_vm_idm, train_bc, train_idm, train_idm_labeling, BatchRule, ExpertSet, ExpertVideoModel, LabelingConfig,
    TrainConfig, Trained,
};
use crate::models::{analytic_idm_img, analytic_idm_pos, ActionModel, ArchKind, ArchSpec, Model, Role};
use crate::verifier::{report_text, run_trials, TrialSpec};

pub use metrics::{bayes_accuracy, metric_accuracy, metric_entropy, metric_nll, metric_reward};
pub use plot::{emit_plots, Plot};
pub use results::{aggregate, read_csv, write_csv, ResultRow, Summary};

pub const CONFIG_SCHEMA: u32 = 1;
pub const DEFAULT_SPLITS: [f64; 7] = [0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0];
const REWARD_SALT: u64 = 0x5eed_0e7a;
const TEST_POOL_SALT: u64 = 0x7e57_9001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ComplexityPos,
    ComplexityImg,
    Goal,
    Stochasticity,
    EntropyGap,
    LapoCompare,
    VerifyTabular,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ComplexityPos => "complexity_pos",
            Self::ComplexityImg => "complexity_img",
            Self::Goal => "goal",
            Self::Stochasticity => "stochasticity",
            Self::EntropyGap => "entropy_gap",
            Self::LapoCompare => "lapo_compare",
            Self::VerifyTabular => "verify_tabular",
        }
    }

    fn format(self) -> StateFormat {
        match self {
            Self::ComplexityImg | Self::LapoCompare => StateFormat::Img,
            _ => StateFormat::Pos,
        }
    }

    fn methods(self) -> &'static [Method] {
        match self {
            Self::ComplexityPos | Self::ComplexityImg | Self::Goal | Self::Stochasticity => {
                &[Method::Bc, Method::Vmidm, Method::IdmLabeling]
            }
            Self::EntropyGap => &[Method::Bc, Method::Idm],
            Self::LapoCompare => &[Method::Lapo, Method::LapoPlus],
            Self::VerifyTabular => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bc,
    Idm,
    Vmidm,
    IdmLabeling,
    Lapo,
    LapoPlus,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bc => "bc",
            Self::Idm => "idm",
            Self::Vmidm => "vmidm",
            Self::IdmLabeling => "idm_labeling",
            Self::Lapo => "lapo",
            Self::LapoPlus => "lapo_plus",
        }
    }

    fn is_latent(self) -> bool {
        matches!(self, Self::Lapo | Self::LapoPlus)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    /// Required for everything except the latent pipelines.
    #[serde(default)]
    pub arch: Option<ArchKind>,
    #[serde(default)]
    pub goal_conditioned: bool,
}

impl MethodSpec {
    pub fn new(method: Method, arch: ArchKind) -> Self {
        Self {
            method,
            arch: Some(arch),
            goal_conditioned: false,
        }
    }

    pub fn latent(method: Method) -> Self {
        Self {
            method,
            arch: None,
            goal_conditioned: false,
        }
    }

    fn arch_name(&self) -> &'static str {
        self.arch.map(ArchKind::name).unwrap_or("latent")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Maze side lengths.
    pub sizes: Vec<usize>,
    pub maze_seed: u64,
    /// Goals of the multi-goal maze; every feasible cell when absent.
    pub goals: Option<usize>,
    pub goal_seed: u64,
    pub p_right: Vec<f64>,
    /// Side of the open grid.
    pub grid_size: usize,
    pub trajectories: usize,
    pub horizon: usize,
    pub episodes: usize,
    /// Absolute labeled-set size; replaces the split grid when set.
    pub labeled_size: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sizes: vec![10],
            maze_seed: 0,
            goals: None,
            goal_seed: 0,
            p_right: vec![0.5, 0.7, 0.9],
            grid_size: 20,
            trajectories: 26,
            horizon: 38,
            episodes: 25,
            labeled_size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Overrides every architecture's default epoch budget.
    pub max_epochs: Option<usize>,
    /// Test-set evaluation period in epochs; 0 disables best-epoch tracking.
    pub eval_every: usize,
    pub relabel: RelabelMode,
    /// Batch rule of policies trained on trajectory pools.
    pub policy_batch: Option<BatchRule>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            max_epochs: None,
            eval_every: 100,
            relabel: RelabelMode::default(),
            policy_batch: None,
        }
    }
}

fn default_splits() -> Vec<f64> {
    DEFAULT_SPLITS.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_splits")]
    pub splits: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub latent: LatentConfig,
    #[serde(default)]
    pub verify: TrialSpec,
    /// Records wall-clock seconds per job; off by default so reruns are
    /// byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, methods: Vec<MethodSpec>, seeds: Vec<u64>) -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            experiment,
            env: EnvConfig::default(),
            methods,
            splits: default_splits(),
            seeds,
            output_dir: default_output(),
            training: TrainingConfig::default(),
            latent: LatentConfig::default(),
            verify: TrialSpec::default(),
            record_wall_time: false,
        }
    }

    /// Parses TOML; a relative `output_dir` is resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if config.output_dir.is_relative() {
            config.output_dir = base_dir.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported schema {} (expected {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let kind = self.experiment;
        if kind == ExperimentKind::VerifyTabular {
            if self.verify.trials == 0 {
                return Err(Error::Config("verify.trials must be positive".into()));
            }
            return Ok(());
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.env.labeled_size.is_none() {
            if self.splits.is_empty() {
                return Err(Error::Config("splits must not be empty".into()));
            }
            if let Some(f) = self.splits.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
                return Err(Error::Config(format!("split {f} outside (0, 1]")));
            }
        } else if self.env.labeled_size == Some(0) {
            return Err(Error::Config("labeled_size must be positive".into()));
        }
        if let Some(p) = self.env.p_right.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("p_right {p} outside [0, 1]")));
        }
        if matches!(kind, ExperimentKind::Stochasticity | ExperimentKind::EntropyGap) {
            if self.env.p_right.is_empty() {
                return Err(Error::Config("p_right must not be empty".into()));
            }
            if self.env.trajectories == 0 || self.env.horizon == 0 || self.env.episodes == 0 {
                return Err(Error::Config("trajectories, horizon and episodes must be positive".into()));
            }
        } else if self.env.sizes.is_empty() {
            return Err(Error::Config("sizes must not be empty".into()));
        }
        if self.training.max_epochs == Some(0) {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        for m in &self.methods {
            if !kind.methods().contains(&m.method) {
                return Err(Error::Config(format!(
                    "method `{}` is not part of the {} experiment",
                    m.method.name(),
                    kind.name()
                )));
            }
            if m.method.is_latent() {
                continue;
            }
            let arch = m
                .arch
                .ok_or_else(|| Error::Config(format!("method `{}` needs an arch", m.method.name())))?;
            if arch.format() != kind.format() {
                return Err(Error::Config(format!(
                    "{} takes {} inputs but the {} experiment uses {}",
                    arch.name(),
                    arch.format().name(),
                    kind.name(),
                    kind.format().name()
                )));
            }
            if m.goal_conditioned && kind != ExperimentKind::Goal {
                return Err(Error::Config("goal conditioning only applies to the goal experiment".into()));
            }
            for size in self.image_sizes() {
                for spec in self.specs(m, size)? {
                    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
                }
            }
        }
        if kind == ExperimentKind::LapoCompare {
            self.latent.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn image_sizes(&self) -> Vec<usize> {
        match self.experiment {
            ExperimentKind::Stochasticity | ExperimentKind::EntropyGap => vec![self.env.grid_size],
            _ => self.env.sizes.clone(),
        }
    }

    /// Architecture specs a method trains, for one grid size.
    fn specs(&self, m: &MethodSpec, size: usize) -> Result<Vec<ArchSpec>> {
        let Some(arch) = m.arch else { return Ok(Vec::new()) };
        let build = |role: Role| {
            let spec = ArchSpec::new(arch, role).with_goal(m.goal_conditioned);
            if arch.is_cnn() {
                spec.with_image_size(size, size)
            } else {
                spec
            }
        };
        Ok(match m.method {
            Method::Bc => vec![build(Role::Policy)],
            Method::Idm | Method::Vmidm => vec![build(Role::Idm)],
            Method::IdmLabeling => vec![build(Role::Idm), build(Role::Policy)],
            Method::Lapo | Method::LapoPlus => Vec::new(),
        })
    }

    fn train_config(&self, spec: &ArchSpec, seed: u64, trajectory_policy: bool) -> TrainConfig {
        let mut c = TrainConfig::for_arch(spec, seed);
        if let Some(e) = self.training.max_epochs {
            c = c.with_epochs(e);
        }
        c.eval_every = self.training.eval_every;
        if trajectory_policy && spec.role == Role::Policy {
            c = c.with_batch(self.training.policy_batch.unwrap_or(BatchRule::Min512));
        }
        c
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Added to every configured seed.
    pub seed_offset: u64,
}

/// Rows plus any named text artifacts (verifier reports).
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub artifacts: Vec<(String, String)>,
}

enum Env {
    Maze {
        name: String,
        grid: Grid,
        experts: ExpertSet,
        experts_img: ExpertSet,
        test: Vec<Transition>,
        test_img: Vec<Transition>,
    },
    Open {
        name: String,
        grid: Grid,
        expert: ExpertPolicy,
    },
}

impl Env {
    fn name(&self) -> &str {
        match self {
            Env::Maze { name, .. } | Env::Open { name, .. } => name,
        }
    }
}

fn build_envs(config: &ExperimentConfig) -> Result<Vec<Env>> {
    let env = &config.env;
    match config.experiment {
        ExperimentKind::ComplexityPos | ExperimentKind::ComplexityImg | ExperimentKind::LapoCompare => env
            .sizes
            .iter()
            .map(|&size| {
                let grid = generate_maze(size, env.maze_seed)?;
                let expert = solve_expert(&grid);
                let test = build_test_set(&grid, &expert)?;
                let test_img = to_img(&test, &grid)?;
                Ok(Env::Maze {
                    name: format!("maze{size}"),
                    experts: ExpertSet::single(grid.clone(), expert.clone(), StateFormat::Pos),
                    experts_img: ExpertSet::single(grid.clone(), expert, StateFormat::Img),
                    grid,
                    test,
                    test_img,
                })
            })
            .collect(),
        ExperimentKind::Goal => env
            .sizes
            .iter()
            .map(|&size| {
                let grid = generate_maze(size, env.maze_seed)?;
                let goals = match env.goals {
                    Some(k) => sample_goals(&grid, k, env.goal_seed)?,
                    None => grid.feasible_states(),
                };
                let mut test = Vec::new();
                for &g in &goals {
                    let gg = grid.with_goal(g)?;
                    let e = solve_expert(&gg);
                    test.extend(build_test_set(&gg, &e)?.into_iter().map(|t| t.with_goal(g)));
                }
                Ok(Env::Maze {
                    name: format!("maze{size}_goals{}", goals.len()),
                    experts: ExpertSet::multi_goal(&grid, &goals, StateFormat::Pos)?,
                    experts_img: ExpertSet::multi_goal(&grid, &goals, StateFormat::Img)?,
                    test_img: Vec::new(),
                    grid,
                    test,
                })
            })
            .collect(),
        ExperimentKind::Stochasticity | ExperimentKind::EntropyGap => env
            .p_right
            .iter()
            .map(|&p| {
                Ok(Env::Open {
                    name: format!("open{}_p{p}", env.grid_size),
                    grid: make_open_grid(env.grid_size)?,
                    expert: ExpertPolicy::stochastic_diagonal(p)?,
                })
            })
            .collect(),
        ExperimentKind::VerifyTabular => Ok(Vec::new()),
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    env: usize,
    /// `None` runs every configured method on one shared pretraining.
    method: Option<usize>,
    split: f64,
    seed: u64,
}

fn split_grid(config: &ExperimentConfig, env: &Env) -> Vec<f64> {
    match (config.env.labeled_size, env) {
        (Some(k), Env::Maze { test, .. }) => vec![k.min(test.len()) as f64 / test.len() as f64],
        (Some(k), Env::Open { .. }) => {
            let n = config.env.trajectories * config.env.horizon;
            vec![k.min(n) as f64 / n as f64]
        }
        (None, _) => config.splits.clone(),
    }
}

fn cells(config: &ExperimentConfig, envs: &[Env], offset: u64) -> Vec<Cell> {
    let mut out = Vec::new();
    for (e, env) in envs.iter().enumerate() {
        let methods: Vec<Option<usize>> = if config.experiment == ExperimentKind::LapoCompare {
            vec![None]
        } else {
            (0..config.methods.len()).map(Some).collect()
        };
        for &method in &methods {
            for &split in &split_grid(config, env) {
                for &seed in &config.seeds {
                    out.push(Cell {
                        env: e,
                        method,
                        split,
                        seed: seed.wrapping_add(offset),
                    });
                }
            }
        }
    }
    out
}

struct RowSink<'a> {
    config: &'a ExperimentConfig,
    env: &'a str,
    split: f64,
    seed: u64,
    started: Instant,
    rows: Vec<ResultRow>,
}

impl RowSink<'_> {
    fn push(&mut self, method: &str, arch: &str, metric: &str, value: f64, epochs_run: usize) {
        self.rows.push(ResultRow {
            experiment: self.config.experiment.name().to_string(),
            environment: self.env.to_string(),
            method: method.to_string(),
            arch: arch.to_string(),
            split_fraction: self.split,
            seed: self.seed,
            metric: metric.to_string(),
            value,
            epochs_run,
            wall_time: if self.config.record_wall_time {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
}

/// Pool of `trajectories` expert rollouts.
pub fn sample_pool(grid: &Grid, expert: &ExpertPolicy, trajectories: usize, horizon: usize, seed: u64) -> Result<Vec<Transition>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(trajectories * horizon);
    for _ in 0..trajectories {
        pool.extend(sample_trajectory(grid, expert, horizon, &mut rng)?);
    }
    Ok(pool)
}

fn trained_with_eval<F>(eval_every: usize, mut eval: F, train: impl FnOnce(Option<&mut dyn FnMut(&Model) -> Result<f64>>) -> Result<Trained>) -> Result<Trained>
where
    F: FnMut(&Model) -> Result<f64>,
{
    if eval_every > 0 {
        train(Some(&mut eval))
    } else {
        train(None)
    }
}

fn run_maze_cell(config: &ExperimentConfig, env: &Env, m: &MethodSpec, split: f64, seed: u64, sink: &mut RowSink) -> Result<()> {
    let Env::Maze {
        name,
        grid,
        experts,
        experts_img,
        test,
        test_img,
    } = env
    else {
        return Err(Error::Config("maze experiment given a non-maze environment".into()));
    };
    let arch = m.arch.ok_or_else(|| Error::Config("missing arch".into()))?;
    let (test, experts) = match arch.format() {
        StateFormat::Pos => (test, experts),
        StateFormat::Img => (test_img, experts_img),
    };
    let split_data = sample_train_split(test, split, seed, Provenance::new(name.clone(), "shortest_path"))?;
    let specs = config.specs(m, grid.width())?;
    let every = config.training.eval_every;
    let an = arch.name();
    let method = m.method.name();
    let heldout_set: Vec<Transition> = test
        .iter()
        .filter(|t| !split_data.labeled.contains(t))
        .cloned()
        .collect();
    let heldout_of = |model: &dyn ActionModel| -> Result<Option<f64>> {
        if heldout_set.is_empty() {
            Ok(None)
        } else {
            metric_accuracy(model, &heldout_set).map(Some)
        }
    };
    let heldout;
    let (model_acc, model_nll, model_ent, report) = match m.method {
        Method::Bc => {
            let cfg = config.train_config(&specs[0], seed, false);
            let t = trained_with_eval(every, |net: &Model| metric_accuracy(net, test), |eval| {
                train_bc(&split_data.labeled, specs[0], &cfg, eval)
            })?;
            heldout = heldout_of(&t.model)?;
            if config.experiment == ExperimentKind::Goal && !m.goal_conditioned {
                sink.push(method, an, "bayes_accuracy", bayes_accuracy(test)?, 0);
            }
            (
                metric_accuracy(&t.model, test)?,
                metric_nll(&t.model, test)?,
                metric_entropy(&t.model, test)?,
                t.report,
            )
        }
        Method::Vmidm => {
            let cfg = config.train_config(&specs[0], seed, false);
            let vm = ExpertVideoModel(experts.clone());
            let t = trained_with_eval(
                every,
                |net: &Model| metric_accuracy(&compose_vm_idm(&vm, net), test),
                |eval| train_idm(&split_data.labeled, specs[0], &cfg, eval),
            )?;
            let policy = compose_vm_idm(&vm, &t.model);
            heldout = heldout_of(&policy)?;
            sink.push(method, an, "idm_accuracy", metric_accuracy(&t.model, test)?, t.report.epochs_run);
            (
                metric_accuracy(&policy, test)?,
                metric_nll(&policy, test)?,
                metric_entropy(&policy, test)?,
                t.report,
            )
        }
        Method::IdmLabeling => {
            let lc = LabelingConfig {
                idm: config.train_config(&specs[0], seed, false),
                policy: config.train_config(&specs[1], seed, false),
                relabel: config.training.relabel,
            };
            let r = train_idm_labeling(&split_data.labeled, &split_data.unlabeled, specs[0], specs[1], &lc)?;
            sink.push(method, an, "idm_accuracy", metric_accuracy(&r.idm.model, test)?, r.idm.report.epochs_run);
            heldout = heldout_of(&r.policy.model)?;
            (
                metric_accuracy(&r.policy.model, test)?,
                metric_nll(&r.policy.model, test)?,
                metric_entropy(&r.policy.model, test)?,
                r.policy.report,
            )
        }
        other => return Err(Error::Config(format!("method `{}` does not run on mazes", other.name()))),
    };
    let epochs = report.epochs_run;
    if let Some(acc) = heldout {
        sink.push(method, an, "heldout_accuracy", acc, epochs);
    }
    sink.push(method, an, "test_accuracy", model_acc, epochs);
    sink.push(method, an, "test_nll", model_nll, epochs);
    sink.push(method, an, "entropy", model_ent, epochs);
    if let Some(best) = report.best_eval {
        sink.push(method, an, "best_test_accuracy", best, epochs);
    }
    Ok(())
}

fn run_open_cell(config: &ExperimentConfig, env: &Env, m: &MethodSpec, split: f64, seed: u64, sink: &mut RowSink) -> Result<()> {
    let Env::Open { name, grid, expert } = env else {
        return Err(Error::Config("trajectory experiment given a maze environment".into()));
    };
    let e = &config.env;
    let pool = sample_pool(grid, expert, e.trajectories, e.horizon, seed)?;
    let split_data: DatasetSplit = sample_train_split(&pool, split, seed, Provenance::new(name.clone(), expert.id()))?;
    let specs = config.specs(m, grid.width())?;
    let an = m.arch_name();
    let method = m.method.name();
    let mut reward_rng = ChaCha8Rng::seed_from_u64(seed ^ REWARD_SALT);
    let reward = |policy: &dyn ActionModel, rng: &mut ChaCha8Rng| {
        metric_reward(policy, grid, StateFormat::Pos, e.episodes, e.horizon, rng)
    };
    match config.experiment {
        ExperimentKind::Stochasticity => {
            let (value, epochs) = match m.method {
                Method::Bc => {
                    let t = train_bc(&split_data.labeled, specs[0], &config.train_config(&specs[0], seed, true), None)?;
                    (reward(&t.model, &mut reward_rng)?, t.report.epochs_run)
                }
                Method::Vmidm => {
                    let t = train_idm(&split_data.labeled, specs[0], &config.train_config(&specs[0], seed, true), None)?;
                    let vm = ExpertVideoModel(ExpertSet::single(grid.clone(), expert.clone(), StateFormat::Pos));
                    (reward(&compose_vm_idm(vm, &t.model), &mut reward_rng)?, t.report.epochs_run)
                }
                Method::IdmLabeling => {
                    let lc = LabelingConfig {
                        idm: config.train_config(&specs[0], seed, true),
                        policy: config.train_config(&specs[1], seed, true),
                        relabel: config.training.relabel,
                    };
                    let r = train_idm_labeling(&split_data.labeled, &split_data.unlabeled, specs[0], specs[1], &lc)?;
                    (reward(&r.policy.model, &mut reward_rng)?, r.policy.report.epochs_run)
                }
                other => return Err(Error::Config(format!("method `{}` is not a policy", other.name()))),
            };
            sink.push(method, an, "avg_reward", value, epochs);
        }
        ExperimentKind::EntropyGap => {
            let test = sample_pool(grid, expert, e.trajectories, e.horizon, seed ^ TEST_POOL_SALT)?;
            let t = match m.method {
                Method::Bc => train_bc(&split_data.labeled, specs[0], &config.train_config(&specs[0], seed, true), None)?,
                Method::Idm => train_idm(&split_data.labeled, specs[0], &config.train_config(&specs[0], seed, true), None)?,
                other => return Err(Error::Config(format!("method `{}` has no entropy estimate", other.name()))),
            };
            let epochs = t.report.epochs_run;
            sink.push(method, an, "entropy", metric_entropy(&t.model, &test)?, epochs);
            sink.push(method, an, "test_nll", metric_nll(&t.model, &test)?, epochs);
            sink.push(method, an, "test_accuracy", metric_accuracy(&t.model, &test)?, epochs);
        }
        other => return Err(Error::Config(format!("{} does not use trajectory pools", other.name()))),
    }
    Ok(())
}

fn run_latent_cell(config: &ExperimentConfig, env: &Env, split: f64, seed: u64, sink: &mut RowSink) -> Result<()> {
    let Env::Maze { name, test_img, .. } = env else {
        return Err(Error::Config("latent pipelines run on mazes".into()));
    };
    let data = sample_train_split(test_img, split, seed, Provenance::new(name.clone(), "shortest_path"))?;
    let lc = LatentConfig { seed, ..config.latent };
    let (stack, pretrain) = lapo_stage1(&data.unlabeled, lc)?;
    let codes: BTreeSet<usize> = stack.code_usage(&data.unlabeled)?.into_iter().collect();
    let steps = lc.stage_steps[0];
    sink.push("lapo_stage1", "latent", "reconstruction_initial", pretrain.initial_loss, steps);
    sink.push("lapo_stage1", "latent", "reconstruction_final", pretrain.final_loss, steps);
    sink.push("lapo_stage1", "latent", "codes_used", codes.len() as f64, steps);
    sink.push(
        "lapo_stage1",
        "latent",
        "latent_variance",
        latent_variance(&stack.latents(&data.unlabeled)?),
        steps,
    );
    let wanted: BTreeSet<Method> = config.methods.iter().map(|m| m.method).collect();
    if wanted.contains(&Method::Lapo) {
        let mut s = stack.clone();
        lapo_stage2_policy(&mut s, &data.unlabeled)?;
        let (policy, report) = lapo_stage3_decode_policy(&mut s, &data.labeled)?;
        sink.push("lapo", "latent", "test_accuracy", metric_accuracy(&policy, test_img)?, report.epochs_run);
    }
    if wanted.contains(&Method::LapoPlus) {
        let mut s = stack;
        let (idm, idm_report) = lapo_plus_stage2_decode_idm(&mut s, &data.labeled)?;
        sink.push("lapo_plus", "latent", "idm_accuracy", metric_accuracy(&idm, test_img)?, idm_report.epochs_run);
        let (policy, report) = lapo_plus_stage3_label(&idm, &data.unlabeled, &lc, config.training.relabel)?;
        sink.push("lapo_plus", "latent", "test_accuracy", metric_accuracy(&policy, test_img)?, report.epochs_run);
    }
    Ok(())
}

fn run_cell(config: &ExperimentConfig, envs: &[Env], cell: Cell) -> Result<Vec<ResultRow>> {
    let env = &envs[cell.env];
    let mut sink = RowSink {
        config,
        env: env.name(),
        split: cell.split,
        seed: cell.seed,
        started: Instant::now(),
        rows: Vec::new(),
    };
    match (config.experiment, cell.method) {
        (ExperimentKind::LapoCompare, _) => run_latent_cell(config, env, cell.split, cell.seed, &mut sink)?,
        (_, Some(m)) => {
            let m = &config.methods[m];
            match env {
                Env::Maze { .. } => run_maze_cell(config, env, m, cell.split, cell.seed, &mut sink)?,
                Env::Open { .. } => run_open_cell(config, env, m, cell.split, cell.seed, &mut sink)?,
            }
        }
        (_, None) => return Err(Error::Config("cell without a method".into())),
    }
    log::info!(
        "{} {} split={} seed={} done ({} rows)",
        config.experiment.name(),
        env.name(),
        cell.split,
        cell.seed,
        sink.rows.len()
    );
    Ok(sink.rows)
}

/// Exact `H(a|s)` and `H(a|s,s')` of every open-grid expert, under its
/// own state visitation over the episode horizon.
fn exact_entropy_rows(config: &ExperimentConfig, envs: &[Env]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for env in envs {
        let Env::Open { name, grid, expert } = env else { continue };
        let weights = state_visitation(grid, expert, config.env.horizon);
        let (h_policy, h_idm) = conditional_entropies(grid, expert, &weights);
        for (method, value) in [("expert", h_policy), ("expert_idm", h_idm)] {
            rows.push(ResultRow {
                experiment: config.experiment.name().to_string(),
                environment: name.clone(),
                method: method.to_string(),
                arch: "table".to_string(),
                split_fraction: 1.0,
                seed: 0,
                metric: "entropy".to_string(),
                value,
                epochs_run: 0,
                wall_time: 0.0,
            });
        }
    }
    rows
}

fn verify_rows(config: &ExperimentConfig, offset: u64) -> Result<RunOutput> {
    let spec = TrialSpec {
        seed: config.seeds[0].wrapping_add(offset),
        ..config.verify
    };
    let records = run_trials(&spec)?;
    let mut rows = Vec::new();
    for r in &records {
        let metrics = [
            ("kl_lhs", r.kl.lhs),
            ("kl_policy_term", r.kl.rhs_policy_term),
            ("kl_dynamics_term", r.kl.rhs_dynamics_term),
            ("kl_equality_residual", r.kl.equality_residual),
            ("kl_inequality_holds", f64::from(u8::from(r.kl.inequality_holds))),
            ("consistency_residual", r.consistency_residual),
            ("equivalence_residual", r.equivalence_residual),
            ("passed", f64::from(u8::from(r.passed()))),
        ];
        for (metric, value) in metrics {
            rows.push(ResultRow {
                experiment: config.experiment.name().to_string(),
                environment: "tabular".to_string(),
                method: "verifier".to_string(),
                arch: "table".to_string(),
                split_fraction: 1.0,
                seed: r.trial as u64,
                metric: metric.to_string(),
                value,
                epochs_run: 0,
                wall_time: 0.0,
            });
        }
    }
    Ok(RunOutput {
        rows,
        artifacts: vec![("verify_report.txt".to_string(), report_text(&records))],
    })
}

/// Runs the full environment × method × split × seed grid.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    config.validate()?;
    if config.experiment == ExperimentKind::VerifyTabular {
        return verify_rows(config, opts.seed_offset);
    }
    let envs = build_envs(config)?;
    let grid = cells(config, &envs, opts.seed_offset);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let per_cell: Vec<Vec<ResultRow>> = pool.install(|| {
        grid.par_iter()
            .map(|&cell| run_cell(config, &envs, cell))
            .collect::<Result<_>>()
    })?;
    let mut rows: Vec<ResultRow> = per_cell.into_iter().flatten().collect();
    if config.experiment == ExperimentKind::EntropyGap {
        rows.extend(exact_entropy_rows(config, &envs));
    }
    if let Some(bad) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::Verification(format!(
            "non-finite {} for {} seed {}",
            bad.metric, bad.method, bad.seed
        )));
    }
    Ok(RunOutput {
        rows,
        artifacts: Vec::new(),
    })
}

/// Writes `results.csv`, `summary.csv` and any artifacts into `dir`.
pub fn write_outputs(output: &RunOutput, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("results.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(&output.rows, file)?;
    let summary_path = dir.join("summary.csv");
    let file = std::fs::File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
    results::write_summary_csv(&aggregate(&output.rows), file)?;
    for (name, text) in &output.artifacts {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(csv_path)
}

/// Analytic-IDM argmax accuracy on one maze.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLine {
    pub maze_seed: u64,
    pub transitions: usize,
    pub pos_accuracy: f64,
    pub img_accuracy: f64,
}

pub fn oracle_accuracy(size: usize, maze_seeds: &[u64]) -> Result<Vec<OracleLine>> {
    maze_seeds
        .iter()
        .map(|&seed| {
            let grid = generate_maze(size, seed)?;
            let test = build_test_set(&grid, &solve_expert(&grid))?;
            let img = to_img(&test, &grid)?;
            Ok(OracleLine {
                maze_seed: seed,
                transitions: test.len(),
                pos_accuracy: metric_accuracy(&analytic_idm_pos(1.0)?, &test)?,
                img_accuracy: metric_accuracy(&analytic_idm_img((grid.height(), grid.width()), 1.0)?, &img)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toml_config(body: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(body, Path::new("/tmp/cfg"))
    }

    #[test]
    fn parses_and_resolves_output_dir() {
        let c = toml_config(
            r#"
schema = 1
experiment = "complexity_pos"
seeds = [0, 1]
splits = [0.5, 1.0]
output_dir = "runs/a"

[env]
sizes = [10]

[[methods]]
method = "bc"
arch = "mlp5"
"#,
        )
        .unwrap();
        assert_eq!(c.output_dir, Path::new("/tmp/cfg/runs/a"));
        assert_eq!(c.methods[0].arch, Some(ArchKind::Mlp5));
    }

    #[test]
    fn rejects_bad_configs() {
        let base = "schema = 1\nexperiment = \"complexity_pos\"\nseeds = [0]\n";
        let wrong_format = format!("{base}[[methods]]\nmethod = \"bc\"\narch = \"cnn1\"\n");
        assert!(toml_config(&wrong_format).is_err());
        let wrong_method = format!("{base}[[methods]]\nmethod = \"lapo\"\n");
        assert!(toml_config(&wrong_method).is_err());
        let no_seeds = "schema = 1\nexperiment = \"verify_tabular\"\nseeds = []\n";
        assert!(toml_config(no_seeds).is_err());
        let schema = "schema = 9\nexperiment = \"verify_tabular\"\nseeds = [0]\n";
        assert!(toml_config(schema).is_err());
        let unknown = format!("{base}colour = 1\n[[methods]]\nmethod = \"bc\"\narch = \"lc\"\n");
        assert!(toml_config(&unknown).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::new(ExperimentKind::Goal, vec![MethodSpec::new(Method::Bc, ArchKind::Mlp5)], vec![3]);
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, Path::new("/")).unwrap().methods, c.methods);
    }

    #[test]
    fn oracle_is_exact() {
        for line in oracle_accuracy(10, &[0, 1]).unwrap() {
            assert_eq!(line.pos_accuracy, 1.0);
            assert_eq!(line.img_accuracy, 1.0);
        }
    }

    #[test]
    fn small_run_is_deterministic() {
        let mut c = ExperimentConfig::new(
            ExperimentKind::ComplexityPos,
            vec![MethodSpec::new(Method::Bc, ArchKind::Lc), MethodSpec::new(Method::Vmidm, ArchKind::Lc)],
            vec![0, 1],
        );
        c.splits = vec![0.5];
        c.training.max_epochs = Some(20);
        let a = run_experiment(&c, &RunOptions { jobs: 2, seed_offset: 0 }).unwrap();
        let b = run_experiment(&c, &RunOptions { jobs: 1, seed_offset: 0 }).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.iter().any(|r| r.method == "vmidm" && r.metric == "test_accuracy"));
    }
}
