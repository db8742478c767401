//! Run configuration, deterministic seed streams, the training loop,
//! evaluation, and checkpointing.
//!
//! One training run is single-threaded and fully determined by its config and
//! seed: every source of randomness draws from a named ChaCha stream derived
//! from the master seed, so any component can be reproduced in isolation and
//! `learning_curve.csv` is byte-identical across reruns.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::backbone::{select_actions, Learner, LearnerConfig, ReplayBuffer, ShapedRewards, Transition};
use crate::effect::{batch_action_effects, EffectConfig};
use crate::env::{Environment, EnvConfig, ParticleEnv, ParticleTask};
use crate::forward_model::ForwardModel;
use crate::gate::{compose_total, extrinsic_advantage, gate, intrinsic_reward};
use crate::instrument::{BucketTimer, CounterSnapshot, Counters, TimingBuckets};
use crate::nn::{Adam, Mlp};
use crate::oracle::{DelayedChain, DelayedChainConfig};
use crate::stats::RunningStats;
use crate::{Error, Result};

/// Which world a run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    PredatorPrey,
    CooperativeNavigation,
    DelayedChain,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskKind::PredatorPrey => "predator-prey",
            TaskKind::CooperativeNavigation => "cooperative-navigation",
            TaskKind::DelayedChain => "delayed-chain",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predator-prey" => Ok(TaskKind::PredatorPrey),
            "cooperative-navigation" => Ok(TaskKind::CooperativeNavigation),
            "delayed-chain" => Ok(TaskKind::DelayedChain),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// Method variant: the plain backbone or the intrinsic-reward method with its
/// two ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Method {
    Backbone,
    Magic,
    MagicNoGate,
    MagicH1,
}

impl Method {
    /// Whether the variant runs the forward model and effect engine at all.
    pub fn uses_effect(self) -> bool {
        !matches!(self, Method::Backbone)
    }

    pub fn uses_gate(self) -> bool {
        matches!(self, Method::Magic | Method::MagicH1)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Backbone => "backbone",
            Method::Magic => "magic",
            Method::MagicNoGate => "magic-no-gate",
            Method::MagicH1 => "magic-h1",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Method::Backbone),
            "magic" => Ok(Method::Magic),
            "magic-no-gate" => Ok(Method::MagicNoGate),
            "magic-h1" => Ok(Method::MagicH1),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Named RNG streams, all derived from the master seed by counter-keyed
/// stream splitting (one ChaCha stream id per name).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StreamKind {
    EnvReset,
    Exploration,
    Counterfactual,
    Init,
    Corruption,
    BatchSampling,
    EvalReset,
    FmInit,
}

impl StreamKind {
    pub fn id(self) -> u64 {
        match self {
            StreamKind::EnvReset => 0,
            StreamKind::Exploration => 1,
            StreamKind::Counterfactual => 2,
            StreamKind::Init => 3,
            StreamKind::Corruption => 4,
            StreamKind::BatchSampling => 5,
            StreamKind::EvalReset => 6,
            StreamKind::FmInit => 7,
        }
    }

    pub fn all() -> [StreamKind; 8] {
        [
            StreamKind::EnvReset,
            StreamKind::Exploration,
            StreamKind::Counterfactual,
            StreamKind::Init,
            StreamKind::Corruption,
            StreamKind::BatchSampling,
            StreamKind::EvalReset,
            StreamKind::FmInit,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::EnvReset => "env-reset",
            StreamKind::Exploration => "exploration",
            StreamKind::Counterfactual => "counterfactual-sampling",
            StreamKind::Init => "init",
            StreamKind::Corruption => "corruption",
            StreamKind::BatchSampling => "batch-sampling",
            StreamKind::EvalReset => "eval-reset",
            StreamKind::FmInit => "fm-init",
        }
    }
}

/// Derives the named stream for a master seed, positioned at its start.
pub fn derive_stream(master_seed: u64, kind: StreamKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(kind.id());
    rng
}

/// Restores a named stream to a serialized word position.
pub fn restore_stream(master_seed: u64, kind: StreamKind, word_pos: u128) -> ChaCha8Rng {
    let mut rng = derive_stream(master_seed, kind);
    rng.set_word_pos(word_pos);
    rng
}

/// Full configuration of one run. Defaults correspond to the full-scale
/// benchmark protocol; `desk_preset` shrinks everything to acceptance scale.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub method: Method,
    pub seed: u64,
    pub total_env_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: u32,
    /// Rollout horizon H.
    pub horizon: usize,
    /// Counterfactual branches K.
    pub branches: usize,
    pub lambda_int: f64,
    pub c_max: f64,
    pub gate_temperature: f64,
    /// Empty means uniform weights over `horizon`.
    pub horizon_weights: Vec<f64>,
    pub fm_epochs: u32,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub polyak_tau: f64,
    pub grad_clip: f64,
    pub num_agents: usize,
    pub episode_length: u32,
    pub warmup_steps: u64,
    /// One backbone update per this many environment steps.
    pub update_every: u64,
    pub actor_hidden: (usize, usize),
    pub critic_hidden: (usize, usize),
    pub fm_hidden: (usize, usize),
    pub noise_start: f64,
    pub noise_end: f64,
    /// Delay of the chain task; ignored by the particle tasks.
    pub chain_delay: u32,
    /// Gaussian noise scale injected into intrinsic-reward rollouts
    /// (forward-model corruption; 0 disables).
    pub fm_corruption: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::PredatorPrey,
            method: Method::Magic,
            seed: 0,
            total_env_steps: 4_000_000,
            eval_every: 10_000,
            eval_episodes: 10,
            horizon: 3,
            branches: 64,
            lambda_int: 0.05,
            c_max: 5.0,
            gate_temperature: 1.0,
            horizon_weights: Vec::new(),
            fm_epochs: 10,
            gamma: 0.95,
            learning_rate: 1e-3,
            batch_size: 1024,
            buffer_capacity: 1_000_000,
            polyak_tau: 0.01,
            grad_clip: 5.0,
            num_agents: 5,
            episode_length: 25,
            warmup_steps: 10_000,
            update_every: 1,
            actor_hidden: (128, 128),
            critic_hidden: (256, 256),
            fm_hidden: (256, 256),
            noise_start: 0.3,
            noise_end: 0.05,
            chain_delay: 2,
            fm_corruption: 0.0,
        }
    }
}

impl RunConfig {
    /// Desk-scale profile used by the acceptance runs: 3 agents, 200k steps,
    /// small networks, and a reduced branch count so a run fits in minutes of
    /// CPU time.
    pub fn desk_preset(mut self) -> Self {
        self.num_agents = 3;
        self.total_env_steps = 200_000;
        self.warmup_steps = 5_000;
        self.update_every = 8;
        self.batch_size = 64;
        self.branches = 8;
        self.buffer_capacity = 200_000;
        self.actor_hidden = (64, 64);
        self.critic_hidden = (64, 64);
        self.fm_hidden = (64, 64);
        // Returns are sparse at this scale; more evaluation episodes keep the
        // per-checkpoint return estimate usable.
        self.eval_episodes = 20;
        self
    }

    /// Desk-scale chain profile for the delayed-effect learning studies.
    pub fn chain_preset(mut self) -> Self {
        self = self.desk_preset();
        self.task = TaskKind::DelayedChain;
        self.num_agents = 2;
        self.total_env_steps = 60_000;
        self.warmup_steps = 2_000;
        self
    }

    /// Effective horizon weights after applying the method variant.
    pub fn effect_config(&self) -> EffectConfig {
        let (horizon, weights) = if self.method == Method::MagicH1 {
            (1, vec![1.0])
        } else if self.horizon_weights.is_empty() {
            (self.horizon, vec![1.0 / self.horizon as f64; self.horizon])
        } else {
            (self.horizon, self.horizon_weights.clone())
        };
        EffectConfig {
            horizon,
            branches: self.branches,
            weights,
            c_max: self.c_max,
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            gamma: self.gamma,
            polyak_tau: self.polyak_tau,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            actor_hidden: self.actor_hidden,
            critic_hidden: self.critic_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 || self.branches < 1 {
            return Err(Error::Config("horizon and branches must be >= 1".into()));
        }
        if self.task == TaskKind::DelayedChain && self.num_agents != 2 {
            return Err(Error::Config("delayed-chain runs use exactly 2 agents".into()));
        }
        if self.buffer_capacity < (self.warmup_steps + self.update_every) as usize {
            return Err(Error::Config(
                "buffer capacity must cover warmup plus one update interval".into(),
            ));
        }
        if !self.horizon_weights.is_empty() && self.horizon_weights.len() != self.horizon {
            return Err(Error::Config("need one horizon weight per horizon".into()));
        }
        self.effect_config().validate()?;
        Ok(())
    }

    /// Parses a flat `key=value` config file; `#` starts a comment. Unknown
    /// keys are rejected.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", line_no + 1))
            })?;
            config.set_key(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Applies one `key=value` assignment.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
        }
        fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "key '{key}' expects two comma-separated sizes"
                )));
            }
            Ok((parse(key, parts[0])?, parse(key, parts[1])?))
        }
        match key {
            "task" => self.task = value.parse()?,
            "method" => self.method = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "total_env_steps" => self.total_env_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "branches" => self.branches = parse(key, value)?,
            "lambda_int" => self.lambda_int = parse(key, value)?,
            "c_max" => self.c_max = parse(key, value)?,
            "gate_temperature" => self.gate_temperature = parse(key, value)?,
            "horizon_weights" => {
                self.horizon_weights = if value == "uniform" {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse::<f64>(key, v.trim()))
                        .collect::<Result<Vec<f64>>>()?
                };
            }
            "fm_epochs" => self.fm_epochs = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "polyak_tau" => self.polyak_tau = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "num_agents" => self.num_agents = parse(key, value)?,
            "episode_length" => self.episode_length = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "update_every" => self.update_every = parse(key, value)?,
            "actor_hidden" => self.actor_hidden = parse_pair(key, value)?,
            "critic_hidden" => self.critic_hidden = parse_pair(key, value)?,
            "fm_hidden" => self.fm_hidden = parse_pair(key, value)?,
            "noise_start" => self.noise_start = parse(key, value)?,
            "noise_end" => self.noise_end = parse(key, value)?,
            "chain_delay" => self.chain_delay = parse(key, value)?,
            "fm_corruption" => self.fm_corruption = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Serializes the resolved configuration back to `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let weights = if self.horizon_weights.is_empty() {
            "uniform".to_string()
        } else {
            self.horizon_weights
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "task={}\nmethod={}\nseed={}\ntotal_env_steps={}\neval_every={}\neval_episodes={}\n\
             horizon={}\nbranches={}\nlambda_int={}\nc_max={}\ngate_temperature={}\n\
             horizon_weights={}\nfm_epochs={}\ngamma={}\nlearning_rate={}\nbatch_size={}\n\
             buffer_capacity={}\npolyak_tau={}\ngrad_clip={}\nnum_agents={}\nepisode_length={}\n\
             warmup_steps={}\nupdate_every={}\nactor_hidden={},{}\ncritic_hidden={},{}\n\
             fm_hidden={},{}\nnoise_start={}\nnoise_end={}\nchain_delay={}\nfm_corruption={}\n",
            self.task,
            self.method,
            self.seed,
            self.total_env_steps,
            self.eval_every,
            self.eval_episodes,
            self.horizon,
            self.branches,
            self.lambda_int,
            self.c_max,
            self.gate_temperature,
            weights,
            self.fm_epochs,
            self.gamma,
            self.learning_rate,
            self.batch_size,
            self.buffer_capacity,
            self.polyak_tau,
            self.grad_clip,
            self.num_agents,
            self.episode_length,
            self.warmup_steps,
            self.update_every,
            self.actor_hidden.0,
            self.actor_hidden.1,
            self.critic_hidden.0,
            self.critic_hidden.1,
            self.fm_hidden.0,
            self.fm_hidden.1,
            self.noise_start,
            self.noise_end,
            self.chain_delay,
            self.fm_corruption,
        )
    }

    pub fn make_env(&self) -> Result<Box<dyn Environment>> {
        match self.task {
            TaskKind::PredatorPrey => Ok(Box::new(ParticleEnv::new(EnvConfig {
                task: ParticleTask::PredatorPrey,
                num_agents: self.num_agents,
                episode_length: self.episode_length,
                seed: self.seed,
                ..EnvConfig::default()
            })?)),
            TaskKind::CooperativeNavigation => Ok(Box::new(ParticleEnv::new(EnvConfig {
                task: ParticleTask::CooperativeNavigation,
                num_agents: self.num_agents,
                episode_length: self.episode_length,
                seed: self.seed,
                ..EnvConfig::default()
            })?)),
            TaskKind::DelayedChain => Ok(Box::new(DelayedChain::new(DelayedChainConfig {
                delay: self.chain_delay,
                episode_length: self.episode_length,
                seed: self.seed,
                ..DelayedChainConfig::default()
            })?)),
        }
    }
}

/// One evaluation point on the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub mean_return: f64,
    pub std_return: f64,
}

/// Everything a finished run leaves behind, in memory and on disk.
pub struct RunArtifacts {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub curve: Vec<CurvePoint>,
    pub final_return: f64,
    pub best_return: f64,
    pub auc_return: f64,
    pub wall_seconds: f64,
    pub timing: TimingBuckets,
    pub counters: CounterSnapshot,
    /// Largest per-transition team intrinsic reward seen in any batch.
    pub max_team_intrinsic: f64,
    pub fm_loss_last: f64,
    pub learner: Learner,
    pub forward_model: Option<ForwardModel>,
    pub feature_stats: RunningStats,
    pub score_stats: RunningStats,
    pub advantage_stats: RunningStats,
}

fn observations(env: &dyn Environment, state: &[f64]) -> Vec<Vec<f64>> {
    (0..env.num_agents())
        .map(|i| env.observation_vec(state, i))
        .collect()
}

/// Linear anneal from `noise_start` to `noise_end` over the first half of
/// training, then constant.
fn noise_scale(config: &RunConfig, step: u64) -> f64 {
    let half = (config.total_env_steps / 2).max(1) as f64;
    let frac = (step as f64 / half).min(1.0);
    config.noise_start + (config.noise_end - config.noise_start) * frac
}

/// Deterministic episode returns for a policy, noise-free.
pub fn evaluate_policy(
    env: &dyn Environment,
    actors: &[Mlp],
    episode_seeds: &[u64],
) -> Result<Vec<f64>> {
    let mut returns = Vec::with_capacity(episode_seeds.len());
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    for &seed in episode_seeds {
        let mut state = env.reset_vec(seed);
        let mut obs = observations(env, &state);
        let mut total = 0.0;
        for _ in 0..env.episode_length() {
            let action = select_actions(actors, &obs, 0.0, &mut throwaway)?;
            let (next, reward) = env.transition_vec(&state, &action);
            total += reward;
            state = next;
            obs = observations(env, &state);
        }
        returns.push(total);
    }
    Ok(returns)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scalar summary metrics from a learning curve: final = mean of the last 10
/// points, best = max, AUC = trapezoid area normalized by the step span.
pub fn curve_metrics(curve: &[CurvePoint]) -> (f64, f64, f64) {
    if curve.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let tail = curve.len().saturating_sub(10);
    let final_return =
        curve[tail..].iter().map(|p| p.mean_return).sum::<f64>() / (curve.len() - tail) as f64;
    let best = curve
        .iter()
        .map(|p| p.mean_return)
        .fold(f64::NEG_INFINITY, f64::max);
    let auc = if curve.len() < 2 {
        curve[0].mean_return
    } else {
        let mut area = 0.0;
        for pair in curve.windows(2) {
            let dx = (pair[1].step - pair[0].step) as f64;
            area += 0.5 * (pair[0].mean_return + pair[1].mean_return) * dx;
        }
        area / (curve.last().unwrap().step - curve[0].step) as f64
    };
    (final_return, best, auc)
}

pub fn write_learning_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = String::from("step,mean_return,std_return\n");
    for p in curve {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            p.step, p.mean_return, p.std_return
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Executes the full training procedure for one run and writes
/// `learning_curve.csv`, `metrics.json`, `run_config.txt`, gate diagnostics,
/// and a final checkpoint under `out_dir`.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let wall_start = Instant::now();
    let env = config.make_env()?;
    let counters = Counters::new();
    let mut timing = TimingBuckets::default();

    let mut init_rng = derive_stream(config.seed, StreamKind::Init);
    let mut env_reset_rng = derive_stream(config.seed, StreamKind::EnvReset);
    let mut exploration_rng = derive_stream(config.seed, StreamKind::Exploration);
    let mut cf_rng = derive_stream(config.seed, StreamKind::Counterfactual);
    let mut batch_rng = derive_stream(config.seed, StreamKind::BatchSampling);
    let mut corruption_rng = derive_stream(config.seed, StreamKind::Corruption);
    let mut fm_init_rng = derive_stream(config.seed, StreamKind::FmInit);
    let mut eval_rng = derive_stream(config.seed, StreamKind::EvalReset);

    let eval_points = (config.total_env_steps / config.eval_every) as usize;
    let eval_seeds: Vec<Vec<u64>> = (0..eval_points)
        .map(|_| (0..config.eval_episodes).map(|_| eval_rng.next_u64()).collect())
        .collect();

    let mut learner = Learner::new(env.as_ref(), config.learner_config(), &mut init_rng);
    let effect_cfg = config.effect_config();
    let action_dim = 2 * env.num_agents();
    let mut forward_model = if config.method.uses_effect() {
        Some(ForwardModel::new(
            env.state_dim(),
            action_dim,
            config.fm_hidden,
            &mut fm_init_rng,
        ))
    } else {
        None
    };
    let mut fm_opt = forward_model.as_ref().map(|fm| Adam::new(fm.net()));

    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut feature_stats = RunningStats::new(env.agent_block(0).len());
    let mut score_stats = RunningStats::new(1);
    let mut advantage_stats = RunningStats::new(1);

    let mut gate_csv = if config.method.uses_gate() {
        let file = std::fs::File::create(out_dir.join("gate_diagnostics.csv"))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "update,mean_kappa,frac_kappa_lt_0.1,frac_kappa_gt_0.9,mean_r_int")?;
        Some(w)
    } else {
        None
    };

    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut max_team_intrinsic = 0.0f64;
    let mut fm_loss_last = f64::NAN;
    let mut update_count = 0u64;

    let mut state = env.reset_vec(env_reset_rng.next_u64());
    let mut obs = observations(env.as_ref(), &state);
    let mut t_in_episode = 0u32;

    for step in 0..config.total_env_steps {
        let timer = BucketTimer::start();
        let noise = noise_scale(config, step);
        let action = select_actions(&learner.actors, &obs, noise, &mut exploration_rng)?;
        let (next_state, reward_ext) = env.transition_vec(&state, &action);
        t_in_episode += 1;
        let done = t_in_episode >= env.episode_length();
        let next_obs = observations(env.as_ref(), &next_state);
        buffer.push(Transition {
            state: state.clone(),
            observations: obs,
            action,
            reward_ext,
            next_state: next_state.clone(),
            next_observations: next_obs.clone(),
            terminal: false, // episode ends are time limits, not failures
        });
        if done {
            state = env.reset_vec(env_reset_rng.next_u64());
            obs = observations(env.as_ref(), &state);
            t_in_episode = 0;
        } else {
            state = next_state;
            obs = next_obs;
        }
        timer.stop_into(&mut timing.env);

        let past_warmup = step + 1 >= config.warmup_steps;
        if past_warmup
            && (step + 1) % config.update_every == 0
            && buffer.len() >= config.batch_size
        {
            update_count += 1;
            // Forward model: fm_epochs minibatches per learner iteration,
            // sampled from the replay buffer of real one-step transitions.
            if let (Some(fm), Some(opt)) = (forward_model.as_mut(), fm_opt.as_mut()) {
                let timer = BucketTimer::start();
                for _ in 0..config.fm_epochs {
                    let fm_idx = buffer.sample_indices(config.batch_size, &mut batch_rng);
                    let mut inputs = Array2::zeros((fm_idx.len(), env.state_dim() + action_dim));
                    let mut targets = Array2::zeros((fm_idx.len(), env.state_dim()));
                    for (row, &i) in fm_idx.iter().enumerate() {
                        let t = buffer.get(i);
                        let flat = t.action.flat();
                        for d in 0..env.state_dim() {
                            inputs[[row, d]] = t.state[d];
                            targets[[row, d]] = t.next_state[d];
                        }
                        for d in 0..action_dim {
                            inputs[[row, env.state_dim() + d]] = flat[d];
                        }
                    }
                    fm_loss_last = fm.train_step(
                        opt,
                        inputs.view(),
                        targets.view(),
                        config.learning_rate,
                        config.grad_clip,
                    )?;
                }
                timer.stop_into(&mut timing.fm);
            }


            let idx = buffer.sample_indices(config.batch_size, &mut batch_rng);
            let shaped = if let Some(fm) = forward_model.as_ref() {
                compute_shaped_rewards(
                    env.as_ref(),
                    fm,
                    &learner,
                    config,
                    &effect_cfg,
                    &buffer,
                    &idx,
                    &mut feature_stats,
                    &mut score_stats,
                    &mut advantage_stats,
                    &mut cf_rng,
                    &mut corruption_rng,
                    &counters,
                    &mut timing,
                    &mut max_team_intrinsic,
                    gate_csv.as_mut(),
                    update_count,
                )?
            } else {
                let rewards: Vec<f64> = idx.iter().map(|&i| buffer.get(i).reward_ext).collect();
                ShapedRewards::extrinsic_only(&rewards, env.num_agents())
            };

            let timer = BucketTimer::start();
            learner.critic_update(&buffer, &idx, &shaped, &counters)?;
            learner.actor_update(&buffer, &idx)?;
            if config.method.uses_effect() {
                learner.ext_value_update(&buffer, &idx, &counters)?;
            }
            learner.polyak_update(config.polyak_tau)?;
            timer.stop_into(&mut timing.backbone);
        }

        if (step + 1) % config.eval_every == 0 {
            let timer = BucketTimer::start();
            let eval_idx = ((step + 1) / config.eval_every - 1) as usize;
            let returns = evaluate_policy(env.as_ref(), &learner.actors, &eval_seeds[eval_idx])?;
            let (mean, std) = mean_std(&returns);
            curve.push(CurvePoint {
                step: step + 1,
                mean_return: mean,
                std_return: std,
            });
            timer.stop_into(&mut timing.env);
        }
    }

    if let Some(w) = gate_csv.as_mut() {
        w.flush()?;
    }
    let (final_return, best_return, auc_return) = curve_metrics(&curve);
    write_learning_curve(&out_dir.join("learning_curve.csv"), &curve)?;
    std::fs::write(out_dir.join("run_config.txt"), config.to_key_values())?;

    let checkpoint_dir = out_dir.join("checkpoint");
    save_checkpoint(
        &checkpoint_dir,
        config,
        &learner,
        forward_model.as_ref(),
        &feature_stats,
        &score_stats,
        &advantage_stats,
        config.total_env_steps,
        &[
            (StreamKind::EnvReset, env_reset_rng.get_word_pos()),
            (StreamKind::Exploration, exploration_rng.get_word_pos()),
            (StreamKind::Counterfactual, cf_rng.get_word_pos()),
            (StreamKind::BatchSampling, batch_rng.get_word_pos()),
            (StreamKind::Corruption, corruption_rng.get_word_pos()),
        ],
    )?;

    let wall_seconds = wall_start.elapsed().as_secs_f64();
    let artifacts = RunArtifacts {
        config: config.clone(),
        out_dir: out_dir.to_path_buf(),
        curve,
        final_return,
        best_return,
        auc_return,
        wall_seconds,
        timing,
        counters: counters.snapshot(),
        max_team_intrinsic,
        fm_loss_last,
        learner,
        forward_model,
        feature_stats,
        score_stats,
        advantage_stats,
    };
    write_metrics_json(&out_dir.join("metrics.json"), &artifacts)?;
    Ok(artifacts)
}

/// Intrinsic-reward computation for one sampled batch: branch rollouts and
/// effect scores, then the advantage gate and per-agent reward composition.
/// Running statistics are read frozen and committed once at the end.
#[allow(clippy::too_many_arguments)]
fn compute_shaped_rewards(
    env: &dyn Environment,
    fm: &ForwardModel,
    learner: &Learner,
    config: &RunConfig,
    effect_cfg: &EffectConfig,
    buffer: &ReplayBuffer,
    idx: &[usize],
    feature_stats: &mut RunningStats,
    score_stats: &mut RunningStats,
    advantage_stats: &mut RunningStats,
    cf_rng: &mut ChaCha8Rng,
    corruption_rng: &mut ChaCha8Rng,
    counters: &Counters,
    timing: &mut TimingBuckets,
    max_team_intrinsic: &mut f64,
    gate_csv: Option<&mut std::io::BufWriter<std::fs::File>>,
    update_count: u64,
) -> Result<ShapedRewards> {
    let num_agents = env.num_agents();
    let batch = idx.len();

    let timer = BucketTimer::start();
    let states: Vec<&[f64]> = idx.iter().map(|&i| buffer.get(i).state.as_slice()).collect();
    let actions: Vec<&crate::env::JointAction> = idx.iter().map(|&i| &buffer.get(i).action).collect();
    let effects = batch_action_effects(
        env,
        fm,
        &learner.actors,
        effect_cfg,
        feature_stats,
        score_stats,
        &states,
        &actions,
        cf_rng,
        counters,
        Some((config.fm_corruption, corruption_rng)),
    )?;
    timer.stop_into(&mut timing.effect);

    let timer = BucketTimer::start();
    let mut state_mat = Array2::zeros((batch, env.state_dim()));
    let mut next_mat = Array2::zeros((batch, env.state_dim()));
    for (row, &i) in idx.iter().enumerate() {
        let t = buffer.get(i);
        state_mat
            .row_mut(row)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&t.state);
        next_mat
            .row_mut(row)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&t.next_state);
    }
    let v_state = learner.state_values(&state_mat)?;
    let v_next = learner.state_values(&next_mat)?;
    let mut advantages = Vec::with_capacity(batch);
    let mut values = Vec::with_capacity(batch);
    let mut kappa_sum = 0.0;
    let mut kappa_low = 0usize;
    let mut kappa_high = 0usize;
    let mut r_int_sum = 0.0;
    for (row, &i) in idx.iter().enumerate() {
        let t = buffer.get(i);
        let advantage =
            extrinsic_advantage(t.reward_ext, v_state[row], v_next[row], config.gamma, t.terminal);
        advantages.push(advantage);
        let kappa = if config.method.uses_gate() {
            gate(advantage, advantage_stats, config.gate_temperature)
        } else {
            1.0
        };
        kappa_sum += kappa;
        if kappa < 0.1 {
            kappa_low += 1;
        }
        if kappa > 0.9 {
            kappa_high += 1;
        }
        let mut row_rewards = Vec::with_capacity(num_agents);
        let mut team_intrinsic = 0.0;
        for agent in 0..num_agents {
            let r_int = intrinsic_reward(kappa, effects.scaled[[row, agent]], config.lambda_int);
            team_intrinsic += r_int;
            r_int_sum += r_int;
            row_rewards.push(compose_total(t.reward_ext, r_int));
        }
        if team_intrinsic > *max_team_intrinsic {
            *max_team_intrinsic = team_intrinsic;
        }
        values.push(row_rewards);
    }

    // Commit the running statistics once, after all frozen reads.
    let feature_rows: Vec<&[f64]> = idx
        .iter()
        .flat_map(|&i| {
            let s = &buffer.get(i).state;
            (0..num_agents).map(move |a| &s[env.agent_block(a)])
        })
        .collect();
    feature_stats.update_batch(feature_rows);
    let raw_scores: Vec<f64> = effects.raw.iter().copied().collect();
    score_stats.update_batch_scalar(&raw_scores);
    if config.method.uses_gate() {
        advantage_stats.update_batch_scalar(&advantages);
    }

    if let Some(w) = gate_csv {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6}",
            update_count,
            kappa_sum / batch as f64,
            kappa_low as f64 / batch as f64,
            kappa_high as f64 / batch as f64,
            r_int_sum / (batch * num_agents) as f64
        )?;
    }
    timer.stop_into(&mut timing.gate);
    Ok(ShapedRewards::new(values))
}

/// Writes the flat metrics summary.
fn write_metrics_json(path: &Path, artifacts: &RunArtifacts) -> Result<()> {
    let mut map = BTreeMap::new();
    let c = &artifacts.config;
    map.insert("task".to_string(), serde_json::json!(c.task.to_string()));
    map.insert("method".to_string(), serde_json::json!(c.method.to_string()));
    map.insert("seed".to_string(), serde_json::json!(c.seed));
    map.insert("final_return".to_string(), serde_json::json!(artifacts.final_return));
    map.insert("best_return".to_string(), serde_json::json!(artifacts.best_return));
    map.insert("auc_return".to_string(), serde_json::json!(artifacts.auc_return));
    map.insert("wall_seconds".to_string(), serde_json::json!(artifacts.wall_seconds));
    map.insert("time_env".to_string(), serde_json::json!(artifacts.timing.env));
    map.insert("time_backbone".to_string(), serde_json::json!(artifacts.timing.backbone));
    map.insert("time_fm".to_string(), serde_json::json!(artifacts.timing.fm));
    map.insert("time_effect".to_string(), serde_json::json!(artifacts.timing.effect));
    map.insert("time_gate".to_string(), serde_json::json!(artifacts.timing.gate));
    let total = artifacts.timing.sum();
    let overhead = if total > 0.0 {
        (artifacts.timing.fm + artifacts.timing.effect + artifacts.timing.gate) / total
    } else {
        0.0
    };
    map.insert("effect_path_fraction".to_string(), serde_json::json!(overhead));
    map.insert(
        "branch_sets_built".to_string(),
        serde_json::json!(artifacts.counters.branch_sets),
    );
    map.insert(
        "model_predictions".to_string(),
        serde_json::json!(artifacts.counters.model_predictions),
    );
    map.insert(
        "shaped_reads_in_ext_value".to_string(),
        serde_json::json!(artifacts.counters.shaped_reads_in_ext_value),
    );
    map.insert(
        "max_team_intrinsic_per_step".to_string(),
        serde_json::json!(artifacts.max_team_intrinsic),
    );
    map.insert(
        "discounted_intrinsic_bound".to_string(),
        serde_json::json!(crate::gate::discounted_intrinsic_bound(
            c.num_agents,
            c.lambda_int,
            c.c_max,
            c.gamma
        )),
    );
    map.insert("fm_loss_last".to_string(), serde_json::json!(artifacts.fm_loss_last));
    let text = serde_json::to_string_pretty(&map)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Checkpoint manifest: config, step count, stream states, running stats.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub step_count: u64,
    /// (stream, word position split into low/high u64 halves)
    pub stream_positions: Vec<(StreamKind, u64, u64)>,
    pub feature_stats: RunningStats,
    pub score_stats: RunningStats,
    pub advantage_stats: RunningStats,
    pub has_forward_model: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    config: &RunConfig,
    learner: &Learner,
    forward_model: Option<&ForwardModel>,
    feature_stats: &RunningStats,
    score_stats: &RunningStats,
    advantage_stats: &RunningStats,
    step_count: u64,
    stream_positions: &[(StreamKind, u128)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, actor) in learner.actors.iter().enumerate() {
        actor.save(dir.join(format!("actor_{i}.bin")))?;
        learner.actor_targets[i].save(dir.join(format!("actor_target_{i}.bin")))?;
        learner.critics[i].save(dir.join(format!("critic_{i}.bin")))?;
        learner.critic_targets[i].save(dir.join(format!("critic_target_{i}.bin")))?;
    }
    learner.value_ext.save(dir.join("value_ext.bin"))?;
    learner
        .value_ext_target
        .save(dir.join("value_ext_target.bin"))?;
    if let Some(fm) = forward_model {
        fm.net().save(dir.join("forward_model.bin"))?;
    }
    let manifest = Manifest {
        config: config.clone(),
        step_count,
        stream_positions: stream_positions
            .iter()
            .map(|(k, pos)| (*k, *pos as u64, (*pos >> 64) as u64))
            .collect(),
        feature_stats: feature_stats.clone(),
        score_stats: score_stats.clone(),
        advantage_stats: advantage_stats.clone(),
        has_forward_model: forward_model.is_some(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Loaded checkpoint pieces needed by evaluation and diagnostics.
pub struct Checkpoint {
    pub manifest: Manifest,
    pub actors: Vec<Mlp>,
    pub forward_model: Option<ForwardModel>,
}

impl Manifest {
    pub fn stream_position(&self, kind: StreamKind) -> Option<u128> {
        self.stream_positions
            .iter()
            .find(|(k, _, _)| *k == kind)
            .map(|(_, lo, hi)| (*hi as u128) << 64 | *lo as u128)
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let env = manifest.config.make_env()?;
    let mut actors = Vec::new();
    for i in 0..env.num_agents() {
        actors.push(Mlp::load(dir.join(format!("actor_{i}.bin")))?);
    }
    let forward_model = if manifest.has_forward_model {
        let net = Mlp::load(dir.join("forward_model.bin"))?;
        Some(ForwardModel::from_net(
            net,
            env.state_dim(),
            2 * env.num_agents(),
        )?)
    } else {
        None
    };
    Ok(Checkpoint {
        manifest,
        actors,
        forward_model,
    })
}

/// Evaluation result with the instrumentation proof that the effect path
/// never ran.
pub struct EvaluationReport {
    pub mean_return: f64,
    pub std_return: f64,
    pub per_episode: Vec<f64>,
    pub counters: CounterSnapshot,
}

/// Deterministic evaluation of a checkpoint: noise-free actors, a fixed eval
/// seed stream disjoint from training streams, and no branch machinery on
/// the code path (proved by the returned counters).
pub fn evaluate(checkpoint_dir: &Path, episodes: u32, seed: u64) -> Result<EvaluationReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be >= 1".into()));
    }
    let checkpoint = load_checkpoint(checkpoint_dir)?;
    let env = checkpoint.manifest.config.make_env()?;
    let counters = Counters::new();
    let mut eval_rng = derive_stream(seed, StreamKind::EvalReset);
    let episode_seeds: Vec<u64> = (0..episodes).map(|_| eval_rng.next_u64()).collect();
    let per_episode = evaluate_policy(env.as_ref(), &checkpoint.actors, &episode_seeds)?;
    let (mean_return, std_return) = mean_std(&per_episode);
    Ok(EvaluationReport {
        mean_return,
        std_return,
        per_episode,
        counters: counters.snapshot(),
    })
}

/// Gaussian exploration noise sample helper shared by tests.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
