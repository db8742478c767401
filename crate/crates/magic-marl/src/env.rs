//! Deterministic 2-D particle world with two cooperative tasks.
//!
//! Dynamics are a damped double integrator on a clamped box. `Predator Prey`
//! has `num_agents` learning predators chasing one scripted, faster prey and
//! pays a sparse shared reward per predator-prey contact. `Cooperative
//! Navigation` has `num_agents` learning agents covering `num_agents` static
//! landmarks under a dense negative-distance reward with collision penalties.
//!
//! All stepping is a pure function of `(state, action, config)`: randomness
//! exists only in `reset`, so replays are byte-identical. The centralized
//! state vector has a fixed canonical layout (learning agents first, each as
//! position then velocity, then prey or landmarks), which the rollout and
//! effect machinery relies on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;

use crate::{Error, Result};

/// Task selector for the particle world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParticleTask {
    PredatorPrey,
    CooperativeNavigation,
}

/// Static configuration of the particle world.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EnvConfig {
    pub task: ParticleTask,
    pub num_agents: usize,
    pub episode_length: u32,
    pub dt: f64,
    pub damping: f64,
    pub accel_gain: f64,
    pub max_speed: f64,
    pub prey_max_speed: f64,
    pub world_half_extent: f64,
    pub collision_radius: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn predator_prey(num_agents: usize) -> Self {
        EnvConfig {
            task: ParticleTask::PredatorPrey,
            num_agents,
            ..EnvConfig::default()
        }
    }

    pub fn cooperative_navigation(num_agents: usize) -> Self {
        EnvConfig {
            task: ParticleTask::CooperativeNavigation,
            num_agents,
            ..EnvConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents < 2 {
            return Err(Error::InvalidArgument("num_agents must be >= 2".into()));
        }
        if self.episode_length < 1 {
            return Err(Error::InvalidArgument("episode_length must be >= 1".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidArgument("dt must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidArgument("damping must be in [0,1)".into()));
        }
        Ok(())
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            task: ParticleTask::PredatorPrey,
            num_agents: 5,
            episode_length: 25,
            dt: 0.1,
            damping: 0.25,
            accel_gain: 5.0,
            max_speed: 1.0,
            prey_max_speed: 1.3,
            world_half_extent: 1.0,
            collision_radius: 0.15,
            seed: 0,
        }
    }
}

/// Role of one entity in the world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityRole {
    Agent,
    Prey,
    Landmark,
}

/// Full simulator state: entity kinematics plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub roles: Vec<EntityRole>,
    pub step_index: u32,
}

/// Per-learning-agent acceleration commands, each component in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAction(pub Vec<[f64; 2]>);

impl JointAction {
    pub fn zeros(num_agents: usize) -> Self {
        JointAction(vec![[0.0, 0.0]; num_agents])
    }

    pub fn num_agents(&self) -> usize {
        self.0.len()
    }

    /// Flattened `[a0x, a0y, a1x, a1y, ...]` view used by critics and the
    /// forward model.
    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::Shape("flat action length must be even".into()));
        }
        Ok(JointAction(
            flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        ))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.0.iter().enumerate() {
            if a.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "action for agent {i} out of [-1,1]: {a:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub next_state: WorldState,
    pub team_reward: f64,
    pub observations: Vec<Vec<f64>>,
    pub done: bool,
}

/// Vector-level environment interface shared by the learner, the rollout
/// engine, the effect engine, and the diagnostics.
///
/// The centralized state *is* the Markov state for these worlds; episode
/// bookkeeping (step counts, done) lives with the caller.
pub trait Environment: Send + Sync {
    fn num_agents(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize {
        2
    }
    fn episode_length(&self) -> u32;
    /// Fresh episode start state as a centralized vector.
    fn reset_vec(&self, episode_seed: u64) -> Vec<f64>;
    /// True dynamics plus team reward; pure in `(state, action)`.
    fn transition_vec(&self, state: &[f64], action: &JointAction) -> (Vec<f64>, f64);
    /// Local observation of `agent` built from a centralized vector.
    fn observation_vec(&self, state: &[f64], agent: usize) -> Vec<f64>;
    /// Allocation-free variant of [`Environment::observation_vec`]; `out`
    /// must have length `obs_dim`.
    fn observation_into(&self, state: &[f64], agent: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.observation_vec(state, agent));
    }
    /// Clamps positions/velocities to their valid ranges in place.
    fn clip_state_vec(&self, state: &mut [f64]);
    /// Slice of the centralized layout holding agent `i`'s features
    /// (position then velocity).
    fn agent_block(&self, agent: usize) -> std::ops::Range<usize>;
    /// Inclusive team-reward range for one step, used by property tests.
    fn team_reward_bounds(&self) -> (f64, f64);
}

/// The particle world simulator.
#[derive(Debug, Clone)]
pub struct ParticleEnv {
    pub config: EnvConfig,
}

impl ParticleEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(ParticleEnv { config })
    }

    fn num_landmarks(&self) -> usize {
        match self.config.task {
            ParticleTask::PredatorPrey => 0,
            ParticleTask::CooperativeNavigation => self.config.num_agents,
        }
    }

    fn has_prey(&self) -> bool {
        self.config.task == ParticleTask::PredatorPrey
    }

    /// Entity placement for a fresh episode: uniform within 80% of the world
    /// extent, zero velocities. Landmarks are sorted into canonical order.
    pub fn reset(&self, episode_seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, episode_seed));
        let extent = 0.8 * self.config.world_half_extent;
        let n = self.config.num_agents;
        let mut positions = Vec::new();
        let mut roles = Vec::new();
        for _ in 0..n {
            positions.push([
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
            ]);
            roles.push(EntityRole::Agent);
        }
        if self.has_prey() {
            positions.push([
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
            ]);
            roles.push(EntityRole::Prey);
        }
        let mut landmarks: Vec<[f64; 2]> = (0..self.num_landmarks())
            .map(|_| {
                [
                    rng.random_range(-extent..=extent),
                    rng.random_range(-extent..=extent),
                ]
            })
            .collect();
        landmarks.sort_by(|a, b| a.partial_cmp(b).expect("finite positions"));
        for p in landmarks {
            positions.push(p);
            roles.push(EntityRole::Landmark);
        }
        let count = positions.len();
        WorldState {
            positions,
            velocities: vec![[0.0, 0.0]; count],
            roles,
            step_index: 0,
        }
    }

    /// One simulator step on the typed state. Errors if the episode is done.
    pub fn step(&self, state: &WorldState, action: &JointAction) -> Result<StepResult> {
        if state.step_index >= self.config.episode_length {
            return Err(Error::Usage(format!(
                "stepping a done state (step {} of {})",
                state.step_index, self.config.episode_length
            )));
        }
        if action.num_agents() != self.config.num_agents {
            return Err(Error::Shape(format!(
                "joint action has {} agents, env has {}",
                action.num_agents(),
                self.config.num_agents
            )));
        }
        action.validate()?;
        let vec = self.centralized_state(state);
        let (next_vec, team_reward) = self.transition_vec(&vec, action);
        let next_state = self.state_from_vec(&next_vec, state.step_index + 1);
        let observations = (0..self.config.num_agents)
            .map(|i| self.observation_vec(&next_vec, i))
            .collect();
        let done = next_state.step_index >= self.config.episode_length;
        Ok(StepResult {
            next_state,
            team_reward,
            observations,
            done,
        })
    }

    /// Canonical centralized layout: per learning agent `(pos, vel)`, then
    /// the prey `(pos, vel)` or landmark positions in sorted order.
    pub fn centralized_state(&self, state: &WorldState) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.state_dim());
        for (idx, role) in state.roles.iter().enumerate() {
            if *role == EntityRole::Agent {
                out.extend_from_slice(&state.positions[idx]);
                out.extend_from_slice(&state.velocities[idx]);
            }
        }
        for (idx, role) in state.roles.iter().enumerate() {
            if *role == EntityRole::Prey {
                out.extend_from_slice(&state.positions[idx]);
                out.extend_from_slice(&state.velocities[idx]);
            }
        }
        let mut landmarks: Vec<[f64; 2]> = state
            .roles
            .iter()
            .zip(&state.positions)
            .filter(|(r, _)| **r == EntityRole::Landmark)
            .map(|(_, p)| *p)
            .collect();
        landmarks.sort_by(|a, b| a.partial_cmp(b).expect("finite positions"));
        for p in landmarks {
            out.extend_from_slice(&p);
        }
        debug_assert_eq!(out.len(), self.state_dim());
        out
    }

    /// Rebuilds a typed state from a canonical centralized vector.
    pub fn state_from_vec(&self, vec: &[f64], step_index: u32) -> WorldState {
        assert_eq!(vec.len(), self.state_dim());
        let n = self.config.num_agents;
        let mut positions = Vec::new();
        let mut velocities = Vec::new();
        let mut roles = Vec::new();
        for i in 0..n {
            positions.push([vec[4 * i], vec[4 * i + 1]]);
            velocities.push([vec[4 * i + 2], vec[4 * i + 3]]);
            roles.push(EntityRole::Agent);
        }
        if self.has_prey() {
            let base = 4 * n;
            positions.push([vec[base], vec[base + 1]]);
            velocities.push([vec[base + 2], vec[base + 3]]);
            roles.push(EntityRole::Prey);
        }
        for l in 0..self.num_landmarks() {
            let base = 4 * n + 2 * l;
            positions.push([vec[base], vec[base + 1]]);
            velocities.push([0.0, 0.0]);
            roles.push(EntityRole::Landmark);
        }
        WorldState {
            positions,
            velocities,
            roles,
            step_index,
        }
    }

    /// Typed-state observation (same layout as [`Environment::observation_vec`]).
    pub fn local_observation(&self, state: &WorldState, agent: usize) -> Vec<f64> {
        let vec = self.centralized_state(state);
        self.observation_vec(&vec, agent)
    }
}

/// splitmix64-style mixing for combining seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clamp_speed(v: [f64; 2], cap: f64) -> [f64; 2] {
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if speed > cap && speed > 0.0 {
        let s = cap / speed;
        [v[0] * s, v[1] * s]
    } else {
        v
    }
}

impl Environment for ParticleEnv {
    fn num_agents(&self) -> usize {
        self.config.num_agents
    }

    fn state_dim(&self) -> usize {
        4 * self.config.num_agents
            + if self.has_prey() { 4 } else { 0 }
            + 2 * self.num_landmarks()
    }

    fn obs_dim(&self) -> usize {
        // own pos+vel, relative positions of other agents, then prey or
        // landmark relative positions.
        4 + 2 * (self.config.num_agents - 1)
            + if self.has_prey() { 2 } else { 0 }
            + 2 * self.num_landmarks()
    }

    fn episode_length(&self) -> u32 {
        self.config.episode_length
    }

    fn reset_vec(&self, episode_seed: u64) -> Vec<f64> {
        let state = self.reset(episode_seed);
        self.centralized_state(&state)
    }

    fn transition_vec(&self, state: &[f64], action: &JointAction) -> (Vec<f64>, f64) {
        let cfg = &self.config;
        let n = cfg.num_agents;
        debug_assert_eq!(state.len(), self.state_dim());
        debug_assert_eq!(action.num_agents(), n);
        let h = cfg.world_half_extent;
        let mut next = state.to_vec();
        for (i, accel) in action.0.iter().enumerate() {
            let base = 4 * i;
            let mut v = [
                state[base + 2] * (1.0 - cfg.damping) + accel[0] * cfg.accel_gain * cfg.dt,
                state[base + 3] * (1.0 - cfg.damping) + accel[1] * cfg.accel_gain * cfg.dt,
            ];
            v = clamp_speed(v, cfg.max_speed);
            next[base] = (state[base] + v[0] * cfg.dt).clamp(-h, h);
            next[base + 1] = (state[base + 1] + v[1] * cfg.dt).clamp(-h, h);
            next[base + 2] = v[0];
            next[base + 3] = v[1];
        }
        if self.has_prey() {
            let base = 4 * n;
            let prey_pos = [state[base], state[base + 1]];
            let accel = prey_flee_accel(state, n, prey_pos, h);
            let mut v = [
                state[base + 2] * (1.0 - cfg.damping) + accel[0] * cfg.accel_gain * cfg.dt,
                state[base + 3] * (1.0 - cfg.damping) + accel[1] * cfg.accel_gain * cfg.dt,
            ];
            v = clamp_speed(v, cfg.prey_max_speed);
            next[base] = (prey_pos[0] + v[0] * cfg.dt).clamp(-h, h);
            next[base + 1] = (prey_pos[1] + v[1] * cfg.dt).clamp(-h, h);
            next[base + 2] = v[0];
            next[base + 3] = v[1];
        }
        let reward = self.team_reward(&next);
        (next, reward)
    }

    fn observation_vec(&self, state: &[f64], agent: usize) -> Vec<f64> {
        let n = self.config.num_agents;
        assert!(agent < n, "unknown agent id {agent}");
        let own = 4 * agent;
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.extend_from_slice(&state[own..own + 4]);
        for other in 0..n {
            if other == agent {
                continue;
            }
            obs.push(state[4 * other] - state[own]);
            obs.push(state[4 * other + 1] - state[own + 1]);
        }
        if self.has_prey() {
            let base = 4 * n;
            obs.push(state[base] - state[own]);
            obs.push(state[base + 1] - state[own + 1]);
        }
        for l in 0..self.num_landmarks() {
            let base = 4 * n + 2 * l;
            obs.push(state[base] - state[own]);
            obs.push(state[base + 1] - state[own + 1]);
        }
        obs
    }

    fn clip_state_vec(&self, state: &mut [f64]) {
        let cfg = &self.config;
        let n = cfg.num_agents;
        let h = cfg.world_half_extent;
        for i in 0..n {
            let base = 4 * i;
            state[base] = state[base].clamp(-h, h);
            state[base + 1] = state[base + 1].clamp(-h, h);
            let v = clamp_speed([state[base + 2], state[base + 3]], cfg.max_speed);
            state[base + 2] = v[0];
            state[base + 3] = v[1];
        }
        if self.has_prey() {
            let base = 4 * n;
            state[base] = state[base].clamp(-h, h);
            state[base + 1] = state[base + 1].clamp(-h, h);
            let v = clamp_speed([state[base + 2], state[base + 3]], cfg.prey_max_speed);
            state[base + 2] = v[0];
            state[base + 3] = v[1];
        }
        for l in 0..self.num_landmarks() {
            let base = 4 * n + 2 * l;
            state[base] = state[base].clamp(-h, h);
            state[base + 1] = state[base + 1].clamp(-h, h);
        }
    }

    fn agent_block(&self, agent: usize) -> std::ops::Range<usize> {
        assert!(agent < self.config.num_agents);
        4 * agent..4 * agent + 4
    }

    fn team_reward_bounds(&self) -> (f64, f64) {
        let n = self.config.num_agents as f64;
        match self.config.task {
            ParticleTask::PredatorPrey => (0.0, 10.0 * n),
            ParticleTask::CooperativeNavigation => {
                let diag = 2.0 * std::f64::consts::SQRT_2 * self.config.world_half_extent;
                let pairs = n * (n - 1.0) / 2.0;
                (-(n * diag) - pairs, 0.0)
            }
        }
    }
}

impl ParticleEnv {
    fn team_reward(&self, state: &[f64]) -> f64 {
        let cfg = &self.config;
        let n = cfg.num_agents;
        match cfg.task {
            ParticleTask::PredatorPrey => {
                let base = 4 * n;
                let prey = [state[base], state[base + 1]];
                let mut reward = 0.0;
                for i in 0..n {
                    let dx = state[4 * i] - prey[0];
                    let dy = state[4 * i + 1] - prey[1];
                    if (dx * dx + dy * dy).sqrt() < cfg.collision_radius {
                        reward += 10.0;
                    }
                }
                reward
            }
            ParticleTask::CooperativeNavigation => {
                let mut reward = 0.0;
                for l in 0..self.num_landmarks() {
                    let base = 4 * n + 2 * l;
                    let lm = [state[base], state[base + 1]];
                    let mut min_dist = f64::INFINITY;
                    for i in 0..n {
                        let dx = state[4 * i] - lm[0];
                        let dy = state[4 * i + 1] - lm[1];
                        min_dist = min_dist.min((dx * dx + dy * dy).sqrt());
                    }
                    reward -= min_dist;
                }
                for i in 0..n {
                    for j in (i + 1)..n {
                        let dx = state[4 * i] - state[4 * j];
                        let dy = state[4 * i + 1] - state[4 * j + 1];
                        if (dx * dx + dy * dy).sqrt() < cfg.collision_radius {
                            reward -= 1.0;
                        }
                    }
                }
                reward
            }
        }
    }
}

/// Scripted prey: accelerate away from the nearest predator at magnitude 1,
/// reflecting the flee direction off walls when running out of room. The
/// reflection ramps continuously across a margin band (outward components
/// reverse smoothly), so the policy stays piecewise-smooth in the state.
fn prey_flee_accel(state: &[f64], num_agents: usize, prey_pos: [f64; 2], half_extent: f64) -> [f64; 2] {
    let mut nearest = [f64::INFINITY, 0.0, 0.0];
    for i in 0..num_agents {
        let dx = prey_pos[0] - state[4 * i];
        let dy = prey_pos[1] - state[4 * i + 1];
        let d2 = dx * dx + dy * dy;
        if d2 < nearest[0] {
            nearest = [d2, dx, dy];
        }
    }
    let mut dir = if nearest[0] > 0.0 {
        let d = nearest[0].sqrt();
        [nearest[1] / d, nearest[2] / d]
    } else {
        [1.0, 0.0]
    };
    let band_start = 0.85 * half_extent;
    let band_end = 0.95 * half_extent;
    for axis in 0..2 {
        if dir[axis] * prey_pos[axis] > 0.0 {
            let depth = ((prey_pos[axis].abs() - band_start) / (band_end - band_start))
                .clamp(0.0, 1.0);
            dir[axis] *= 1.0 - 2.0 * depth;
        }
    }
    let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
    if norm > 1e-9 {
        [dir[0] / norm, dir[1] / norm]
    } else if prey_pos[0] != 0.0 || prey_pos[1] != 0.0 {
        // fully reflected in a corner: head straight for the interior
        let p = (prey_pos[0] * prey_pos[0] + prey_pos[1] * prey_pos[1]).sqrt();
        [-prey_pos[0] / p, -prey_pos[1] / p]
    } else {
        [1.0, 0.0]
    }
}

/// One row of an exported episode trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: u32,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub team_reward: f64,
}

/// Writes episode trace rows as CSV: step index, flattened centralized state,
/// flattened joint action, team reward.
pub fn write_trace_csv(mut w: impl Write, rows: &[TraceRow]) -> std::io::Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut header = vec!["step".to_string()];
    header.extend((0..rows[0].state.len()).map(|i| format!("s{i}")));
    header.extend((0..rows[0].action.len()).map(|i| format!("a{i}")));
    header.push("team_reward".to_string());
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let mut fields = vec![row.step.to_string()];
        fields.extend(row.state.iter().map(|v| format!("{v:.6}")));
        fields.extend(row.action.iter().map(|v| format!("{v:.6}")));
        fields.push(format!("{:.6}", row.team_reward));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
