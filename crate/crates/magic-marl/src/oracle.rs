//! Exactly simulable worlds for theory verification.
//!
//! [`ExactTwin`] reuses an environment's true transition function as a
//! drop-in [`Dynamics`] for the rollout engine, giving ground-truth branch
//! futures. [`DelayedChain`] is a tiny two-agent deterministic world where
//! the source agent's action reaches its teammate only after a configurable
//! delay: the construction behind the one-step-blindness argument, and also a
//! trainable task for the horizon studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{mix_seed, Environment, JointAction};
use crate::forward_model::{rollout_branch, BranchRollout, BranchTag, Dynamics};
use crate::instrument::Counters;
use crate::nn::Mlp;
use crate::Result;

/// True environment dynamics exposed as a rollout [`Dynamics`].
pub struct ExactTwin<'a> {
    env: &'a dyn Environment,
}

impl<'a> ExactTwin<'a> {
    pub fn new(env: &'a dyn Environment) -> Self {
        ExactTwin { env }
    }
}

impl Dynamics for ExactTwin<'_> {
    fn predict_next(&self, state: &[f64], action: &JointAction) -> Vec<f64> {
        self.env.transition_vec(state, action).0
    }
}

/// Ground-truth H-step closed-loop rollout under the true dynamics, with the
/// same branch construction as the learned-model path.
pub fn exact_rollout(
    env: &dyn Environment,
    start: &[f64],
    first_action: &JointAction,
    policies: &[Mlp],
    horizon: usize,
    counters: &Counters,
) -> Result<BranchRollout> {
    let twin = ExactTwin::new(env);
    rollout_branch(
        &twin,
        policies,
        env,
        start,
        first_action,
        horizon,
        BranchTag::Factual,
        counters,
    )
}

/// Configuration of the delayed-effect chain world.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DelayedChainConfig {
    /// Steps between the source action and its first visible effect on the
    /// teammate. Must be >= 1.
    pub delay: u32,
    pub episode_length: u32,
    /// Teammate position advance per activated step.
    pub step_size: f64,
    /// Teammate x position at which the team reward turns on.
    pub target: f64,
    pub half_extent: f64,
    pub seed: u64,
}

impl Default for DelayedChainConfig {
    fn default() -> Self {
        DelayedChainConfig {
            delay: 2,
            episode_length: 25,
            step_size: 0.1,
            target: 1.0,
            half_extent: 4.0,
            seed: 0,
        }
    }
}

/// Two-agent deterministic chain world.
///
/// Layout: agent a (the source) occupies block `0..4` and moves under the
/// usual damped integrator; agent b (the teammate) occupies block `4..8`,
/// with a 1-D position that advances by `step_size` exactly when a flag
/// latched `delay` steps earlier is set. The pending flags live at the tail
/// of the state vector, so the vector stays Markov. Agent b's own action is
/// ignored by the dynamics.
///
/// The flag latched at step t is `1` iff the source agent's x-acceleration is
/// positive, so teammate features at `t+1 .. t+delay-1` are invariant to the
/// source action while features at `t+delay` branch on it.
#[derive(Debug, Clone)]
pub struct DelayedChain {
    pub config: DelayedChainConfig,
}

impl DelayedChain {
    pub fn new(config: DelayedChainConfig) -> Result<Self> {
        if config.delay < 1 {
            return Err(crate::Error::InvalidArgument("delay must be >= 1".into()));
        }
        Ok(DelayedChain { config })
    }

    /// Convenience constructor used by the theory tests.
    pub fn with_delay(delay: u32) -> Self {
        DelayedChain {
            config: DelayedChainConfig {
                delay,
                ..DelayedChainConfig::default()
            },
        }
    }

    fn register_len(&self) -> usize {
        (self.config.delay - 1) as usize
    }

    /// The discretized source-action grid used for exhaustive theory checks.
    pub fn source_action_grid() -> [f64; 5] {
        [-1.0, -0.5, 0.0, 0.5, 1.0]
    }
}

const CHAIN_DT: f64 = 0.1;
const CHAIN_DAMPING: f64 = 0.25;
const CHAIN_GAIN: f64 = 5.0;
const CHAIN_MAX_SPEED: f64 = 1.0;

impl Environment for DelayedChain {
    fn num_agents(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        8 + self.register_len()
    }

    fn obs_dim(&self) -> usize {
        // own pos+vel, relative position of the other agent.
        6
    }

    fn episode_length(&self) -> u32 {
        self.config.episode_length
    }

    fn reset_vec(&self, episode_seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, episode_seed));
        let mut state = vec![0.0; self.state_dim()];
        state[0] = rng.random_range(-0.5..=0.5);
        state[1] = rng.random_range(-0.5..=0.5);
        // teammate starts at the origin with zero velocity; register clear.
        state
    }

    fn transition_vec(&self, state: &[f64], action: &JointAction) -> (Vec<f64>, f64) {
        let cfg = &self.config;
        let h = cfg.half_extent;
        let mut next = state.to_vec();
        // Source agent: damped integrator on its own action.
        let accel = action.0[0];
        let mut v = [
            state[2] * (1.0 - CHAIN_DAMPING) + accel[0] * CHAIN_GAIN * CHAIN_DT,
            state[3] * (1.0 - CHAIN_DAMPING) + accel[1] * CHAIN_GAIN * CHAIN_DT,
        ];
        let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if speed > CHAIN_MAX_SPEED {
            v[0] *= CHAIN_MAX_SPEED / speed;
            v[1] *= CHAIN_MAX_SPEED / speed;
        }
        next[0] = (state[0] + v[0] * CHAIN_DT).clamp(-h, h);
        next[1] = (state[1] + v[1] * CHAIN_DT).clamp(-h, h);
        next[2] = v[0];
        next[3] = v[1];
        // Latch-and-delay plumbing. The freshly latched flag enters the tail
        // of the register; the head is the flag latched `delay` steps ago.
        let new_flag = if accel[0] > 0.0 { 1.0 } else { 0.0 };
        let reg = self.register_len();
        let applied = if reg == 0 { new_flag } else { state[8] };
        for i in 0..reg.saturating_sub(1) {
            next[8 + i] = state[8 + i + 1];
        }
        if reg > 0 {
            next[8 + reg - 1] = new_flag;
        }
        // Teammate: 1-D scripted advance when the due flag is set.
        if applied > 0.5 {
            next[4] = (state[4] + cfg.step_size).clamp(-h, h);
        } else {
            next[4] = state[4];
        }
        next[5] = 0.0;
        next[6] = 0.0;
        next[7] = 0.0;
        let reward = if next[4] >= cfg.target { 10.0 } else { 0.0 };
        (next, reward)
    }

    fn observation_vec(&self, state: &[f64], agent: usize) -> Vec<f64> {
        assert!(agent < 2, "unknown agent id {agent}");
        let own = 4 * agent;
        let other = 4 * (1 - agent);
        vec![
            state[own],
            state[own + 1],
            state[own + 2],
            state[own + 3],
            state[other] - state[own],
            state[other + 1] - state[own + 1],
        ]
    }

    fn clip_state_vec(&self, state: &mut [f64]) {
        let h = self.config.half_extent;
        for base in [0usize, 4] {
            state[base] = state[base].clamp(-h, h);
            state[base + 1] = state[base + 1].clamp(-h, h);
            let v = [state[base + 2], state[base + 3]];
            let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if speed > CHAIN_MAX_SPEED {
                state[base + 2] = v[0] * CHAIN_MAX_SPEED / speed;
                state[base + 3] = v[1] * CHAIN_MAX_SPEED / speed;
            }
        }
        for i in 8..self.state_dim() {
            state[i] = state[i].clamp(0.0, 1.0);
        }
    }

    fn agent_block(&self, agent: usize) -> std::ops::Range<usize> {
        assert!(agent < 2);
        4 * agent..4 * agent + 4
    }

    fn team_reward_bounds(&self) -> (f64, f64) {
        (0.0, 10.0)
    }
}
