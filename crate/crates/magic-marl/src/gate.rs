//! Extrinsic team-advantage gate and reward composition.
//!
//! The gate input is the one-step TD advantage computed from the
//! extrinsic-only value network, normalized with running batch statistics and
//! squashed through a temperature sigmoid into `[0, 1]`. It is shared by all
//! agents at a transition; agent specificity enters only through the action
//! effect score. Intrinsic rewards are composed per agent and never averaged
//! across agents.

use crate::stats::RunningStats;

/// Gate and reward-composition hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GateConfig {
    /// Intrinsic reward weight λ.
    pub lambda_int: f64,
    /// Gate temperature τ.
    pub temperature: f64,
    /// Discount used by the advantage bootstrap.
    pub gamma: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            lambda_int: 0.05,
            temperature: 1.0,
            gamma: 0.95,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One-step extrinsic team advantage
/// `A = r_ext + γ·(1-done)·V(s') - V(s)`.
///
/// Terminal transitions drop the bootstrap term.
pub fn extrinsic_advantage(r_ext: f64, v_state: f64, v_next: f64, gamma: f64, done: bool) -> f64 {
    let bootstrap = if done { 0.0 } else { gamma * v_next };
    r_ext + bootstrap - v_state
}

/// `κ = sigmoid(((A - μ_A) / (σ_A + ε)) / τ)`, always in `[0, 1]`.
pub fn gate(advantage: f64, stats: &RunningStats, temperature: f64) -> f64 {
    debug_assert!(temperature > 0.0);
    sigmoid(stats.normalize_scalar(advantage) / temperature)
}

/// `r_int = λ · κ · c`; bounded in `[0, λ·c_max]` by construction.
pub fn intrinsic_reward(kappa: f64, effect_score: f64, lambda_int: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&kappa));
    debug_assert!(effect_score >= 0.0);
    lambda_int * kappa * effect_score
}

/// `r_total = r_ext + r_int`, per agent.
pub fn compose_total(r_ext: f64, r_int: f64) -> f64 {
    r_ext + r_int
}

/// Upper bound on the total discounted intrinsic return summed over `n`
/// agents: `n·λ·c_max / (1-γ)`.
pub fn discounted_intrinsic_bound(num_agents: usize, lambda_int: f64, c_max: f64, gamma: f64) -> f64 {
    num_agents as f64 * lambda_int * c_max / (1.0 - gamma)
}
