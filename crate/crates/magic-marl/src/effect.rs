//! Counterfactual branch construction and the multi-step action-effect score.
//!
//! For a source agent at one transition, a branch set pairs the factual
//! first-step joint action with K sampled replacements of only the source
//! action. After the rollout engine fills in the branch futures, teammate
//! features are extracted from each predicted state, normalized with shared
//! running statistics, and compared pairwise between the factual and each
//! counterfactual branch. Distances are averaged over branches, teammates,
//! and weighted horizons into the raw score, which is then scaled by a
//! running std estimate and clipped to `[0, c_max]`.
//!
//! Two code paths produce the same numbers: the per-transition path below
//! (used by tests and diagnostics) and [`batch_action_effects`], which fuses
//! all branch rollouts of a training batch into matrix passes.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

use crate::env::{Environment, JointAction};
use crate::forward_model::{rollout_branch, BranchRollout, BranchTag, Dynamics, ForwardModel};
use crate::instrument::Counters;
use crate::nn::Mlp;
use crate::stats::RunningStats;
use crate::{Error, Result};

/// Componentwise tolerance under which a sampled counterfactual counts as
/// equal to the executed action and is resampled once.
pub const RESAMPLE_TOLERANCE: f64 = 1e-9;

/// Effect-score hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EffectConfig {
    pub horizon: usize,
    /// Number of counterfactual branches K.
    pub branches: usize,
    /// Per-horizon weights; nonnegative, summing to one.
    pub weights: Vec<f64>,
    pub c_max: f64,
}

impl EffectConfig {
    /// Uniform horizon weights.
    pub fn uniform(horizon: usize, branches: usize, c_max: f64) -> Self {
        EffectConfig {
            horizon,
            branches,
            weights: vec![1.0 / horizon as f64; horizon],
            c_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if self.branches < 1 {
            return Err(Error::InvalidArgument("need at least one branch".into()));
        }
        if self.weights.len() != self.horizon {
            return Err(Error::InvalidArgument(
                "need exactly one weight per horizon".into(),
            ));
        }
        if self.weights.iter().any(|w| *w < 0.0)
            || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidArgument(
                "horizon weights must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(())
    }
}

/// One factual branch plus K counterfactual branches for a source agent.
#[derive(Debug, Clone)]
pub struct BranchSet {
    pub source: usize,
    pub start_state: Vec<f64>,
    pub factual_action: JointAction,
    /// Sampled replacements for the source agent's first-step action.
    pub counterfactual_sources: Vec<[f64; 2]>,
    pub factual: Option<BranchRollout>,
    pub counterfactuals: Vec<BranchRollout>,
}

impl BranchSet {
    /// The full joint action of counterfactual branch `k`: the factual joint
    /// action with only the source slot replaced.
    pub fn counterfactual_action(&self, k: usize) -> JointAction {
        let mut action = self.factual_action.clone();
        action.0[self.source] = self.counterfactual_sources[k];
        action
    }

    pub fn branches(&self) -> usize {
        self.counterfactual_sources.len()
    }

    /// Rolls out the factual and every counterfactual branch.
    pub fn fill_rollouts(
        &mut self,
        dynamics: &dyn Dynamics,
        actors: &[Mlp],
        env: &dyn Environment,
        horizon: usize,
        counters: &Counters,
    ) -> Result<()> {
        self.factual = Some(rollout_branch(
            dynamics,
            actors,
            env,
            &self.start_state,
            &self.factual_action,
            horizon,
            BranchTag::Factual,
            counters,
        )?);
        self.counterfactuals.clear();
        for k in 0..self.branches() {
            let action = self.counterfactual_action(k);
            self.counterfactuals.push(rollout_branch(
                dynamics,
                actors,
                env,
                &self.start_state,
                &action,
                horizon,
                BranchTag::Counterfactual(k),
                counters,
            )?);
        }
        Ok(())
    }
}

/// Samples one counterfactual source action uniformly from `[-1,1]^2`,
/// resampling once if it lands on the executed action.
fn sample_counterfactual(executed: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 2] {
    let mut draw = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    let equal = (draw[0] - executed[0]).abs() <= RESAMPLE_TOLERANCE
        && (draw[1] - executed[1]).abs() <= RESAMPLE_TOLERANCE;
    if equal {
        draw = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    }
    draw
}

/// Constructs a branch set (rollouts unfilled): the start state and all
/// non-source actions are copied unchanged; K source replacements are drawn
/// uniformly from the valid action box.
pub fn build_branches(
    state: &[f64],
    action: &JointAction,
    source: usize,
    branches: usize,
    rng: &mut ChaCha8Rng,
    counters: &Counters,
) -> Result<BranchSet> {
    if branches < 1 {
        return Err(Error::InvalidArgument("need K >= 1 branches".into()));
    }
    if source >= action.num_agents() {
        return Err(Error::InvalidArgument(format!(
            "source agent {source} out of range"
        )));
    }
    let executed = action.0[source];
    let counterfactual_sources = (0..branches)
        .map(|_| sample_counterfactual(executed, rng))
        .collect();
    counters.add_branch_sets(1);
    Ok(BranchSet {
        source,
        start_state: state.to_vec(),
        factual_action: action.clone(),
        counterfactual_sources,
        factual: None,
        counterfactuals: Vec::new(),
    })
}

/// Extracts teammate features (position and velocity, per the centralized
/// layout) and normalizes them with the shared running statistics.
pub fn teammate_features(
    env: &dyn Environment,
    state: &[f64],
    teammate: usize,
    stats: &RunningStats,
) -> Result<Vec<f64>> {
    if teammate >= env.num_agents() {
        return Err(Error::InvalidArgument(format!(
            "unknown teammate id {teammate}"
        )));
    }
    let block = env.agent_block(teammate);
    if block.end > state.len() || stats.dim() != block.len() {
        return Err(Error::Shape("feature block out of range".into()));
    }
    Ok(stats.normalize(&state[block]))
}

/// Distances `d[j][h][k]` between factual and counterfactual teammate
/// features, flattened with accessors.
#[derive(Debug, Clone)]
pub struct DistanceTensor {
    pub teammates: Vec<usize>,
    pub horizon: usize,
    pub branches: usize,
    values: Vec<f64>,
}

impl DistanceTensor {
    /// `horizon` is 1-based, matching `d_{j,h}` for `h in 1..=H`.
    fn index(&self, teammate_idx: usize, horizon: usize, branch: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&horizon));
        (teammate_idx * self.horizon + (horizon - 1)) * self.branches + branch
    }

    pub fn get(&self, teammate_idx: usize, horizon: usize, branch: usize) -> f64 {
        self.values[self.index(teammate_idx, horizon, branch)]
    }

    /// `d_{j,h}`: branch-averaged distance for one teammate and horizon.
    pub fn branch_mean(&self, teammate_idx: usize, horizon: usize) -> f64 {
        (0..self.branches)
            .map(|k| self.get(teammate_idx, horizon, k))
            .sum::<f64>()
            / self.branches as f64
    }

    /// Mean over teammates of `d_{j,h}` at one horizon.
    pub fn horizon_mean(&self, horizon: usize) -> f64 {
        if self.teammates.is_empty() {
            return 0.0;
        }
        (0..self.teammates.len())
            .map(|t| self.branch_mean(t, horizon))
            .sum::<f64>()
            / self.teammates.len() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Euclidean distance between two equally long slices.
fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Pairwise normalized teammate-feature distances for a filled branch set.
/// The same statistics are used across all branches.
pub fn branch_distances(
    env: &dyn Environment,
    set: &BranchSet,
    stats: &RunningStats,
) -> Result<DistanceTensor> {
    let factual = set
        .factual
        .as_ref()
        .ok_or_else(|| Error::Usage("branch set has no factual rollout".into()))?;
    if set.counterfactuals.len() != set.branches() {
        return Err(Error::Usage("branch set has unfilled counterfactuals".into()));
    }
    let horizon = factual.horizon();
    let teammates: Vec<usize> = (0..env.num_agents()).filter(|j| *j != set.source).collect();
    let mut values = vec![0.0; teammates.len() * horizon * set.branches()];
    let mut tensor = DistanceTensor {
        teammates,
        horizon,
        branches: set.branches(),
        values: Vec::new(),
    };
    for (t_idx, j) in tensor.teammates.clone().into_iter().enumerate() {
        for h in 1..=horizon {
            let z_factual = teammate_features(env, factual.state_at(h), j, stats)?;
            for (k, branch) in set.counterfactuals.iter().enumerate() {
                if branch.horizon() != horizon {
                    return Err(Error::Shape("branch horizons differ".into()));
                }
                let z_branch = teammate_features(env, branch.state_at(h), j, stats)?;
                values[(t_idx * horizon + (h - 1)) * set.branches() + k] =
                    euclidean(&z_factual, &z_branch);
            }
        }
    }
    tensor.values = values;
    Ok(tensor)
}

/// Aggregates the distance tensor into the raw multi-step score
/// `c̃ = Σ_h w_h · (1/(N-1)) Σ_j (1/K) Σ_k d_{j,h}^{(k)}`.
///
/// Returns the raw score and the per-horizon teammate means. With a single
/// agent (no teammates) the score is defined as zero.
pub fn aggregate_score(
    distances: &DistanceTensor,
    weights: &[f64],
    num_agents: usize,
) -> Result<(f64, Vec<f64>)> {
    if weights.len() != distances.horizon {
        return Err(Error::InvalidArgument(
            "need one weight per horizon".into(),
        ));
    }
    if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "weights must be nonnegative and sum to 1".into(),
        ));
    }
    if num_agents >= 2 && distances.teammates.len() != num_agents - 1 {
        return Err(Error::Shape(format!(
            "expected {} teammates, tensor has {}",
            num_agents - 1,
            distances.teammates.len()
        )));
    }
    let per_horizon: Vec<f64> = (1..=distances.horizon)
        .map(|h| distances.horizon_mean(h))
        .collect();
    let raw = weights
        .iter()
        .zip(&per_horizon)
        .map(|(w, m)| w * m)
        .sum();
    Ok((raw, per_horizon))
}

/// `ψ(c̃) = clip(c̃ / (σ_c + ε), 0, c_max)` with the pooled running scale.
pub fn scale_score(raw: f64, score_stats: &RunningStats, c_max: f64) -> Result<f64> {
    if raw < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "raw action-effect score must be nonnegative, got {raw}"
        )));
    }
    Ok((raw / score_stats.scale()).clamp(0.0, c_max))
}

/// Raw and scaled score with the retained distance tensor.
#[derive(Debug, Clone)]
pub struct EffectScore {
    pub raw: f64,
    pub scaled: f64,
    pub per_horizon: Vec<f64>,
    pub distances: DistanceTensor,
}

/// Per-transition convenience path: build branches, roll them out, and score.
#[allow(clippy::too_many_arguments)]
pub fn effect_score_for_transition(
    env: &dyn Environment,
    dynamics: &dyn Dynamics,
    actors: &[Mlp],
    cfg: &EffectConfig,
    feature_stats: &RunningStats,
    score_stats: &RunningStats,
    state: &[f64],
    action: &JointAction,
    source: usize,
    rng: &mut ChaCha8Rng,
    counters: &Counters,
) -> Result<EffectScore> {
    cfg.validate()?;
    let mut set = build_branches(state, action, source, cfg.branches, rng, counters)?;
    set.fill_rollouts(dynamics, actors, env, cfg.horizon, counters)?;
    let distances = branch_distances(env, &set, feature_stats)?;
    let (raw, per_horizon) = aggregate_score(&distances, &cfg.weights, env.num_agents())?;
    let scaled = scale_score(raw, score_stats, cfg.c_max)?;
    Ok(EffectScore {
        raw,
        scaled,
        per_horizon,
        distances,
    })
}

/// Raw and scaled scores for every (transition, source agent) pair of a
/// training batch, computed with fused matrix passes.
#[derive(Debug, Clone)]
pub struct BatchEffects {
    /// `raw[[b, i]]` is the unnormalized score of source agent `i` at row `b`.
    pub raw: Array2<f64>,
    /// Scaled and clipped scores with the same layout.
    pub scaled: Array2<f64>,
}

/// Batched counterpart of [`effect_score_for_transition`] over a whole
/// training batch. Counterfactual draws consume the RNG in `(row, source,
/// branch)` order, matching a loop over the per-transition path.
///
/// `corruption` optionally injects seeded zero-mean Gaussian noise of the
/// given scale into every predicted state before clipping, for the
/// forward-model corruption studies.
#[allow(clippy::too_many_arguments)]
pub fn batch_action_effects(
    env: &dyn Environment,
    fm: &ForwardModel,
    actors: &[Mlp],
    cfg: &EffectConfig,
    feature_stats: &RunningStats,
    score_stats: &RunningStats,
    states: &[&[f64]],
    actions: &[&JointAction],
    rng: &mut ChaCha8Rng,
    counters: &Counters,
    corruption: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<BatchEffects> {
    cfg.validate()?;
    let rows = states.len();
    if actions.len() != rows {
        return Err(Error::Shape("states/actions length mismatch".into()));
    }
    let num_agents = env.num_agents();
    let state_dim = env.state_dim();
    let action_dim = 2 * num_agents;
    let obs_dim = env.obs_dim();
    let branches = cfg.branches + 1; // factual lane plus K counterfactuals
    let lanes = rows * num_agents * branches;

    // First-step inputs: every lane starts from its row's state; the action is
    // factual except for the replaced source slot in counterfactual lanes.
    let mut inputs = Array2::zeros((lanes, state_dim + action_dim));
    let mut lane = 0;
    for b in 0..rows {
        let flat = actions[b].flat();
        for i in 0..num_agents {
            for k in 0..branches {
                let mut row = inputs.row_mut(lane);
                row.as_slice_mut().unwrap()[..state_dim].copy_from_slice(states[b]);
                row.as_slice_mut().unwrap()[state_dim..].copy_from_slice(&flat);
                if k > 0 {
                    let replacement = sample_counterfactual(actions[b].0[i], rng);
                    row[state_dim + 2 * i] = replacement[0];
                    row[state_dim + 2 * i + 1] = replacement[1];
                }
                lane += 1;
            }
        }
    }
    counters.add_branch_sets((rows * num_agents) as u64);

    let mut corruption = corruption;
    let mut horizon_states: Vec<Array2<f64>> = Vec::with_capacity(cfg.horizon);
    for h in 0..cfg.horizon {
        let mut predicted = fm.predict_batch(inputs.view())?;
        counters.add_model_predictions(lanes as u64);
        counters.add_rollout_steps(lanes as u64);
        if let Some((scale, noise_rng)) = corruption.as_mut() {
            if *scale > 0.0 {
                use rand_distr::Distribution;
                let normal = rand_distr::StandardNormal;
                for v in predicted.iter_mut() {
                    let z: f64 = normal.sample(*noise_rng);
                    *v += *scale * z;
                }
            }
        }
        for mut row in predicted.rows_mut() {
            env.clip_state_vec(row.as_slice_mut().unwrap());
        }
        if h + 1 < cfg.horizon {
            // Closed-loop: rebuild observations from the predicted states and
            // query every actor deterministically for the next joint action.
            let mut obs = Array2::zeros((lanes, obs_dim));
            for i in 0..num_agents {
                for (lane, state_row) in predicted.rows().into_iter().enumerate() {
                    env.observation_into(
                        state_row.as_slice().unwrap(),
                        i,
                        obs.row_mut(lane).as_slice_mut().unwrap(),
                    );
                }
                let acts = actors[i].forward_batch(obs.view())?;
                for lane in 0..lanes {
                    inputs[[lane, state_dim + 2 * i]] = acts[[lane, 0]];
                    inputs[[lane, state_dim + 2 * i + 1]] = acts[[lane, 1]];
                }
            }
            for lane in 0..lanes {
                for d in 0..state_dim {
                    inputs[[lane, d]] = predicted[[lane, d]];
                }
            }
        }
        horizon_states.push(predicted);
    }

    // Distances, aggregation, scaling.
    let mut raw = Array2::zeros((rows, num_agents));
    let mut scaled = Array2::zeros((rows, num_agents));
    let feat_dim = env.agent_block(0).len();
    let mut z_factual = vec![0.0; feat_dim];
    let mut z_branch = vec![0.0; feat_dim];
    for b in 0..rows {
        for i in 0..num_agents {
            let base_lane = ((b * num_agents) + i) * branches;
            let mut score = 0.0;
            if num_agents >= 2 {
                for (h, states_h) in horizon_states.iter().enumerate() {
                    let mut horizon_sum = 0.0;
                    for j in 0..num_agents {
                        if j == i {
                            continue;
                        }
                        let block = env.agent_block(j);
                        let factual_row = states_h.row(base_lane);
                        normalize_into(
                            &factual_row.as_slice().unwrap()[block.clone()],
                            feature_stats,
                            &mut z_factual,
                        );
                        let mut branch_sum = 0.0;
                        for k in 1..branches {
                            let row = states_h.row(base_lane + k);
                            normalize_into(
                                &row.as_slice().unwrap()[block.clone()],
                                feature_stats,
                                &mut z_branch,
                            );
                            branch_sum += euclidean(&z_factual, &z_branch);
                        }
                        horizon_sum += branch_sum / cfg.branches as f64;
                    }
                    score += cfg.weights[h] * horizon_sum / (num_agents - 1) as f64;
                }
            }
            raw[[b, i]] = score;
            scaled[[b, i]] = scale_score(score, score_stats, cfg.c_max)?;
        }
    }
    Ok(BatchEffects { raw, scaled })
}

fn normalize_into(block: &[f64], stats: &RunningStats, out: &mut [f64]) {
    let eps = stats.epsilon();
    for (o, ((v, m), s)) in out
        .iter_mut()
        .zip(block.iter().zip(stats.mean()).zip(stats.std()))
    {
        *o = (v - m) / (s + eps);
    }
}

/// One row of the per-batch effect diagnostics CSV.
#[derive(Debug, Clone)]
pub struct EffectCsvRow {
    pub transition_id: u64,
    pub source_agent: usize,
    pub raw: f64,
    pub scaled: f64,
    pub per_horizon: Vec<f64>,
}

/// Appends effect diagnostics as CSV; writes the header when `with_header`.
pub fn write_effect_csv(
    mut w: impl Write,
    rows: &[EffectCsvRow],
    with_header: bool,
) -> std::io::Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    if with_header {
        let mut header = vec![
            "transition_id".to_string(),
            "source_agent".to_string(),
            "c_raw".to_string(),
            "c_scaled".to_string(),
        ];
        header.extend((1..=rows[0].per_horizon.len()).map(|h| format!("h{h}_mean")));
        writeln!(w, "{}", header.join(","))?;
    }
    for row in rows {
        let mut fields = vec![
            row.transition_id.to_string(),
            row.source_agent.to_string(),
            format!("{:.9}", row.raw),
            format!("{:.9}", row.scaled),
        ];
        fields.extend(row.per_horizon.iter().map(|v| format!("{v:.9}")));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
