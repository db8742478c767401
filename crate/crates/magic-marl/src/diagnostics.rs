//! Rollout-reliability diagnostics and the sweep runner.
//!
//! Three views of whether learned rollouts can be trusted: prediction error
//! on normal policy rollouts (In-MSE), prediction error under first-step
//! action replacement (Int-MSE), and whether model-predicted branch effects
//! rank true branch effects (Sep. AUC, a rank statistic over pooled
//! branches). Ground truth comes from the exact environment twin. A noise
//! wrapper corrupts any dynamics for the robustness studies.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::cell::RefCell;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::effect::{build_branches, branch_distances, DistanceTensor, EffectConfig};
use crate::env::Environment;
use crate::forward_model::{rollout_branch, BranchTag, Dynamics};
use crate::instrument::Counters;
use crate::nn::Mlp;
use crate::oracle::ExactTwin;
use crate::runner::{derive_stream, train, RunConfig, StreamKind};
use crate::stats::RunningStats;
use crate::{Error, Result};

/// One diagnostic evaluation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DiagnosticReport {
    pub in_mse: f64,
    pub int_mse: f64,
    pub sep_auc: f64,
    pub horizon: usize,
    pub contexts: usize,
    pub corruption: f64,
}

/// Wraps any dynamics with seeded zero-mean Gaussian output noise, clipped
/// back to the environment's valid ranges.
pub struct CorruptedDynamics<'a> {
    inner: &'a dyn Dynamics,
    env: &'a dyn Environment,
    scale: f64,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> CorruptedDynamics<'a> {
    pub fn new(
        inner: &'a dyn Dynamics,
        env: &'a dyn Environment,
        scale: f64,
        seed: u64,
    ) -> Self {
        assert!(scale >= 0.0);
        CorruptedDynamics {
            inner,
            env,
            scale,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

impl Dynamics for CorruptedDynamics<'_> {
    fn predict_next(&self, state: &[f64], action: &crate::env::JointAction) -> Vec<f64> {
        let mut out = self.inner.predict_next(state, action);
        if self.scale > 0.0 {
            let mut rng = self.rng.borrow_mut();
            for v in out.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut *rng);
                *v += self.scale * z;
            }
            self.env.clip_state_vec(&mut out);
        }
        out
    }
}

/// Convenience constructor matching the corruption studies.
pub fn corrupt_model<'a>(
    model: &'a dyn Dynamics,
    env: &'a dyn Environment,
    noise_scale: f64,
    seed: u64,
) -> CorruptedDynamics<'a> {
    CorruptedDynamics::new(model, env, noise_scale, seed)
}

/// Samples `count` on-policy context states by rolling seeded episodes under
/// the deterministic policies.
pub fn sample_contexts(
    env: &dyn Environment,
    actors: &[Mlp],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one context".into()));
    }
    let mut contexts = Vec::with_capacity(count);
    'outer: loop {
        let mut state = env.reset_vec(rng.next_u64());
        for _ in 0..env.episode_length() {
            contexts.push(state.clone());
            if contexts.len() == count {
                break 'outer;
            }
            let mut action = crate::env::JointAction::zeros(actors.len());
            for (i, actor) in actors.iter().enumerate() {
                let out = actor.forward(&env.observation_vec(&state, i))?;
                action.0[i] = [out[0], out[1]];
            }
            state = env.transition_vec(&state, &action).0;
        }
    }
    Ok(contexts)
}

fn policy_action(
    env: &dyn Environment,
    actors: &[Mlp],
    state: &[f64],
) -> Result<crate::env::JointAction> {
    let mut action = crate::env::JointAction::zeros(actors.len());
    for (i, actor) in actors.iter().enumerate() {
        let out = actor.forward(&env.observation_vec(state, i))?;
        action.0[i] = [out[0], out[1]];
    }
    Ok(action)
}

fn rollout_mse(
    model: &dyn Dynamics,
    env: &dyn Environment,
    actors: &[Mlp],
    horizon: usize,
    contexts: &[Vec<f64>],
    first_actions: &[crate::env::JointAction],
    counters: &Counters,
) -> Result<f64> {
    let twin = ExactTwin::new(env);
    let state_dim = env.state_dim() as f64;
    let mut total = 0.0;
    for (context, action) in contexts.iter().zip(first_actions) {
        let predicted = rollout_branch(
            model,
            actors,
            env,
            context,
            action,
            horizon,
            BranchTag::Factual,
            counters,
        )?;
        let truth = rollout_branch(
            &twin,
            actors,
            env,
            context,
            action,
            horizon,
            BranchTag::Factual,
            counters,
        )?;
        for (p, t) in predicted.states.iter().zip(&truth.states) {
            let sq: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            total += sq / state_dim;
        }
    }
    Ok(total / (contexts.len() * horizon) as f64)
}

/// Mean per-dimension squared rollout error on normal policy rollouts:
/// both the model and the exact twin run closed-loop under the same
/// deterministic policies.
pub fn in_mse(
    model: &dyn Dynamics,
    env: &dyn Environment,
    actors: &[Mlp],
    horizon: usize,
    contexts: &[Vec<f64>],
    counters: &Counters,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("need at least one context".into()));
    }
    let first_actions: Vec<_> = contexts
        .iter()
        .map(|c| policy_action(env, actors, c))
        .collect::<Result<_>>()?;
    rollout_mse(model, env, actors, horizon, contexts, &first_actions, counters)
}

/// Same error under intervention rollouts: one uniformly drawn source agent's
/// first-step action is replaced by a uniform sample, with the identical
/// replacement fed to both the model and the twin.
pub fn int_mse(
    model: &dyn Dynamics,
    env: &dyn Environment,
    actors: &[Mlp],
    horizon: usize,
    contexts: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    counters: &Counters,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::InvalidArgument("need at least one context".into()));
    }
    let mut first_actions = Vec::with_capacity(contexts.len());
    for context in contexts {
        let mut action = policy_action(env, actors, context)?;
        let source = rng.random_range(0..env.num_agents());
        action.0[source] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        first_actions.push(action);
    }
    rollout_mse(model, env, actors, horizon, contexts, &first_actions, counters)
}

/// Per-branch weighted effect `Σ_h w_h (1/(N-1)) Σ_j d_{j,h}^{(k)}`.
fn branch_effect(tensor: &DistanceTensor, weights: &[f64], branch: usize) -> f64 {
    if tensor.teammates.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for h in 1..=tensor.horizon {
        let mut teammate_sum = 0.0;
        for t_idx in 0..tensor.teammates.len() {
            teammate_sum += tensor.get(t_idx, h, branch);
        }
        total += weights[h - 1] * teammate_sum / tensor.teammates.len() as f64;
    }
    total
}

/// Rank AUC of `scores` against boolean labels, midranks for ties.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores/labels length mismatch".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "need at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks over tied score groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - positives as f64 * (positives as f64 + 1.0) / 2.0)
        / (positives as f64 * negatives as f64);
    Ok(auc)
}

/// Separation AUC: per context, K counterfactual branches are rolled out
/// under both the model and the exact twin; branches are labeled by whether
/// their true effect exceeds the pooled median, and the model-predicted
/// effect is scored as a classifier for that label.
#[allow(clippy::too_many_arguments)]
pub fn sep_auc(
    model: &dyn Dynamics,
    env: &dyn Environment,
    actors: &[Mlp],
    effect_cfg: &EffectConfig,
    feature_stats: &RunningStats,
    contexts: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    counters: &Counters,
) -> Result<f64> {
    let twin = ExactTwin::new(env);
    let mut predicted_effects = Vec::with_capacity(contexts.len() * effect_cfg.branches);
    let mut true_effects = Vec::with_capacity(contexts.len() * effect_cfg.branches);
    for context in contexts {
        let source = rng.random_range(0..env.num_agents());
        let action = policy_action(env, actors, context)?;
        let mut set = build_branches(context, &action, source, effect_cfg.branches, rng, counters)?;
        set.fill_rollouts(model, actors, env, effect_cfg.horizon, counters)?;
        let predicted = branch_distances(env, &set, feature_stats)?;
        set.fill_rollouts(&twin, actors, env, effect_cfg.horizon, counters)?;
        let truth = branch_distances(env, &set, feature_stats)?;
        for k in 0..effect_cfg.branches {
            predicted_effects.push(branch_effect(&predicted, &effect_cfg.weights, k));
            true_effects.push(branch_effect(&truth, &effect_cfg.weights, k));
        }
    }
    let mut sorted = true_effects.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite effects"));
    let n = sorted.len();
    let median = if n % 2 == 0 {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    };
    let labels: Vec<bool> = true_effects.iter().map(|q| *q > median).collect();
    rank_auc(&predicted_effects, &labels)
}

/// All three diagnostics for a trained model at one corruption level.
#[allow(clippy::too_many_arguments)]
pub fn diagnose(
    model: &dyn Dynamics,
    env: &dyn Environment,
    actors: &[Mlp],
    effect_cfg: &EffectConfig,
    feature_stats: &RunningStats,
    corruption: f64,
    contexts: usize,
    seed: u64,
) -> Result<DiagnosticReport> {
    let counters = Counters::new();
    let mut context_rng = derive_stream(seed, StreamKind::EvalReset);
    let context_states = sample_contexts(env, actors, contexts, &mut context_rng)?;
    let corrupted = CorruptedDynamics::new(model, env, corruption, seed ^ 0xC0FF_EE00);
    let effective: &dyn Dynamics = if corruption > 0.0 { &corrupted } else { model };
    let in_mse_value = in_mse(effective, env, actors, effect_cfg.horizon, &context_states, &counters)?;
    let mut intervention_rng = derive_stream(seed, StreamKind::Counterfactual);
    let int_mse_value = int_mse(
        effective,
        env,
        actors,
        effect_cfg.horizon,
        &context_states,
        &mut intervention_rng,
        &counters,
    )?;
    let mut branch_rng = derive_stream(seed, StreamKind::Corruption);
    let sep = sep_auc(
        effective,
        env,
        actors,
        effect_cfg,
        feature_stats,
        &context_states,
        &mut branch_rng,
        &counters,
    )?;
    Ok(DiagnosticReport {
        in_mse: in_mse_value,
        int_mse: int_mse_value,
        sep_auc: sep,
        horizon: effect_cfg.horizon,
        contexts,
        corruption,
    })
}

/// Fixed sweep CSV header.
pub const SWEEP_HEADER: &str = "run_id,seed,task,method,H,K,lambda_int,corruption,in_mse,int_mse,sep_auc,final_return,auc_return,wall_seconds";

/// One formatted sweep row.
fn sweep_row(config: &RunConfig, report: Option<&DiagnosticReport>, final_return: f64, auc_return: f64, wall: f64) -> String {
    let run_id = format!(
        "{}-{}-H{}-K{}-c{}-s{}",
        config.task, config.method, config.horizon, config.branches, config.fm_corruption, config.seed
    );
    let (in_mse, int_mse, sep) = report
        .map(|r| (r.in_mse, r.int_mse, r.sep_auc))
        .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    format!(
        "{},{},{},{},{},{},{},{},{:.9},{:.9},{:.9},{:.6},{:.6},{:.3}",
        run_id,
        config.seed,
        config.task,
        config.method,
        config.horizon,
        config.branches,
        config.lambda_int,
        config.fm_corruption,
        in_mse,
        int_mse,
        sep,
        final_return,
        auc_return,
        wall
    )
}

/// Executes every cell (a full training run plus diagnostics) and writes one
/// CSV row per cell to `<out_root>/sweep.csv`. A failed cell records a row of
/// NaNs and the sweep continues. Cells run in parallel when `parallel`; each
/// cell is internally single-threaded and seed-deterministic.
pub fn run_sweep(
    cells: &[RunConfig],
    out_root: &Path,
    diagnostic_contexts: usize,
    parallel: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_root)?;
    let run_cell = |(cell_idx, config): (usize, &RunConfig)| -> String {
        let out_dir = out_root.join(format!("cell_{cell_idx:03}"));
        match run_one_cell(config, &out_dir, diagnostic_contexts) {
            Ok(row) => row,
            Err(err) => {
                let row = sweep_row(config, None, f64::NAN, f64::NAN, f64::NAN);
                eprintln!("sweep cell {cell_idx} failed: {err}");
                row
            }
        }
    };
    let rows: Vec<String> = if parallel {
        cells.par_iter().enumerate().map(run_cell).collect()
    } else {
        cells.iter().enumerate().map(run_cell).collect()
    };
    let csv_path = out_root.join("sweep.csv");
    let mut file = std::fs::File::create(&csv_path)?;
    writeln!(file, "{SWEEP_HEADER}")?;
    for row in rows {
        writeln!(file, "{row}")?;
    }
    Ok(csv_path)
}

fn run_one_cell(config: &RunConfig, out_dir: &Path, diagnostic_contexts: usize) -> Result<String> {
    let artifacts = train(config, out_dir)?;
    let report = if let Some(fm) = artifacts.forward_model.as_ref() {
        let env = config.make_env()?;
        Some(diagnose(
            fm,
            env.as_ref(),
            &artifacts.learner.actors,
            &config.effect_config(),
            &artifacts.feature_stats,
            config.fm_corruption,
            diagnostic_contexts,
            config.seed,
        )?)
    } else {
        None
    };
    Ok(sweep_row(
        config,
        report.as_ref(),
        artifacts.final_return,
        artifacts.auc_return,
        artifacts.wall_seconds,
    ))
}
