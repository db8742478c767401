//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers (run with `--nocapture` to see them on success).
//!
//! The desk-scale training runs (predator prey, four method variants, five
//! paired seeds) are shared across criteria through a lazily initialized
//! cache, so the expensive work happens once per test-binary invocation.

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use magic_marl::diagnostics::{rank_auc, sep_auc};
use magic_marl::effect::{aggregate_score, branch_distances, scale_score, BranchSet};
use magic_marl::env::{EnvConfig, Environment, JointAction, ParticleEnv};
use magic_marl::forward_model::{BranchRollout, BranchTag};
use magic_marl::gate::{discounted_intrinsic_bound, gate, intrinsic_reward, sigmoid};
use magic_marl::instrument::Counters;
use magic_marl::nn::{Activation, Mlp};
use magic_marl::oracle::{DelayedChain, ExactTwin};
use magic_marl::runner::{evaluate, train, Method, RunArtifacts, RunConfig};
use magic_marl::stats::RunningStats;

const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn out_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

struct DeskRuns {
    magic: Vec<RunArtifacts>,
    backbone: Vec<RunArtifacts>,
    no_gate: Vec<RunArtifacts>,
    h1: Vec<RunArtifacts>,
}

fn desk_config(method: Method, seed: u64) -> RunConfig {
    let mut config = RunConfig::default().desk_preset();
    config.method = method;
    config.seed = seed;
    config
}

fn run_variant(method: Method, label: &str) -> Vec<RunArtifacts> {
    DESK_SEEDS
        .par_iter()
        .map(|&seed| {
            let config = desk_config(method, seed);
            let dir = out_root().join(format!("desk-{label}-s{seed}"));
            train(&config, &dir).expect("desk run")
        })
        .collect()
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| DeskRuns {
        magic: run_variant(Method::Magic, "magic"),
        backbone: run_variant(Method::Backbone, "backbone"),
        no_gate: run_variant(Method::MagicNoGate, "no-gate"),
        h1: run_variant(Method::MagicH1, "h1"),
    })
}

struct ChainRuns {
    h3: Vec<RunArtifacts>,
    h1: Vec<RunArtifacts>,
}

fn chain_runs() -> &'static ChainRuns {
    static RUNS: OnceLock<ChainRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let run = |method: Method, label: &str| -> Vec<RunArtifacts> {
            DESK_SEEDS
                .par_iter()
                .map(|&seed| {
                    let mut config = RunConfig::default().chain_preset();
                    config.method = method;
                    config.seed = seed;
                    config.chain_delay = 2;
                    let dir = out_root().join(format!("chain-{label}-s{seed}"));
                    train(&config, &dir).expect("chain run")
                })
                .collect()
        };
        ChainRuns {
            h3: run(Method::Magic, "h3"),
            h1: run(Method::MagicH1, "h1"),
        }
    })
}

fn env3() -> ParticleEnv {
    ParticleEnv::new(EnvConfig::predator_prey(3)).unwrap()
}

/// Synthetic branch set whose rollout states are supplied directly.
fn synthetic_set(
    env: &dyn Environment,
    factual_states: Vec<Vec<f64>>,
    branch_states: Vec<Vec<Vec<f64>>>,
    source: usize,
) -> BranchSet {
    let action = JointAction::zeros(env.num_agents());
    BranchSet {
        source,
        start_state: vec![0.0; env.state_dim()],
        factual_action: action.clone(),
        counterfactual_sources: branch_states.iter().map(|_| [0.3, 0.3]).collect(),
        factual: Some(BranchRollout {
            tag: BranchTag::Factual,
            first_action: action.clone(),
            states: factual_states,
        }),
        counterfactuals: branch_states
            .into_iter()
            .enumerate()
            .map(|(k, states)| BranchRollout {
                tag: BranchTag::Counterfactual(k),
                first_action: action.clone(),
                states,
            })
            .collect(),
    }
}

fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_gradient_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let activations = [Activation::Relu, Activation::Tanh, Activation::Identity];
    for case in 0..100 {
        let dims = [
            rng.random_range(2..6),
            rng.random_range(4..10),
            rng.random_range(1..4),
        ];
        let acts = [
            activations[rng.random_range(0..2)], // hidden: relu or tanh
            activations[rng.random_range(0..3)],
        ];
        let mlp = Mlp::new(&dims, &acts, &mut rng);
        let input: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..dims[2]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = mlp.backward_single(&input, &upstream).unwrap();
        let scalar = |m: &Mlp, x: &[f64]| -> f64 {
            m.forward(x)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(y, g)| y * g)
                .sum()
        };
        let h = 1e-5;
        for (layer_idx, (gw, gb)) in grads.layers.iter().enumerate() {
            for o in 0..gw.nrows() {
                for i in 0..gw.ncols() {
                    let mut plus = mlp.clone();
                    let mut minus = mlp.clone();
                    plus.layers_mut()[layer_idx].weights[[o, i]] += h;
                    minus.layers_mut()[layer_idx].weights[[o, i]] -= h;
                    let fd = (scalar(&plus, &input) - scalar(&minus, &input)) / (2.0 * h);
                    let denom = fd.abs().max(1e-6);
                    assert!(
                        ((gw[[o, i]] - fd) / denom).abs() < 1e-4,
                        "case {case}: weight grad mismatch analytic {} vs fd {fd}",
                        gw[[o, i]]
                    );
                }
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                plus.layers_mut()[layer_idx].bias[o] += h;
                minus.layers_mut()[layer_idx].bias[o] -= h;
                let fd = (scalar(&plus, &input) - scalar(&minus, &input)) / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                assert!(((gb[o] - fd) / denom).abs() < 1e-4);
            }
        }
    }
    println!("criterion 01 PASS: 100 random nets, analytic vs central differences < 1e-4");
}

// ---------------------------------------------------------------------------
// 2. Basic score properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_score_basic_properties() {
    let env = env3();
    let stats = RunningStats::new(4);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let horizon = 3;
    let weights = vec![1.0 / 3.0; 3];
    // 1000 random branch sets: nonnegativity.
    for _ in 0..1000 {
        let branches = rng.random_range(1..5);
        let factual: Vec<Vec<f64>> = (0..horizon)
            .map(|_| random_state(env.state_dim(), &mut rng))
            .collect();
        let branch_states: Vec<Vec<Vec<f64>>> = (0..branches)
            .map(|_| {
                (0..horizon)
                    .map(|_| random_state(env.state_dim(), &mut rng))
                    .collect()
            })
            .collect();
        let set = synthetic_set(&env, factual, branch_states, 0);
        let tensor = branch_distances(&env, &set, &stats).unwrap();
        let (raw, _) = aggregate_score(&tensor, &weights, 3).unwrap();
        assert!(raw >= 0.0);
    }
    // Identical branches: exactly zero.
    for _ in 0..100 {
        let factual: Vec<Vec<f64>> = (0..horizon)
            .map(|_| random_state(env.state_dim(), &mut rng))
            .collect();
        let set = synthetic_set(&env, factual.clone(), vec![factual.clone(), factual], 1);
        let tensor = branch_distances(&env, &set, &stats).unwrap();
        let (raw, _) = aggregate_score(&tensor, &weights, 3).unwrap();
        assert_eq!(raw, 0.0, "identical branches must give exactly zero");
    }
    // One perturbed teammate feature at a positive-weight horizon: positive.
    for trial in 0..100 {
        let factual: Vec<Vec<f64>> = (0..horizon)
            .map(|_| random_state(env.state_dim(), &mut rng))
            .collect();
        let mut perturbed = factual.clone();
        let h = trial % horizon;
        // teammate of source 0 is agent 1 or 2; poke agent 1's block.
        perturbed[h][4] += 0.25;
        let set = synthetic_set(&env, factual, vec![perturbed], 0);
        let tensor = branch_distances(&env, &set, &stats).unwrap();
        let (raw, _) = aggregate_score(&tensor, &weights, 3).unwrap();
        assert!(raw > 0.0, "single perturbed feature must give a positive score");
    }
    println!("criterion 02 PASS: nonnegativity, exact zero on identical branches, positive detection");
}

// ---------------------------------------------------------------------------
// 3. One-step blindness on the delayed chain
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_one_step_blindness() {
    let counters = Counters::new();
    // Unit normalization, epsilon-free, so distances are raw position gaps.
    let stats = RunningStats::with_momentum(4, 0.99, 0.0);
    for delay in [2usize, 3] {
        let chain = DelayedChain::with_delay(delay as u32);
        let twin = ExactTwin::new(&chain);
        let policies: Vec<Mlp> = (0..2)
            .map(|_| Mlp::zeros(&[chain.obs_dim(), 4, 2], &[Activation::Relu, Activation::Tanh]))
            .collect();
        let start = chain.reset_vec(1);
        let executed = JointAction(vec![[1.0, 0.0], [0.0, 0.0]]);
        // Exhaustive grid alternatives, executed action excluded.
        let alternatives: Vec<[f64; 2]> = DelayedChain::source_action_grid()
            .iter()
            .filter(|x| **x != 1.0)
            .map(|x| [*x, 0.0])
            .collect();
        for horizon in 1..=delay + 1 {
            let mut set = BranchSet {
                source: 0,
                start_state: start.clone(),
                factual_action: executed.clone(),
                counterfactual_sources: alternatives.clone(),
                factual: None,
                counterfactuals: Vec::new(),
            };
            set.fill_rollouts(&twin, &policies, &chain, horizon, &counters)
                .unwrap();
            let tensor = branch_distances(&chain, &set, &stats).unwrap();
            let weights = vec![1.0 / horizon as f64; horizon];
            let (score, _) = aggregate_score(&tensor, &weights, 2).unwrap();
            if horizon < delay {
                assert!(
                    score <= 1e-9,
                    "d={delay} H={horizon}: expected blindness, got {score}"
                );
            } else {
                assert!(
                    score > 1e-3,
                    "d={delay} H={horizon}: expected detection, got {score}"
                );
            }
        }
    }
    println!("criterion 03 PASS: H < d scores <= 1e-9; H >= d scores > 1e-3 (d in {{2,3}})");
}

// ---------------------------------------------------------------------------
// 4. Forward-model error bound
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_error_bound() {
    let env = env3();
    // Identity feature extraction: unit std, zero mean, zero epsilon.
    let stats = RunningStats::with_momentum(4, 0.99, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_slack = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let horizon = rng.random_range(1..4);
        let branches = rng.random_range(1..4);
        let weights = vec![1.0 / horizon as f64; horizon];
        // True rollouts.
        let truth_factual: Vec<Vec<f64>> = (0..horizon)
            .map(|_| random_state(env.state_dim(), &mut rng))
            .collect();
        let truth_branches: Vec<Vec<Vec<f64>>> = (0..branches)
            .map(|_| {
                (0..horizon)
                    .map(|_| random_state(env.state_dim(), &mut rng))
                    .collect()
            })
            .collect();
        // Perturbed rollouts with exactly controlled per-horizon error norms.
        let mut bound = 0.0;
        let perturb = |states: &[Vec<f64>], eps: &[f64], rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            states
                .iter()
                .zip(eps)
                .map(|(s, target_norm)| {
                    let delta: Vec<f64> =
                        (0..s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    s.iter()
                        .zip(&delta.iter().map(|v| v / norm * target_norm).collect::<Vec<_>>())
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect()
        };
        let eps_factual: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.0..0.5)).collect();
        let hat_factual = perturb(&truth_factual, &eps_factual, &mut rng);
        let mut hat_branches = Vec::new();
        for (k, truth) in truth_branches.iter().enumerate() {
            let eps_branch: Vec<f64> = (0..horizon).map(|_| rng.random_range(0.0..0.5)).collect();
            for h in 0..horizon {
                bound += weights[h] * (eps_factual[h] + eps_branch[h]) / branches as f64;
            }
            let _ = k;
            hat_branches.push(perturb(truth, &eps_branch, &mut rng));
        }
        let truth_set = synthetic_set(&env, truth_factual, truth_branches, 0);
        let hat_set = synthetic_set(&env, hat_factual, hat_branches, 0);
        let truth_tensor = branch_distances(&env, &truth_set, &stats).unwrap();
        let hat_tensor = branch_distances(&env, &hat_set, &stats).unwrap();
        let (truth_score, _) = aggregate_score(&truth_tensor, &weights, 3).unwrap();
        let (hat_score, _) = aggregate_score(&hat_tensor, &weights, 3).unwrap();
        let err = (hat_score - truth_score).abs();
        assert!(
            err <= bound + 1e-10,
            "bound violated: |{hat_score} - {truth_score}| = {err} > {bound}"
        );
        worst_slack = worst_slack.max(err - bound);
    }
    println!("criterion 04 PASS: 1000 perturbation trials within the error bound (worst slack {worst_slack:.3e})");
}

// ---------------------------------------------------------------------------
// 5. Scaling map properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_scaling_map_properties() {
    let mut stats = RunningStats::new(1);
    stats.update_batch_scalar(&[0.3, 0.9, 1.5, 0.1, 2.0]);
    let c_max = 5.0;
    let lipschitz = 1.0 / stats.scale();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for _ in 0..1000 {
        let x: f64 = rng.random_range(0.0..20.0);
        let y: f64 = rng.random_range(0.0..20.0);
        let px = scale_score(x, &stats, c_max).unwrap();
        let py = scale_score(y, &stats, c_max).unwrap();
        assert!((0.0..=c_max).contains(&px) && (0.0..=c_max).contains(&py));
        if x <= y {
            assert!(px <= py, "monotonicity violated");
        } else {
            assert!(py <= px, "monotonicity violated");
        }
        assert!(
            (px - py).abs() <= lipschitz * (x - y).abs() + 1e-12,
            "Lipschitz bound violated"
        );
    }
    assert_eq!(scale_score(0.0, &stats, c_max).unwrap(), 0.0);
    println!("criterion 05 PASS: psi monotone, range [0, {c_max}], Lipschitz 1/(sigma+eps) over 1000 pairs");
}

// ---------------------------------------------------------------------------
// 6. Gate suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_gate_suite() {
    let stats = RunningStats::new(1);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    // kappa in [0,1] and monotone over 1000 pairs.
    for _ in 0..1000 {
        let a: f64 = rng.random_range(-30.0..30.0);
        let b: f64 = rng.random_range(-30.0..30.0);
        let ka = gate(a, &stats, 1.0);
        let kb = gate(b, &stats, 1.0);
        assert!((0.0..=1.0).contains(&ka) && (0.0..=1.0).contains(&kb));
        if a <= b {
            assert!(ka <= kb);
        }
    }
    // r_int in [0, 0.25] with the protocol constants.
    for _ in 0..1000 {
        let kappa: f64 = rng.random_range(0.0..=1.0);
        let c: f64 = rng.random_range(0.0..=5.0);
        let r = intrinsic_reward(kappa, c, 0.05);
        assert!((0.0..=0.25 + 1e-15).contains(&r));
    }
    // Second-moment control on 1000 synthetic batches.
    for _ in 0..1000 {
        let mut gated = 0.0;
        let mut ungated = 0.0;
        for _ in 0..32 {
            let kappa: f64 = rng.random_range(0.0..=1.0);
            let c: f64 = rng.random_range(0.0..=5.0);
            let g = 0.05 * kappa * c;
            let u = 0.05 * c;
            gated += g * g;
            ungated += u * u;
        }
        assert!(gated <= ungated + 1e-15);
    }
    // The discounted bound with the protocol constants is exactly 25.
    let bound = discounted_intrinsic_bound(5, 0.05, 5.0, 0.95);
    assert!((bound - 25.0).abs() < 1e-9);
    // Low-gate contribution bound.
    let cap = 0.05 * sigmoid(-4.0) * 5.0;
    for _ in 0..1000 {
        let u: f64 = rng.random_range(-40.0..=-4.0);
        let kappa = gate(u * (1.0 + 1e-5), &stats, 1.0);
        let c: f64 = rng.random_range(0.0..=5.0);
        assert!(intrinsic_reward(kappa, c, 0.05) <= cap + 1e-12);
    }
    // Every realized discounted intrinsic return in the desk runs respects
    // the bound for its agent count (and a fortiori the N=5 value of 25).
    let runs = desk_runs();
    for artifacts in runs.magic.iter().chain(&runs.no_gate).chain(&runs.h1) {
        let n = artifacts.config.num_agents;
        let run_bound = discounted_intrinsic_bound(
            n,
            artifacts.config.lambda_int,
            artifacts.config.c_max,
            artifacts.config.gamma,
        );
        let realized = artifacts.max_team_intrinsic / (1.0 - artifacts.config.gamma);
        assert!(
            realized <= run_bound + 1e-9 && run_bound <= 25.0 + 1e-9,
            "realized discounted intrinsic {realized} exceeds bound {run_bound}"
        );
    }
    println!("criterion 06 PASS: gate bounds, monotonicity, second-moment control, discounted bound 25.0");
}

// ---------------------------------------------------------------------------
// 7. Extrinsic-only gate value network
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_extrinsic_only_value_targets() {
    let runs = desk_runs();
    for artifacts in runs
        .magic
        .iter()
        .chain(&runs.backbone)
        .chain(&runs.no_gate)
        .chain(&runs.h1)
    {
        assert_eq!(
            artifacts.counters.shaped_reads_in_ext_value, 0,
            "{} seed {} read shaped rewards during the extrinsic value update",
            artifacts.config.method, artifacts.config.seed
        );
    }
    println!("criterion 07 PASS: zero shaped-reward reads inside extrinsic value updates across all desk runs");
}

// ---------------------------------------------------------------------------
// 8. Rollout oracle equivalence (Sep. AUC)
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_sep_auc_trained_model() {
    let runs = desk_runs();
    let artifacts = &runs.magic[0];
    let env = artifacts.config.make_env().unwrap();
    let fm = artifacts.forward_model.as_ref().expect("trained model");
    let effect_cfg = artifacts.config.effect_config();
    let counters = Counters::new();
    let contexts = magic_marl::diagnostics::sample_contexts(
        env.as_ref(),
        &artifacts.learner.actors,
        500,
        &mut ChaCha8Rng::seed_from_u64(808),
    )
    .unwrap();
    let model_auc = sep_auc(
        fm,
        env.as_ref(),
        &artifacts.learner.actors,
        &effect_cfg,
        &artifacts.feature_stats,
        &contexts,
        &mut ChaCha8Rng::seed_from_u64(809),
        &counters,
    )
    .unwrap();
    let twin = ExactTwin::new(env.as_ref());
    let twin_auc = sep_auc(
        &twin,
        env.as_ref(),
        &artifacts.learner.actors,
        &effect_cfg,
        &artifacts.feature_stats,
        &contexts,
        &mut ChaCha8Rng::seed_from_u64(809),
        &counters,
    )
    .unwrap();
    assert_eq!(twin_auc, 1.0, "exact-twin substitution must give AUC 1.0");
    assert!(
        model_auc >= 0.75,
        "trained 10-epoch model Sep. AUC {model_auc:.3} below 0.75"
    );
    println!("criterion 08 PASS: trained-model Sep. AUC {model_auc:.3} >= 0.75; exact-twin AUC = 1.0");
}

// ---------------------------------------------------------------------------
// 9. Corruption trend
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_corruption_trend() {
    let runs = desk_runs();
    let levels = [0.0, 0.1, 0.5, 1.0];
    let mut per_level_aucs: Vec<Vec<f64>> = vec![Vec::new(); levels.len()];
    for artifacts in &runs.magic {
        let env = artifacts.config.make_env().unwrap();
        let fm = artifacts.forward_model.as_ref().unwrap();
        let effect_cfg = artifacts.config.effect_config();
        let counters = Counters::new();
        let contexts = magic_marl::diagnostics::sample_contexts(
            env.as_ref(),
            &artifacts.learner.actors,
            400,
            &mut ChaCha8Rng::seed_from_u64(900 + artifacts.config.seed),
        )
        .unwrap();
        for (idx, &noise) in levels.iter().enumerate() {
            let corrupted = magic_marl::diagnostics::corrupt_model(
                fm,
                env.as_ref(),
                noise,
                77 + artifacts.config.seed,
            );
            let model: &dyn magic_marl::forward_model::Dynamics =
                if noise > 0.0 { &corrupted } else { fm };
            // Common contexts and branch draws across noise levels pair the
            // comparison.
            let auc = sep_auc(
                model,
                env.as_ref(),
                &artifacts.learner.actors,
                &effect_cfg,
                &artifacts.feature_stats,
                &contexts,
                &mut ChaCha8Rng::seed_from_u64(901 + artifacts.config.seed),
                &counters,
            )
            .unwrap();
            per_level_aucs[idx].push(auc);
        }
    }
    let median = |values: &[f64]| -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[sorted.len() / 2]
    };
    let medians: Vec<f64> = per_level_aucs.iter().map(|v| median(v)).collect();
    for pair in medians.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-12,
            "median Sep. AUC not nonincreasing: {medians:?}"
        );
    }
    assert!(
        medians[0] - medians[3] >= 0.15,
        "AUC drop {:.3} at noise 1.0 smaller than 0.15 ({medians:?})",
        medians[0] - medians[3]
    );
    println!(
        "criterion 09 PASS: median Sep. AUC over noise {levels:?} = {:?}",
        medians.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------------
// 10. Directional training gain
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_directional_training_gain() {
    let runs = desk_runs();
    let magic_mean: f64 =
        runs.magic.iter().map(|a| a.final_return).sum::<f64>() / runs.magic.len() as f64;
    let backbone_mean: f64 =
        runs.backbone.iter().map(|a| a.final_return).sum::<f64>() / runs.backbone.len() as f64;
    let paired_wins = runs
        .magic
        .iter()
        .zip(&runs.backbone)
        .filter(|(m, b)| m.final_return >= b.final_return)
        .count();
    println!(
        "criterion 10: magic finals {:?} (mean {magic_mean:.2}) vs backbone finals {:?} (mean {backbone_mean:.2}), paired wins {paired_wins}/5",
        runs.magic.iter().map(|a| a.final_return).collect::<Vec<_>>(),
        runs.backbone.iter().map(|a| a.final_return).collect::<Vec<_>>()
    );
    assert!(
        magic_mean > backbone_mean,
        "mean final return: magic {magic_mean:.2} !> backbone {backbone_mean:.2}"
    );
    assert!(
        paired_wins >= 4,
        "magic >= backbone in only {paired_wins}/5 paired seeds"
    );
    println!("criterion 10 PASS: magic mean {magic_mean:.2} > backbone mean {backbone_mean:.2}; paired {paired_wins}/5");
}

// ---------------------------------------------------------------------------
// 11. Ablation direction
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_ablation_direction() {
    let runs = desk_runs();
    let mean = |arts: &[RunArtifacts]| -> f64 {
        arts.iter().map(|a| a.final_return).sum::<f64>() / arts.len() as f64
    };
    let magic_mean = mean(&runs.magic);
    let no_gate_mean = mean(&runs.no_gate);
    let h1_mean = mean(&runs.h1);
    let wins_vs = |other: &[RunArtifacts]| -> usize {
        runs.magic
            .iter()
            .zip(other)
            .filter(|(m, o)| m.final_return >= o.final_return)
            .count()
    };
    let wins_no_gate = wins_vs(&runs.no_gate);
    let wins_h1 = wins_vs(&runs.h1);
    println!(
        "criterion 11: magic {magic_mean:.2} vs no-gate {no_gate_mean:.2} (paired {wins_no_gate}/5) vs h1 {h1_mean:.2} (paired {wins_h1}/5)"
    );
    assert!(magic_mean >= no_gate_mean, "magic mean below no-gate mean");
    assert!(magic_mean >= h1_mean, "magic mean below h1 mean");
    assert!(wins_no_gate >= 3, "magic >= no-gate in only {wins_no_gate}/5 seeds");
    assert!(wins_h1 >= 3, "magic >= h1 in only {wins_h1}/5 seeds");
    println!("criterion 11 PASS: magic {magic_mean:.2} >= no-gate {no_gate_mean:.2} and >= h1 {h1_mean:.2}");
}

// ---------------------------------------------------------------------------
// 12. Horizon gain on the delayed chain
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_delayed_chain_horizon_gain() {
    let runs = chain_runs();
    let h3_mean: f64 = runs.h3.iter().map(|a| a.final_return).sum::<f64>() / runs.h3.len() as f64;
    let h1_mean: f64 = runs.h1.iter().map(|a| a.final_return).sum::<f64>() / runs.h1.len() as f64;
    println!(
        "criterion 12: chain d=2 H=3 finals {:?} (mean {h3_mean:.2}) vs H=1 finals {:?} (mean {h1_mean:.2})",
        runs.h3.iter().map(|a| a.final_return).collect::<Vec<_>>(),
        runs.h1.iter().map(|a| a.final_return).collect::<Vec<_>>()
    );
    assert!(
        h3_mean > h1_mean,
        "H=3 mean {h3_mean:.2} does not beat H=1 mean {h1_mean:.2} under injected delay 2"
    );
    println!("criterion 12 PASS: H=3 mean {h3_mean:.2} > H=1 mean {h1_mean:.2} on the delayed chain");
}

// ---------------------------------------------------------------------------
// 13. Determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_13_byte_identical_reruns() {
    let mut config = RunConfig::default().desk_preset();
    config.method = Method::Magic;
    config.seed = 33;
    config.total_env_steps = 30_000;
    let dir_a = out_root().join("determinism-a");
    let dir_b = out_root().join("determinism-b");
    train(&config, &dir_a).unwrap();
    train(&config, &dir_b).unwrap();
    let bytes_a = std::fs::read(dir_a.join("learning_curve.csv")).unwrap();
    let bytes_b = std::fs::read(dir_b.join("learning_curve.csv")).unwrap();
    assert_eq!(bytes_a, bytes_b, "learning_curve.csv differs between reruns");
    println!("criterion 13 PASS: learning_curve.csv byte-identical across reruns");
}

// ---------------------------------------------------------------------------
// 14. Overhead report and execution-time contract
// ---------------------------------------------------------------------------

#[test]
fn criterion_14_overhead_report() {
    let runs = desk_runs();
    for artifacts in runs.magic.iter().chain(&runs.backbone) {
        let total = artifacts.wall_seconds;
        let bucketed = artifacts.timing.sum();
        assert!(
            (total - bucketed).abs() <= 0.02 * total,
            "{} seed {}: buckets {bucketed:.2}s vs wall {total:.2}s differ by more than 2%",
            artifacts.config.method,
            artifacts.config.seed
        );
        let metrics_path = artifacts.out_dir.join("metrics.json");
        let metrics: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(metrics_path).unwrap()).unwrap();
        assert!(metrics.get("effect_path_fraction").is_some());
    }
    // The backbone variant never invokes the effect machinery at all.
    for artifacts in &runs.backbone {
        assert_eq!(artifacts.counters.branch_sets, 0);
        assert_eq!(artifacts.counters.model_predictions, 0);
        assert_eq!(artifacts.timing.effect, 0.0);
        assert_eq!(artifacts.timing.fm, 0.0);
    }
    // Evaluation from a checkpoint runs zero effect-path work.
    let checkpoint = runs.magic[0].out_dir.join("checkpoint");
    let report = evaluate(&checkpoint, 10, 4141).unwrap();
    assert_eq!(report.counters.branch_sets, 0);
    assert_eq!(report.counters.model_predictions, 0);
    assert_eq!(report.counters.rollout_steps, 0);
    println!("criterion 14 PASS: buckets sum within 2% of wall; zero effect-path work during evaluation");
}

// ---------------------------------------------------------------------------
// Shared sanity check on the AUC statistic used above
// ---------------------------------------------------------------------------

#[test]
fn rank_auc_detects_perfect_and_random_ranking() {
    let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let labels: Vec<bool> = (0..100).map(|i| i >= 50).collect();
    assert_eq!(rank_auc(&scores, &labels).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let random_scores: Vec<f64> = (0..3000).map(|_| rng.random_range(0.0..1.0)).collect();
    let random_labels: Vec<bool> = (0..3000).map(|i| i % 2 == 0).collect();
    let auc = rank_auc(&random_scores, &random_labels).unwrap();
    assert!((auc - 0.5).abs() < 0.05);
}
