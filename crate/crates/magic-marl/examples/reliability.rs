//! Rollout-reliability diagnostics: In-MSE, Int-MSE, and Sep. AUC for a
//! quickly trained forward model, swept over corruption levels.
//!
//! Run with: `cargo run --release --example reliability`

use magic_marl::diagnostics::{corrupt_model, in_mse, int_mse, sample_contexts, sep_auc};
use magic_marl::effect::EffectConfig;
use magic_marl::env::{EnvConfig, Environment, JointAction, ParticleEnv};
use magic_marl::forward_model::{Dynamics, ForwardModel};
use magic_marl::instrument::Counters;
use magic_marl::nn::{Activation, Adam, Mlp};
use magic_marl::stats::RunningStats;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> magic_marl::Result<()> {
    let env = ParticleEnv::new(EnvConfig::predator_prey(3))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let actors: Vec<Mlp> = (0..3)
        .map(|_| {
            Mlp::new(
                &[env.obs_dim(), 32, 2],
                &[Activation::Relu, Activation::Tanh],
                &mut rng,
            )
        })
        .collect();

    // Train the model on noisy-policy transitions.
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for episode in 0..600 {
        let mut state = env.reset_vec(episode);
        for _ in 0..env.episode_length() {
            let mut action = JointAction::zeros(3);
            for (i, actor) in actors.iter().enumerate() {
                let out = actor.forward(&env.observation_vec(&state, i))?;
                action.0[i] = [
                    (out[0] + 0.3 * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0),
                    (out[1] + 0.3 * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0),
                ];
            }
            let (next, _) = env.transition_vec(&state, &action);
            let mut row = state.clone();
            row.extend(action.flat());
            inputs.push(row);
            targets.push(next.clone());
            state = next;
        }
    }
    let rows = inputs.len();
    let x = Array2::from_shape_vec(
        (rows, env.state_dim() + 6),
        inputs.into_iter().flatten().collect(),
    )
    .expect("shape");
    let y = Array2::from_shape_vec((rows, env.state_dim()), targets.into_iter().flatten().collect())
        .expect("shape");
    let mut fm = ForwardModel::new(env.state_dim(), 6, (64, 64), &mut rng);
    let mut opt = Adam::new(fm.net());
    for _ in 0..40 {
        for start in (0..rows).step_by(256) {
            let end = (start + 256).min(rows);
            fm.train_step(
                &mut opt,
                x.slice(ndarray::s![start..end, ..]),
                y.slice(ndarray::s![start..end, ..]),
                1e-3,
                5.0,
            )?;
        }
    }

    let counters = Counters::new();
    let contexts = sample_contexts(&env, &actors, 300, &mut ChaCha8Rng::seed_from_u64(17))?;
    let effect_cfg = EffectConfig::uniform(3, 8, 5.0);
    let stats = RunningStats::new(4);
    println!("noise    In-MSE     Int-MSE    Sep.AUC");
    for noise in [0.0, 0.1, 0.5, 1.0] {
        let corrupted = corrupt_model(&fm, &env, noise, 23);
        let model: &dyn Dynamics = if noise > 0.0 { &corrupted } else { &fm };
        let in_err = in_mse(model, &env, &actors, 3, &contexts, &counters)?;
        let int_err = int_mse(
            model,
            &env,
            &actors,
            3,
            &contexts,
            &mut ChaCha8Rng::seed_from_u64(29),
            &counters,
        )?;
        let auc = sep_auc(
            model,
            &env,
            &actors,
            &effect_cfg,
            &stats,
            &contexts,
            &mut ChaCha8Rng::seed_from_u64(31),
            &counters,
        )?;
        println!("{noise:<6}   {in_err:<9.5}  {int_err:<9.5}  {auc:.3}");
    }
    Ok(())
}
