//! One-step blindness on the delayed-effect chain, under exact dynamics.
//!
//! The source agent's action reaches its teammate only after `d` steps, so
//! the action-effect score is exactly zero for horizons below `d` and turns
//! positive at `d`.
//!
//! Run with: `cargo run --example delayed_effects`

use magic_marl::effect::{aggregate_score, branch_distances, build_branches};
use magic_marl::env::{Environment, JointAction};
use magic_marl::instrument::Counters;
use magic_marl::nn::{Activation, Mlp};
use magic_marl::oracle::{DelayedChain, ExactTwin};
use magic_marl::stats::RunningStats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> magic_marl::Result<()> {
    let counters = Counters::new();
    let stats = RunningStats::new(4);
    for delay in [2u32, 3] {
        let chain = DelayedChain::with_delay(delay);
        let twin = ExactTwin::new(&chain);
        let policies: Vec<Mlp> = (0..2)
            .map(|_| Mlp::zeros(&[chain.obs_dim(), 4, 2], &[Activation::Relu, Activation::Tanh]))
            .collect();
        let start = chain.reset_vec(0);
        let action = JointAction(vec![[1.0, 0.0], [0.0, 0.0]]);
        println!("chain delay d = {delay}");
        for horizon in 1..=4usize {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut set = build_branches(&start, &action, 0, 8, &mut rng, &counters)?;
            set.fill_rollouts(&twin, &policies, &chain, horizon, &counters)?;
            let distances = branch_distances(&chain, &set, &stats)?;
            let weights = vec![1.0 / horizon as f64; horizon];
            let (score, _) = aggregate_score(&distances, &weights, 2)?;
            let marker = if score > 1e-9 { "detected" } else { "blind" };
            println!("  H = {horizon}: score = {score:.6}  ({marker})");
        }
    }
    Ok(())
}
