//! Train briefly, then evaluate the written checkpoint deterministically;
//! the effect path provably never runs at evaluation time.
//!
//! Run with: `cargo run --release --example evaluate_checkpoint`

use magic_marl::runner::{evaluate, train, RunConfig};

fn main() -> magic_marl::Result<()> {
    let mut config = RunConfig::default().desk_preset();
    config.total_env_steps = 20_000;
    config.eval_every = 10_000;
    config.seed = 5;

    let out = std::env::temp_dir().join("magic_eval_demo");
    let artifacts = train(&config, &out)?;
    println!("trained: final return {:.3}", artifacts.final_return);

    let checkpoint = out.join("checkpoint");
    let a = evaluate(&checkpoint, 10, 99)?;
    let b = evaluate(&checkpoint, 10, 99)?;
    println!("evaluation 1: mean {:.4} std {:.4}", a.mean_return, a.std_return);
    println!("evaluation 2: mean {:.4} std {:.4}", b.mean_return, b.std_return);
    assert_eq!(a.per_episode, b.per_episode, "evaluation must be deterministic");
    println!(
        "branch sets during evaluation: {} (must be 0), model predictions: {} (must be 0)",
        a.counters.branch_sets, a.counters.model_predictions
    );
    Ok(())
}
