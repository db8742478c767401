//! Short desk-scale training run with the full intrinsic-reward pipeline,
//! printing the learning curve and the phase timing report.
//!
//! Run with: `cargo run --release --example train_desk`

use magic_marl::runner::{train, RunConfig};

fn main() -> magic_marl::Result<()> {
    let mut config = RunConfig::default().desk_preset();
    config.total_env_steps = 40_000;
    config.eval_every = 5_000;
    config.seed = 3;

    let out = std::env::temp_dir().join("magic_desk_demo");
    let artifacts = train(&config, &out)?;

    println!("step      mean_return  std");
    for p in &artifacts.curve {
        println!("{:<9} {:<12.3} {:.3}", p.step, p.mean_return, p.std_return);
    }
    println!(
        "\nfinal {:.3}  best {:.3}  auc {:.3}",
        artifacts.final_return, artifacts.best_return, artifacts.auc_return
    );
    let t = &artifacts.timing;
    println!(
        "timing: env {:.1}s  backbone {:.1}s  fm {:.1}s  effect {:.1}s  gate {:.1}s (wall {:.1}s)",
        t.env, t.backbone, t.fm, t.effect, t.gate, artifacts.wall_seconds
    );
    println!(
        "branch sets {}  model predictions {}",
        artifacts.counters.branch_sets, artifacts.counters.model_predictions
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
