//! Experiment CLI: `train`, `evaluate`, `sweep`, `diagnose`.

use clap::{Parser, Subcommand};
use std::path::PathBuf;

use magic_marl::diagnostics::{diagnose, run_sweep};
use magic_marl::runner::{evaluate, load_checkpoint, train, RunConfig};

#[derive(Parser)]
#[command(name = "magic-marl", version, about = "Counterfactual action-effect intrinsic rewards for cooperative MARL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training run and write its artifacts to the output directory.
    Train {
        /// Flat key=value config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Apply a named preset before the config file ("desk" or "chain").
        #[arg(long)]
        preset: Option<String>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<task>-<method>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministically evaluate a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: u32,
        /// Evaluation seed (episode seeds derive from it).
        #[arg(long, default_value_t = 1_000_003)]
        seed: u64,
    },
    /// Expand a grid file into cells and run each (training + diagnostics).
    Sweep {
        /// key=value file where values may be comma-separated lists.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
        /// Diagnostic contexts per cell.
        #[arg(long, default_value_t = 500)]
        contexts: usize,
        /// Run cells sequentially instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Reliability diagnostics for a trained checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Forward-model corruption noise scale.
        #[arg(long, default_value_t = 0.0)]
        corruption: f64,
        /// Rollout horizon for the diagnostics.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 500)]
        contexts: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn apply_preset(config: RunConfig, preset: &str) -> Result<RunConfig, String> {
    match preset {
        "desk" => Ok(config.desk_preset()),
        "chain" => Ok(config.chain_preset()),
        other => Err(format!("unknown preset '{other}' (expected 'desk' or 'chain')")),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run() -> Result<(), Box<dyn std::error::Error>> {
    match Cli::parse().command {
        Command::Train {
            config,
            preset,
            seed,
            out,
        } => {
            let mut run_config = RunConfig::default();
            if let Some(name) = preset.as_deref() {
                run_config = apply_preset(run_config, name)?;
            }
            if let Some(path) = config {
                // Preset first, then file keys override on top of it.
                let text = std::fs::read_to_string(&path)?;
                for raw in text.lines() {
                    let line = raw.split('#').next().unwrap_or("").trim();
                    if line.is_empty() {
                        continue;
                    }
                    let (k, v) = line.split_once('=').ok_or("expected key=value")?;
                    run_config.set_key(k.trim(), v.trim())?;
                }
            }
            if let Some(s) = seed {
                run_config.seed = s;
            }
            let out_dir = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!(
                    "{}-{}-s{}",
                    run_config.task, run_config.method, run_config.seed
                ))
            });
            let artifacts = train(&run_config, &out_dir)?;
            println!(
                "finished: final={:.3} best={:.3} auc={:.3} wall={:.1}s -> {}",
                artifacts.final_return,
                artifacts.best_return,
                artifacts.auc_return,
                artifacts.wall_seconds,
                out_dir.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            episodes,
            seed,
        } => {
            let report = evaluate(&checkpoint, episodes, seed)?;
            println!(
                "mean_return={:.4} std_return={:.4} episodes={} branch_sets={} model_predictions={}",
                report.mean_return,
                report.std_return,
                report.per_episode.len(),
                report.counters.branch_sets,
                report.counters.model_predictions,
            );
        }
        Command::Sweep {
            grid,
            out,
            contexts,
            sequential,
        } => {
            let text = std::fs::read_to_string(&grid)?;
            let cells = expand_grid(&text)?;
            println!("expanded {} cells", cells.len());
            let csv = run_sweep(&cells, &out, contexts, !sequential)?;
            println!("wrote {}", csv.display());
        }
        Command::Diagnose {
            checkpoint,
            corruption,
            horizon,
            contexts,
            seed,
        } => {
            let loaded = load_checkpoint(&checkpoint)?;
            let fm = loaded
                .forward_model
                .as_ref()
                .ok_or("checkpoint has no forward model (backbone run?)")?;
            let mut config = loaded.manifest.config.clone();
            if let Some(h) = horizon {
                config.horizon = h;
                config.horizon_weights = Vec::new();
            }
            let env = config.make_env()?;
            let report = diagnose(
                fm,
                env.as_ref(),
                &loaded.actors,
                &config.effect_config(),
                &loaded.manifest.feature_stats,
                corruption,
                contexts,
                seed,
            )?;
            println!(
                "in_mse={:.6} int_mse={:.6} sep_auc={:.4} H={} contexts={} corruption={}",
                report.in_mse,
                report.int_mse,
                report.sep_auc,
                report.horizon,
                report.contexts,
                report.corruption
            );
        }
    }
    Ok(())
}

/// Expands a key=value grid file (comma-separated value lists) into the cross
/// product of run configs. A `preset=` line applies before other keys.
fn expand_grid(text: &str) -> Result<Vec<RunConfig>, Box<dyn std::error::Error>> {
    let mut base = RunConfig::default();
    let mut swept: Vec<(String, Vec<String>)> = Vec::new();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or("grid lines must be key=value")?;
        let key = key.trim();
        let value = value.trim();
        if key == "preset" {
            base = apply_preset(base, value)?;
            continue;
        }
        // `horizon_weights` legitimately contains commas; treat it as scalar.
        let values: Vec<String> = if key == "horizon_weights" {
            vec![value.to_string()]
        } else {
            value.split(',').map(|v| v.trim().to_string()).collect()
        };
        if values.len() == 1 {
            base.set_key(key, &values[0])?;
        } else {
            swept.push((key.to_string(), values));
        }
    }
    let mut cells = vec![base];
    for (key, values) in swept {
        let mut expanded = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for value in &values {
                let mut next = cell.clone();
                next.set_key(&key, value)?;
                expanded.push(next);
            }
        }
        cells = expanded;
    }
    Ok(cells)
}
