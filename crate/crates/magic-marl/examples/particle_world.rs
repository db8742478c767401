//! Roll one predator-prey episode with a hand-scripted chase policy and
//! export the trace as CSV.
//!
//! Run with: `cargo run --example particle_world`

use magic_marl::env::{
    write_trace_csv, EnvConfig, Environment, JointAction, ParticleEnv, TraceRow,
};

fn main() -> magic_marl::Result<()> {
    let env = ParticleEnv::new(EnvConfig::predator_prey(3))?;
    let mut state = env.reset(7);
    let mut rows = Vec::new();
    let mut total_reward = 0.0;

    while state.step_index < env.config.episode_length {
        let vec = env.centralized_state(&state);
        // Scripted chase: accelerate straight at the prey.
        let prey = [vec[12], vec[13]];
        let mut action = JointAction::zeros(3);
        for i in 0..3 {
            let dx = prey[0] - vec[4 * i];
            let dy = prey[1] - vec[4 * i + 1];
            let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
            action.0[i] = [dx / norm, dy / norm];
        }
        let result = env.step(&state, &action)?;
        total_reward += result.team_reward;
        rows.push(TraceRow {
            step: state.step_index,
            state: vec,
            action: action.flat(),
            team_reward: result.team_reward,
        });
        state = result.next_state;
    }

    let path = std::env::temp_dir().join("predator_prey_trace.csv");
    write_trace_csv(std::fs::File::create(&path)?, &rows)?;
    println!("episode return {total_reward:.1} over {} steps", rows.len());
    println!("trace written to {}", path.display());
    Ok(())
}
