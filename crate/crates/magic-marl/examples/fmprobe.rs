use magic_marl::env::{EnvConfig, Environment, JointAction, ParticleEnv};
use magic_marl::forward_model::ForwardModel;
use magic_marl::nn::{Adam};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let env = ParticleEnv::new(EnvConfig::predator_prey(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let episodes = 4000u64;
    let steps = episodes as usize * 25;
    let mut inputs = Array2::zeros((steps, env.state_dim() + 10));
    let mut targets = Array2::zeros((steps, env.state_dim()));
    let mut row = 0;
    for ep in 0..episodes {
        let mut state = env.reset_vec(ep);
        for _ in 0..25 {
            let mut action = JointAction::zeros(5);
            for i in 0..5 { for c in 0..2 { action.0[i][c] = rng.random_range(-1.0..1.0); } }
            let (next, _) = env.transition_vec(&state, &action);
            for d in 0..env.state_dim() { inputs[[row,d]] = state[d]; targets[[row,d]] = next[d]; }
            for (d,v) in action.flat().iter().enumerate() { inputs[[row, env.state_dim()+d]] = *v; }
            state = next; row += 1;
        }
    }
    let mut fm = ForwardModel::new(env.state_dim(), 10, (256, 256), &mut rng);
    let mut opt = Adam::new(fm.net());
    for epoch in 0..60 {
        let lr = if epoch >= 45 { 1e-4 } else if epoch >= 25 { 3e-4 } else { 1e-3 };
        for start in (0..steps).step_by(512) {
            let end = (start+512).min(steps);
            fm.train_step(&mut opt, inputs.slice(s![start..end, ..]), targets.slice(s![start..end, ..]), lr, 5.0).unwrap();
        }
    }
    // held out
    let mut test_in = Array2::zeros((5000, env.state_dim()+10));
    let mut test_tg = Array2::zeros((5000, env.state_dim()));
    let mut row = 0;
    'outer: for ep in 0..300u64 {
        let mut state = env.reset_vec(1_000_000+ep);
        for _ in 0..25 {
            let mut action = JointAction::zeros(5);
            for i in 0..5 { for c in 0..2 { action.0[i][c] = rng.random_range(-1.0..1.0); } }
            let (next,_) = env.transition_vec(&state, &action);
            for d in 0..env.state_dim() { test_in[[row,d]] = state[d]; test_tg[[row,d]] = next[d]; }
            for (d,v) in action.flat().iter().enumerate() { test_in[[row, env.state_dim()+d]] = *v; }
            state = next; row += 1;
            if row == 5000 { break 'outer; }
        }
    }
    let pred = fm.predict_batch(test_in.view()).unwrap();
    println!("dim   mse        delta_var");
    for d in 0..env.state_dim() {
        let mut mse = 0.0; let mut mean = 0.0;
        for r in 0..5000 { mean += test_tg[[r,d]] - test_in[[r,d]]; }
        mean /= 5000.0;
        let mut var = 0.0;
        for r in 0..5000 {
            let diff = pred[[r,d]] - test_tg[[r,d]]; mse += diff*diff;
            let delta = test_tg[[r,d]] - test_in[[r,d]] - mean; var += delta*delta;
        }
        println!("{:3}  {:.6}  {:.6}", d, mse/5000.0, var/5000.0);
    }
}
