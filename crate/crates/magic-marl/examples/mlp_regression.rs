//! Fit a 1-D function with the dense-network substrate and Adam.
//!
//! Run with: `cargo run --example mlp_regression`

use magic_marl::nn::{Activation, Adam, Mlp};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> magic_marl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = Mlp::new(
        &[1, 32, 32, 1],
        &[Activation::Tanh, Activation::Tanh, Activation::Identity],
        &mut rng,
    );
    let mut opt = Adam::new(&net);

    // Target: y = sin(3x) on [-1, 1].
    let samples = 256;
    let mut inputs = Array2::zeros((samples, 1));
    let mut targets = Array2::zeros((samples, 1));
    for i in 0..samples {
        let x: f64 = rng.random_range(-1.0..1.0);
        inputs[[i, 0]] = x;
        targets[[i, 0]] = (3.0 * x).sin();
    }

    for epoch in 0..2000 {
        let trace = net.forward_trace(inputs.view())?;
        let pred = trace.output();
        let mut upstream = Array2::zeros((samples, 1));
        let mut loss = 0.0;
        for i in 0..samples {
            let diff = pred[[i, 0]] - targets[[i, 0]];
            loss += diff * diff;
            upstream[[i, 0]] = 2.0 * diff / samples as f64;
        }
        let grads = net.backward(&trace, upstream.view())?;
        opt.update(&mut net, &grads, 1e-3)?;
        if epoch % 400 == 0 {
            println!("epoch {epoch:4}  mse {:.6}", loss / samples as f64);
        }
    }

    for x in [-0.9, -0.3, 0.0, 0.5, 0.9] {
        let y = net.forward(&[x])?[0];
        println!("f({x:+.1}) = {y:+.4}   sin(3x) = {:+.4}", (3.0 * x).sin());
    }
    Ok(())
}
