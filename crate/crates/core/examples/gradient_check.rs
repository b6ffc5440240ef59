//! Backpropagation against central finite differences on random networks.
//!
//! `cargo run --release --example gradient_check -- [nets] [seed] [step]`

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volfit::nn::{gradient_check, Activation, Mlp};

fn main() -> volfit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let nets: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let h: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst = 0.0f64;
    for i in 0..nets {
        let dims = [
            rng.random_range(1..=12),
            rng.random_range(1..=256),
            rng.random_range(1..=256),
            rng.random_range(1..=4),
        ];
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
        let mut net = Mlp::xavier(&dims, act, &mut rng)?;
        // Zero biases put dead rows exactly on the ReLU kink.
        for layer in net.layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let batch = rng.random_range(1..=4);
        let x = Array2::from_shape_fn((batch, dims[0]), |_| rng.random_range(-2.0..2.0));
        let w = Array2::from_shape_fn((batch, dims[3]), |_| rng.random_range(-1.0..1.0));
        let n = net.num_params();
        let probes: Vec<usize> = (0..200.min(n)).map(|_| rng.random_range(0..n)).collect();
        let err = gradient_check(&net, x.view(), w.view(), &probes, h)?;
        worst = worst.max(err);
        println!("net {i:3} dims {dims:?} {act:?} params {n:6} max rel err {err:.2e}");
    }
    println!("worst {worst:.2e}");
    Ok(())
}
