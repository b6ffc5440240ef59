//! Fill reward-aware and FIFO buffers with random transitions and check them
//! against a sorted-list oracle.
//!
//! `cargo run --release --example replay_buffer -- [stores] [capacity] [seed]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volfit::env::Transition;
use volfit::replay::{InsertionPolicy, ReplayBuffer};

fn transition(reward: f64, tag: usize) -> Transition {
    Transition {
        state: vec![tag as f64],
        action: [0.0; 3],
        reward,
        next_state: vec![tag as f64],
        done: false,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stores: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100_000);
    let capacity: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut aware = ReplayBuffer::new(capacity, InsertionPolicy::RewardAware);
    let mut fifo = ReplayBuffer::new(capacity, InsertionPolicy::Fifo);
    let mut oracle: Vec<f64> = Vec::new();
    let mut last_min = f64::NEG_INFINITY;
    let mut kept = 0usize;
    for i in 0..stores {
        // Coarse rewards make ties common.
        let r = -(rng.random_range(0..500) as f64) / 100.0;
        kept += aware.store(transition(r, i)) as usize;
        fifo.store(transition(r, i));

        oracle.push(r);
        oracle.sort_by(|a, b| b.total_cmp(a));
        oracle.truncate(capacity);

        let min = aware.min_reward().map(|(_, m)| m).unwrap();
        assert!(min >= last_min || aware.len() < capacity, "minimum decreased");
        assert_eq!(min, *oracle.last().unwrap());
        if aware.is_full() {
            last_min = min;
        }
    }
    let mut held: Vec<f64> = aware.iter().map(|t| t.reward).collect();
    held.sort_by(|a, b| b.total_cmp(a));
    assert_eq!(held, oracle, "reward-aware contents differ from the top-k oracle");

    let tags: Vec<usize> = fifo.iter().map(|t| t.state[0] as usize).collect();
    let expected: Vec<usize> = (stores.saturating_sub(capacity)..stores).collect();
    assert_eq!(tags, expected, "FIFO order broken");

    let batch = aware.sample(64, &mut rng).map_or(0, |b| b.len());
    println!(
        "{stores} stores, capacity {capacity}: reward-aware kept {kept}, min reward {:.2}, FIFO holds {}..{}, sampled {batch}",
        last_min,
        expected.first().copied().unwrap_or(0),
        stores
    );
}
