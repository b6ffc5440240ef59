//! Finite replay memory with reward-aware or FIFO insertion and uniform
//! minibatch sampling without replacement.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Transition;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPolicy {
    /// When full, a transition replaces the worst-reward entry only if its
    /// reward is strictly greater.
    RewardAware,
    /// When full, the oldest entry is evicted.
    Fifo,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    policy: InsertionPolicy,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, policy: InsertionPolicy) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            policy,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> InsertionPolicy {
        self.policy
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Index and value of the lowest stored reward (first one on ties).
    pub fn min_reward(&self) -> Option<(usize, f64)> {
        self.items
            .iter()
            .enumerate()
            .fold(None, |best, (i, t)| match best {
                Some((_, r)) if r <= t.reward => best,
                _ => Some((i, t.reward)),
            })
    }

    /// Stores `t` according to the insertion policy; returns whether it was kept.
    pub fn store(&mut self, t: Transition) -> bool {
        if !self.is_full() {
            self.items.push_back(t);
            return true;
        }
        match self.policy {
            InsertionPolicy::Fifo => {
                self.items.pop_front();
                self.items.push_back(t);
                true
            }
            InsertionPolicy::RewardAware => {
                let (idx, worst) = self.min_reward().expect("full buffer is non-empty");
                if t.reward > worst {
                    self.items[idx] = t;
                    true
                } else {
                    false
                }
            }
        }
    }

    /// `batch_size` distinct positions drawn uniformly, or `None` while the
    /// buffer holds fewer than `batch_size` transitions.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Option<Vec<usize>> {
        if batch_size == 0 || self.len() < batch_size {
            return None;
        }
        Some(index::sample(rng, self.len(), batch_size).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Option<Vec<&Transition>> {
        self.sample_indices(batch_size, rng)
            .map(|idx| idx.into_iter().map(|i| &self.items[i]).collect())
    }

    /// One JSON object per stored transition.
    pub fn dump_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.items {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
