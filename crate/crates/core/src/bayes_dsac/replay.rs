//! Fixed-capacity FIFO replay storage with uniform sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::ObsVec;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: ObsVec,
    /// Squashed action as applied to the environment.
    pub action: Vec<f64>,
    /// Pre-squash Gaussian sample.
    pub raw_action: Vec<f64>,
    pub reward: f64,
    pub next_obs: ObsVec,
    pub done: bool,
}

/// Flat column storage; slot `i` of every array belongs to one transition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    depth_dim: usize,
    state_dim: usize,
    action_dim: usize,
    depth: Vec<u16>,
    state: Vec<f32>,
    next_depth: Vec<u16>,
    next_state: Vec<f32>,
    action: Vec<f64>,
    raw_action: Vec<f64>,
    reward: Vec<f64>,
    done: Vec<bool>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, depth_dim: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            depth_dim,
            state_dim,
            action_dim,
            depth: Vec::new(),
            state: Vec::new(),
            next_depth: Vec::new(),
            next_state: Vec::new(),
            action: Vec::new(),
            raw_action: Vec::new(),
            reward: Vec::new(),
            done: Vec::new(),
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) {
        assert_eq!(t.obs.depth.len(), self.depth_dim);
        assert_eq!(t.obs.state.len(), self.state_dim);
        assert_eq!(t.action.len(), self.action_dim);
        let i = self.head;
        if self.len < self.capacity && i == self.reward.len() {
            self.depth.extend_from_slice(&t.obs.depth);
            self.state.extend_from_slice(&t.obs.state);
            self.next_depth.extend_from_slice(&t.next_obs.depth);
            self.next_state.extend_from_slice(&t.next_obs.state);
            self.action.extend_from_slice(&t.action);
            self.raw_action.extend_from_slice(&t.raw_action);
            self.reward.push(t.reward);
            self.done.push(t.done);
        } else {
            let (d, s, a) = (self.depth_dim, self.state_dim, self.action_dim);
            self.depth[i * d..(i + 1) * d].copy_from_slice(&t.obs.depth);
            self.state[i * s..(i + 1) * s].copy_from_slice(&t.obs.state);
            self.next_depth[i * d..(i + 1) * d].copy_from_slice(&t.next_obs.depth);
            self.next_state[i * s..(i + 1) * s].copy_from_slice(&t.next_obs.state);
            self.action[i * a..(i + 1) * a].copy_from_slice(&t.action);
            self.raw_action[i * a..(i + 1) * a].copy_from_slice(&t.raw_action);
            self.reward[i] = t.reward;
            self.done[i] = t.done;
        }
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    pub fn get(&self, i: usize) -> Transition {
        assert!(i < self.len);
        let (d, s, a) = (self.depth_dim, self.state_dim, self.action_dim);
        Transition {
            obs: ObsVec {
                depth: self.depth[i * d..(i + 1) * d].to_vec(),
                state: self.state[i * s..(i + 1) * s].to_vec(),
            },
            action: self.action[i * a..(i + 1) * a].to_vec(),
            raw_action: self.raw_action[i * a..(i + 1) * a].to_vec(),
            reward: self.reward[i],
            next_obs: ObsVec {
                depth: self.next_depth[i * d..(i + 1) * d].to_vec(),
                state: self.next_state[i * s..(i + 1) * s].to_vec(),
            },
            done: self.done[i],
        }
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(self.len > 0);
        (0..n).map(|_| rng.gen_range(0..self.len)).collect()
    }

    pub(crate) fn depth_row(&self, i: usize, next: bool) -> &[u16] {
        let d = self.depth_dim;
        let src = if next { &self.next_depth } else { &self.depth };
        &src[i * d..(i + 1) * d]
    }

    pub(crate) fn state_row(&self, i: usize, next: bool) -> &[f32] {
        let s = self.state_dim;
        let src = if next { &self.next_state } else { &self.state };
        &src[i * s..(i + 1) * s]
    }

    pub(crate) fn action_row(&self, i: usize) -> &[f64] {
        let a = self.action_dim;
        &self.action[i * a..(i + 1) * a]
    }

    pub(crate) fn reward_at(&self, i: usize) -> f64 {
        self.reward[i]
    }

    pub(crate) fn done_at(&self, i: usize) -> bool {
        self.done[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(k: u16) -> Transition {
        Transition {
            obs: ObsVec {
                depth: vec![k, k + 1],
                state: vec![k as f32],
            },
            action: vec![k as f64 * 0.1],
            raw_action: vec![k as f64],
            reward: k as f64,
            next_obs: ObsVec {
                depth: vec![k + 2, k + 3],
                state: vec![-(k as f32)],
            },
            done: k % 2 == 0,
        }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut b = ReplayBuffer::new(3, 2, 1, 1);
        for k in 0..5 {
            b.push(&tr(k));
        }
        assert_eq!(b.len(), 3);
        let stored: Vec<f64> = (0..3).map(|i| b.get(i).reward).collect();
        // Slots 0 and 1 were overwritten by transitions 3 and 4.
        assert_eq!(stored, vec![3.0, 4.0, 2.0]);
        assert_eq!(b.get(0), tr(3));
        assert_eq!(b.get(2), tr(2));
    }

    #[test]
    fn uniform_sampling_chi_square() {
        let n = 50;
        let mut b = ReplayBuffer::new(n, 2, 1, 1);
        for k in 0..n as u16 {
            b.push(&tr(k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut counts = vec![0usize; n];
        for i in b.sample_indices(draws, &mut rng) {
            counts[i] += 1;
        }
        let e = draws as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - e).powi(2) / e).sum();
        // 49 dof: the 0.999 quantile is about 85.4.
        assert!(chi2 < 85.4, "chi2 = {chi2}");
        assert!(counts.iter().all(|c| *c > 0));
    }
}
