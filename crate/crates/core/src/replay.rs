//! Proportional prioritized experience replay.
//!
//! A transition with leaf priority `p_i` is drawn with probability
//! `p_i / sum_j p_j`, where `p_i = (|td_error| + priority_epsilon)^alpha`.
//! Draws are stratified: the priority mass is cut into `batch_size` equal
//! segments and one point is drawn uniformly inside each. Importance weights
//! `(N * P(i))^-beta` are divided by the batch maximum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::ReplayError;

/// One learning sample for a Q-head.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    /// Possibly a discounted sum over several environment steps.
    pub reward: f64,
    /// `gamma^n` for a span of `n` steps, 0 when the episode ended.
    pub discount: f64,
    pub next_obs: Observation,
}

/// Binary sum tree over a power-of-two number of leaves.
///
/// Node `1` is the root, node `k` has children `2k` and `2k + 1`, and leaf
/// `i` lives at node `capacity + i`. Index 0 is unused.
#[derive(Clone, Debug)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    /// `capacity` is rounded up to a power of two.
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1).next_power_of_two();
        SumTree { capacity, nodes: vec![0.0; 2 * capacity] }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.capacity + leaf]
    }

    pub fn leaves(&self) -> &[f64] {
        &self.nodes[self.capacity..]
    }

    /// Internal node sums, root first (`nodes[1..capacity]`).
    pub fn internal(&self) -> &[f64] {
        &self.nodes[1..self.capacity]
    }

    pub fn set(&mut self, leaf: usize, priority: f64) {
        assert!(leaf < self.capacity, "leaf {leaf} out of range");
        assert!(priority >= 0.0 && priority.is_finite(), "invalid priority {priority}");
        let mut node = self.capacity + leaf;
        self.nodes[node] = priority;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative-priority interval contains `mass`.
    ///
    /// Never returns a zero-priority leaf while the total is positive.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.capacity {
            let left = self.nodes[2 * node];
            let right = self.nodes[2 * node + 1];
            if left > 0.0 && (mass < left || right <= 0.0) {
                node = 2 * node;
            } else {
                mass -= left;
                node = 2 * node + 1;
            }
        }
        node - self.capacity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerConfig {
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_epsilon: f64,
    pub capacity: usize,
    pub min_size_to_sample: usize,
}

impl Default for PerConfig {
    fn default() -> Self {
        PerConfig {
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_epsilon: 1e-6,
            capacity: 100_000,
            min_size_to_sample: 1_000,
        }
    }
}

impl PerConfig {
    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |m: &str| Err(ReplayError::Config(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(0.0 <= self.beta_start && self.beta_start <= self.beta_end && self.beta_end <= 1.0) {
            return bad("need 0 <= beta_start <= beta_end <= 1");
        }
        if !(self.priority_epsilon > 0.0) {
            return bad("priority_epsilon must be > 0");
        }
        if self.capacity == 0 {
            return bad("capacity must be > 0");
        }
        Ok(())
    }

    pub fn leaf_priority(&self, raw: f64) -> f64 {
        (raw.abs() + self.priority_epsilon).powf(self.alpha)
    }
}

/// Linear interpolation from `beta_start` to `beta_end`.
pub fn beta_schedule(cfg: &PerConfig, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return cfg.beta_end;
    }
    let frac = (step.min(total_steps) as f64) / (total_steps as f64);
    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac
}

/// Handle to a sampled slot. Goes stale once the slot is overwritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    generation: u64,
}

#[derive(Clone, Debug)]
pub struct SampledBatch {
    pub transitions: Vec<Transition>,
    pub indices: Vec<SampleIndex>,
    pub is_weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PrioritizedReplay {
    config: PerConfig,
    tree: SumTree,
    slots: Vec<Transition>,
    generations: Vec<u64>,
    cursor: usize,
    writes: u64,
    max_leaf: f64,
}

impl PrioritizedReplay {
    pub fn new(config: PerConfig) -> Result<Self, ReplayError> {
        config.validate()?;
        Ok(PrioritizedReplay {
            tree: SumTree::new(config.capacity),
            slots: Vec::with_capacity(config.capacity.min(1 << 16)),
            generations: Vec::with_capacity(config.capacity.min(1 << 16)),
            cursor: 0,
            writes: 0,
            max_leaf: 1.0,
            config,
        })
    }

    pub fn config(&self) -> &PerConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn can_sample(&self) -> bool {
        self.len() >= self.config.min_size_to_sample.max(1)
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    /// Largest leaf priority seen so far (starts at 1).
    pub fn max_leaf(&self) -> f64 {
        self.max_leaf
    }

    fn write(&mut self, t: Transition, leaf: f64) -> usize {
        let slot = self.cursor;
        self.writes += 1;
        if slot == self.slots.len() {
            self.slots.push(t);
            self.generations.push(self.writes);
        } else {
            self.slots[slot] = t;
            self.generations[slot] = self.writes;
        }
        self.tree.set(slot, leaf);
        self.max_leaf = self.max_leaf.max(leaf);
        self.cursor = (self.cursor + 1) % self.config.capacity;
        slot
    }

    /// Store with leaf priority `(priority + priority_epsilon)^alpha`,
    /// overwriting the oldest entry when full. Returns the slot.
    pub fn insert(&mut self, t: Transition, priority: f64) -> usize {
        assert!(priority >= 0.0, "priority must be non-negative");
        let leaf = self.config.leaf_priority(priority);
        self.write(t, leaf)
    }

    /// Store with the current maximum leaf priority.
    pub fn push(&mut self, t: Transition) -> usize {
        let leaf = self.max_leaf;
        self.write(t, leaf)
    }

    pub fn get(&self, slot: usize) -> &Transition {
        &self.slots[slot]
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        beta: f64,
        rng: &mut R,
    ) -> Result<SampledBatch, ReplayError> {
        if !self.can_sample() {
            return Err(ReplayError::NotEnoughSamples {
                size: self.len(),
                required: self.config.min_size_to_sample.max(1),
            });
        }
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        let n = self.len() as f64;

        let mut transitions = Vec::with_capacity(batch_size);
        let mut indices = Vec::with_capacity(batch_size);
        let mut is_weights = Vec::with_capacity(batch_size);
        for k in 0..batch_size {
            let mass = segment * (k as f64 + rng.gen::<f64>());
            let slot = self.tree.find(mass).min(self.len() - 1);
            let p = self.tree.get(slot) / total;
            is_weights.push((n * p).powf(-beta));
            transitions.push(self.slots[slot].clone());
            indices.push(SampleIndex { slot, generation: self.generations[slot] });
        }
        let max_w = is_weights.iter().cloned().fold(f64::MIN, f64::max);
        is_weights.iter_mut().for_each(|w| *w /= max_w);
        Ok(SampledBatch { transitions, indices, is_weights })
    }

    /// Refresh leaf priorities from new TD errors. Stale indices are skipped.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) {
        assert_eq!(indices.len(), td_errors.len());
        for (idx, &err) in indices.iter().zip(td_errors) {
            if self.generations.get(idx.slot) != Some(&idx.generation) {
                continue;
            }
            let leaf = self.config.leaf_priority(err);
            self.tree.set(idx.slot, leaf);
            self.max_leaf = self.max_leaf.max(leaf);
        }
    }
}
