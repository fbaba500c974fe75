//! Bounded FIFO of environment transitions with trajectory and step tags.

use super::AilError;
use crate::envs::{Origin, Trajectory, Transition};
use rand::{Rng, RngCore};
use std::collections::VecDeque;

#[derive(Clone)]
pub struct TaggedTransition {
    pub traj_id: u64,
    pub step_index: usize,
    pub transition: Transition,
}

/// Replay buffer fed exclusively by real environment rollouts; synthetic
/// model rollouts are rejected at the door. Eviction is strictly
/// oldest-first, which can leave a partial trajectory at the front.
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<TaggedTransition>,
    next_traj_id: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            next_traj_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &TaggedTransition {
        &self.items[i]
    }

    /// Appends a trajectory's transitions, evicting the oldest entries once
    /// over capacity. Returns the id assigned to this trajectory.
    pub fn push_trajectory(&mut self, traj: &Trajectory) -> Result<u64, AilError> {
        if traj.origin == Origin::Model {
            return Err(AilError::ModelOriginInBuffer);
        }
        let id = self.next_traj_id;
        self.next_traj_id += 1;
        for (i, tr) in traj.transitions.iter().enumerate() {
            self.items.push_back(TaggedTransition {
                traj_id: id,
                step_index: i,
                transition: tr.clone(),
            });
            if self.items.len() > self.capacity {
                self.items.pop_front();
            }
        }
        Ok(id)
    }

    /// Indices where a contiguous window of `len` transitions (same
    /// trajectory, consecutive steps) begins.
    pub fn window_starts(&self, len: usize) -> Vec<usize> {
        assert!(len >= 1);
        let n = self.items.len();
        if n < len {
            return Vec::new();
        }
        let mut starts = Vec::new();
        // run_len[i] would be the count of contiguous items ending at i;
        // track it incrementally instead of materializing.
        let mut run = 0usize;
        for i in 0..n {
            let contiguous = i > 0 && {
                let prev = &self.items[i - 1];
                let cur = &self.items[i];
                prev.traj_id == cur.traj_id && prev.step_index + 1 == cur.step_index
            };
            run = if contiguous { run + 1 } else { 1 };
            if run >= len {
                starts.push(i + 1 - len);
            }
        }
        starts
    }

    /// Uniformly samples `count` contiguous windows (with replacement over
    /// valid starts). None when no window of that length exists.
    pub fn sample_windows(
        &self,
        len: usize,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Option<Vec<Vec<Transition>>> {
        let starts = self.window_starts(len);
        if starts.is_empty() {
            return None;
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let s = starts[rng.gen_range(0..starts.len())];
            out.push(
                (s..s + len)
                    .map(|i| self.items[i].transition.clone())
                    .collect(),
            );
        }
        Some(out)
    }

    /// Uniform start states for synthetic planning rollouts.
    pub fn sample_start_states(&self, count: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                self.items[rng.gen_range(0..self.items.len())]
                    .transition
                    .s
                    .clone()
            })
            .collect()
    }
}
