//! Fixed-capacity ring buffer of joint transitions.

use rand::Rng;

use crate::env::{JointAction, JointObs};
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;

/// One team step: every agent's observation and action, the shared reward,
/// and the next joint observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: JointObs,
    pub actions: JointAction,
    pub reward: f64,
    pub next_obs: JointObs,
    pub done: bool,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        let n = self.obs.len();
        if n == 0 || self.next_obs.len() != n || self.actions.n_agents() != n {
            return Err(Error::Shape(format!(
                "transition blocks disagree: {} obs, {} next obs, {} actions",
                n,
                self.next_obs.len(),
                self.actions.n_agents()
            )));
        }
        if !self.reward.is_finite() {
            return Err(Error::Numeric("transition reward".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            cursor: 0,
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

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate()?;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_chronological(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    fn draw_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        Ok(self
            .draw_indices(n, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    /// `n` joint observations drawn uniformly with replacement; actions are
    /// not part of the result.
    pub fn sample_observations<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&JointObs>> {
        Ok(self
            .draw_indices(n, rng)?
            .into_iter()
            .map(|i| &self.items[i].obs)
            .collect())
    }
}
