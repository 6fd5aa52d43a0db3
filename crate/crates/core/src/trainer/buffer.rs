//! Fixed-capacity experience storage.

use rand::Rng;

use crate::error::{Error, Result};

/// One environment step as stored for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Observations of all agents, concatenated.
    pub obs: Vec<f64>,
    /// Joint base actions, agent-major.
    pub base: Vec<f64>,
    /// Joint executed actions, agent-major.
    pub action: Vec<f64>,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub next_state: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// Step index within the episode.
    pub t: usize,
    /// `Σ_{t′≤t} c_{t′}` per cost.
    pub cost_prefix: Vec<f64>,
}

/// Ring buffer: once full, each push overwrites the oldest entry.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    next: usize,
    pushed: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer capacity must be positive"));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
            pushed: 0,
        })
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

    /// Total pushes over the buffer's lifetime.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
        self.pushed += 1;
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// Entries from oldest to newest.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` distinct slot indices drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::EmptyBatch("replay sample"));
        }
        if n > self.items.len() {
            return Err(Error::invalid(format!(
                "cannot draw {n} distinct entries from {}",
                self.items.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), n).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter_ordered().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(b.pushed(), 5);
    }

    #[test]
    fn sampling_is_distinct_and_bounded() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..10 {
            b.push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s: Vec<i32> = b.sample(10, &mut rng).unwrap().into_iter().copied().collect();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert!(b.sample(11, &mut rng).is_err());
        assert!(ReplayBuffer::<u8>::new(0).is_err());
    }
}
