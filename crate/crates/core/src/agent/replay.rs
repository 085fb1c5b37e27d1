use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::perceived::{ActionIndex, PolicyState};
use crate::scalar::Real;

/// `(S_t, A_t, R_{t+1}, S_{t+1}, done)` tagged with the head that acted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Transition<T> {
    pub state: PolicyState<T>,
    pub action: ActionIndex,
    pub reward: T,
    pub next_state: PolicyState<T>,
    pub done: bool,
    pub head: usize,
}

/// Fixed-capacity ring buffer shared by all heads.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<Transition<T>>,
    next: usize,
    inserted: u64,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            inserted: 0,
        }
    }

    /// Appends, evicting the oldest transition once full.
    pub fn push(&mut self, t: Transition<T>) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total pushes since creation, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition<T>> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition<T>> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(r: f64) -> Transition<f64> {
        let s = PolicyState {
            features: vec![0.0; 3],
            mask: vec![true],
        };
        Transition {
            state: s.clone(),
            action: ActionIndex(0),
            reward: r,
            next_state: s,
            done: false,
            head: 0,
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(2);
        for r in [1.0, 2.0, 3.0] {
            buf.push(tr(r));
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0]);
        assert_eq!(buf.inserted(), 3);
    }

    #[test]
    fn never_exceeds_capacity() {
        let mut buf = ReplayBuffer::new(7);
        for i in 0..10_000 {
            buf.push(tr(i as f64));
            assert!(buf.len() <= 7);
        }
        let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, (9993..10_000).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn single_element_sampling() {
        let mut buf = ReplayBuffer::new(4);
        buf.push(tr(5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = buf.sample(8, &mut rng);
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|t| t.reward == 5.0));
        assert!(ReplayBuffer::<f64>::new(1).sample(3, &mut rng).is_empty());
    }
}
