use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Fixed-capacity ring buffer; the oldest entry is overwritten when full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
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

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = T>) {
        for item in items {
            self.push(item);
        }
    }

    /// `n` distinct entries drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&T>> {
        if n > self.items.len() {
            return Err(Error::InsufficientData {
                needed: n,
                available: self.items.len(),
            });
        }
        Ok(index::sample(rng, self.items.len(), n).into_iter().map(|k| &self.items[k]).collect())
    }
}
