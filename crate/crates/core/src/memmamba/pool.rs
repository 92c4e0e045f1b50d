use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::memmamba::PoolPolicy;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub vec: Tensor,
    pub layer: usize,
    pub step: usize,
    pub score: f64,
}

pub trait Scored {
    fn score(&self) -> f64;
}

impl Scored for StateSummary {
    fn score(&self) -> f64 {
        self.score
    }
}

/// What an insertion did to the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsertOutcome {
    Appended,
    /// The entry at this index was evicted before appending.
    Evicted(usize),
    Rejected,
}

/// Bounded pool kept in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePool<E = StateSummary> {
    entries: Vec<E>,
    capacity: usize,
    policy: PoolPolicy,
}

impl<E: Scored> StatePool<E> {
    pub fn new(capacity: usize, policy: PoolPolicy) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            policy,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> PoolPolicy {
        self.policy
    }

    pub fn entries(&self) -> &[E] {
        &self.entries
    }

    /// Decides where `score` would go without touching the pool. Priority
    /// eviction removes the lowest score, oldest first on ties, and rejects
    /// an incoming entry that does not beat it.
    pub fn plan(&self, score: f64) -> InsertOutcome {
        if self.entries.len() < self.capacity {
            return InsertOutcome::Appended;
        }
        match self.policy {
            PoolPolicy::Fifo => InsertOutcome::Evicted(0),
            PoolPolicy::Priority => {
                let mut idx = 0;
                for (i, e) in self.entries.iter().enumerate().skip(1) {
                    if e.score() < self.entries[idx].score() {
                        idx = i;
                    }
                }
                if score <= self.entries[idx].score() {
                    InsertOutcome::Rejected
                } else {
                    InsertOutcome::Evicted(idx)
                }
            }
        }
    }

    /// Applies a previously planned outcome.
    pub fn apply(&mut self, entry: E, outcome: InsertOutcome) {
        match outcome {
            InsertOutcome::Appended => self.entries.push(entry),
            InsertOutcome::Evicted(i) => {
                self.entries.remove(i);
                self.entries.push(entry);
            }
            InsertOutcome::Rejected => {}
        }
        debug_assert!(self.entries.len() <= self.capacity);
    }

    pub fn push(&mut self, entry: E) -> InsertOutcome {
        let outcome = self.plan(entry.score());
        self.apply(entry, outcome);
        outcome
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

impl StatePool<StateSummary> {
    pub fn insert(&mut self, s: StateSummary) -> Result<InsertOutcome> {
        if let Some(first) = self.entries.first() {
            if first.vec.len() != s.vec.len() {
                return Err(dim_err(format!(
                    "summary has {} dims, pool holds {}",
                    s.vec.len(),
                    first.vec.len()
                )));
            }
        }
        Ok(self.push(s))
    }
}
