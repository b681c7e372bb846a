use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{CisacError, Result};

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
}

/// Transitions stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub costs: Array1<f64>,
    pub next_states: Array2<f64>,
}

impl Batch {
    pub fn from_experiences(items: &[&Experience]) -> Result<Self> {
        let first = items.first().ok_or_else(|| CisacError::Usage("empty batch".into()))?;
        let (ds, da) = (first.state.len(), first.action.len());
        if items.iter().any(|e| e.state.len() != ds || e.next_state.len() != ds || e.action.len() != da) {
            return Err(CisacError::Usage("mixed transition sizes in batch".into()));
        }
        let n = items.len();
        Ok(Batch {
            states: Array2::from_shape_fn((n, ds), |(i, j)| items[i].state[j]),
            actions: Array2::from_shape_fn((n, da), |(i, j)| items[i].action[j]),
            rewards: items.iter().map(|e| e.reward).collect(),
            costs: items.iter().map(|e| e.cost).collect(),
            next_states: Array2::from_shape_fn((n, ds), |(i, j)| items[i].next_state[j]),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Fixed-capacity ring with FIFO eviction.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CisacError::Usage("replay capacity must be >= 1".into()));
        }
        Ok(ReplayBuffer { capacity, items: Vec::new(), next: 0 })
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

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.items.get(i)
    }

    /// Distinct indices drawn uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch == 0 || batch > self.items.len() {
            return Err(CisacError::Usage(format!("cannot draw {batch} from {} transitions", self.items.len())));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch).into_vec())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(batch, rng)?;
        let items: Vec<&Experience> = idx.iter().map(|&i| &self.items[i]).collect();
        Batch::from_experiences(&items)
    }
}
