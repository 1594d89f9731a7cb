//! Training buffer for incremental self-training.
//!
//! A fixed-capacity buffer keeps the `b` most recently arrived entries and
//! evicts the oldest first; an unbounded buffer keeps everything.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BufferError {
    #[error("arrival order {got} is not after the newest entry {newest}")]
    NonMonotoneArrival { newest: u64, got: u64 },
    #[error("fixed buffer capacity must be positive")]
    ZeroCapacity,
}

/// A training example with a gold or pseudo label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub features: Vec<f64>,
    pub label: usize,
    pub arrival_order: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Capacity {
    Fixed(usize),
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    entries: VecDeque<Labeled>,
    capacity: Capacity,
}

impl Buffer {
    pub fn new(capacity: Capacity) -> Result<Self, BufferError> {
        if capacity == Capacity::Fixed(0) {
            return Err(BufferError::ZeroCapacity);
        }
        Ok(Buffer { entries: VecDeque::new(), capacity })
    }

    pub fn capacity(&self) -> Capacity {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Labeled> {
        self.entries.iter()
    }

    pub fn to_vec(&self) -> Vec<Labeled> {
        self.entries.iter().cloned().collect()
    }

    fn newest(&self) -> Option<u64> {
        self.entries.back().map(|e| e.arrival_order)
    }

    /// Appends `items` in order, evicting from the front under a fixed
    /// capacity. Arrival orders must strictly increase across the existing
    /// entries and the new items; on error the buffer is left unchanged.
    pub fn insert<I>(&mut self, items: I) -> Result<(), BufferError>
    where
        I: IntoIterator<Item = Labeled>,
    {
        let items: Vec<Labeled> = items.into_iter().collect();
        let mut newest = self.newest();
        for item in &items {
            if let Some(n) = newest {
                if item.arrival_order <= n {
                    return Err(BufferError::NonMonotoneArrival { newest: n, got: item.arrival_order });
                }
            }
            newest = Some(item.arrival_order);
        }
        let keep_from = match self.capacity {
            Capacity::Fixed(b) => items.len().saturating_sub(b),
            Capacity::Unbounded => 0,
        };
        self.entries.extend(items.into_iter().skip(keep_from));
        if let Capacity::Fixed(b) = self.capacity {
            let excess = self.entries.len().saturating_sub(b);
            self.entries.drain(..excess);
        }
        Ok(())
    }
}
