use crate::vector::{rank_cmp, ItemId};

/// Bounded best-k list ordered by (distance, id). Holds each id at most once.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    items: Vec<(f32, ItemId)>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.k
    }

    /// Distance of the current k-th entry, if the list is full.
    pub fn worst(&self) -> Option<f32> {
        if self.is_full() {
            self.items.last().map(|e| e.0)
        } else {
            None
        }
    }

    pub fn push(&mut self, distance: f32, id: ItemId) {
        if self.k == 0 {
            return;
        }
        if let Some(last) = self.items.last() {
            if self.is_full() && rank_cmp((distance, id), *last).is_ge() {
                return;
            }
        }
        if self.items.iter().any(|e| e.1 == id) {
            return;
        }
        let pos = self
            .items
            .partition_point(|e| rank_cmp(*e, (distance, id)).is_lt());
        self.items.insert(pos, (distance, id));
        self.items.truncate(self.k);
    }

    pub fn as_slice(&self) -> &[(f32, ItemId)] {
        &self.items
    }

    pub fn into_vec(self) -> Vec<(f32, ItemId)> {
        self.items
    }
}
