use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// A lower-is-better key with an id tie-breaker. Ordering is total: equal
/// keys order by ascending id, so "best" is smallest `(key, id)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Keyed {
    pub key: f64,
    pub id: u32,
}

impl PartialEq for Keyed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Keyed {}

impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Keyed {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key).then(self.id.cmp(&other.id))
    }
}

/// Bounded collector keeping the `k` smallest [`Keyed`] values.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Keyed>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK { k, heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1) }
    }

    pub fn push(&mut self, key: f64, id: u32) {
        if self.k == 0 {
            return;
        }
        let item = Keyed { key, id };
        if self.heap.len() < self.k {
            self.heap.push(item);
        } else if item < *self.heap.peek().unwrap() {
            self.heap.pop();
            self.heap.push(item);
        }
    }

    pub fn extend(&mut self, other: TopK) {
        for item in other.heap {
            self.push(item.key, item.id);
        }
    }

    /// Best first.
    pub fn into_sorted(self) -> Vec<Keyed> {
        self.heap.into_sorted_vec()
    }
}
