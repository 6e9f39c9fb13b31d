use crate::ann::{SearchHit, VectorStore};
use crate::error::Result;
use crate::exec::{map_chunks, map_ordered, Exec};
use crate::topk::TopK;
use crate::vectors::{Space, Vector};

const SCAN_CHUNK: usize = 4096;

/// Exhaustive scan; exact top-k with ties broken by lower id.
#[derive(Clone, Debug)]
pub struct BruteForceIndex {
    store: VectorStore,
}

impl BruteForceIndex {
    pub fn new(store: VectorStore) -> Self {
        BruteForceIndex { store }
    }

    pub fn build(space: Space, vectors: Vec<Vector>) -> Result<Self> {
        Ok(BruteForceIndex { store: VectorStore::from_vectors(space, vectors)? })
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn search(&self, q: &Vector, k: usize) -> Result<Vec<SearchHit>> {
        self.search_with(q, k, Exec::Sequential)
    }

    /// Single-query scan; with [`Exec::Parallel`] the scan is split into
    /// fixed chunks whose partial top-k lists are merged in order.
    pub fn search_with(&self, q: &Vector, k: usize, exec: Exec) -> Result<Vec<SearchHit>> {
        if self.store.is_empty() {
            return Ok(Vec::new());
        }
        self.store.check_query(q)?;
        let space = self.store.space();
        let vectors = self.store.vectors();
        let partials = map_chunks(exec, &(0..vectors.len() as u32).collect::<Vec<_>>(), SCAN_CHUNK, |ids| {
            let mut top = TopK::new(k);
            for &id in ids {
                top.push(space.distance(q, &vectors[id as usize]), id);
            }
            top
        });
        let mut top = TopK::new(k);
        for p in partials {
            top.extend(p);
        }
        Ok(top
            .into_sorted()
            .into_iter()
            .map(|c| SearchHit { id: c.id, score: space.score_from_distance(c.key) })
            .collect())
    }

    /// One sequential scan per query, queries spread across threads.
    pub fn search_batch(&self, queries: &[Vector], k: usize, exec: Exec) -> Result<Vec<Vec<SearchHit>>> {
        map_ordered(exec, queries, |q| self.search(q, k)).into_iter().collect()
    }
}
