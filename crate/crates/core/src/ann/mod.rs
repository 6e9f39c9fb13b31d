//! k-NN search over any [`Space`](crate::vectors::Space): exact brute force
//! and approximate HNSW. Both only ever call `Space::distance`.

mod brute_force;
mod hnsw;
mod store;

pub use brute_force::BruteForceIndex;
pub use hnsw::{assign_level, select_neighbors, HnswBuilder, HnswIndex, HnswParams};
pub use store::VectorStore;

use serde::{Deserialize, Serialize};

/// One search result. `score` is in the space's orientation (a distance for
/// L2, a similarity otherwise); result lists are sorted best first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: u32,
    pub score: f64,
}

/// Fraction of `truth` ids present in `found`.
pub fn recall(found: &[SearchHit], truth: &[SearchHit]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hits = truth.iter().filter(|t| found.iter().any(|f| f.id == t.id)).count();
    hits as f64 / truth.len() as f64
}
