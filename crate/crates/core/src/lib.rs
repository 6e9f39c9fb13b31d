//! Hybrid sparse-dense retrieval engine.
//!
//! Candidate generation runs either on an uncompressed inverted file (BM25 or
//! exact sparse maximum inner-product search) or on a k-NN index (brute force
//! or HNSW) over exported query/document vectors. Candidates are re-ranked by
//! feature extractors that read per-field forward indices and by linear
//! fusion models trained with coordinate ascent.

pub mod ann;
pub mod bm25;
mod codec;
pub mod error;
pub mod exec;
pub mod export;
pub mod extract;
pub mod forward;
pub mod inverted;
pub mod letor;
pub mod model1;
pub mod pipeline;
pub mod server;
mod topk;
pub mod vectors;

pub use error::{Error, Result};
pub use exec::Exec;
