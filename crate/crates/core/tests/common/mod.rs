//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use hybrid_core::extract::{EmbeddingTable, ExtractorConfig, Resources};
use hybrid_core::forward::{build_forward, DocumentEntry, FieldSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

/// Documents `d0000`, `d0001`, ... of Zipf-ish random words.
pub fn random_docs(rng: &mut ChaCha8Rng, n: usize, vocab: usize, max_len: usize) -> Vec<DocumentEntry> {
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=max_len);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    let u: f64 = rng.random();
                    word(((u * u) * vocab as f64) as usize)
                })
                .collect();
            DocumentEntry::new(format!("d{i:04}"), words.join(" "))
        })
        .collect()
}

pub fn random_query(rng: &mut ChaCha8Rng, id: &str, vocab: usize, len: usize) -> DocumentEntry {
    // Words past the vocabulary never occur in documents.
    let words: Vec<String> = (0..len).map(|_| word(rng.random_range(0..vocab + 3))).collect();
    DocumentEntry::new(id, words.join(" "))
}

pub fn resources(docs: &[DocumentEntry]) -> Resources {
    let fields = build_forward(docs, &[FieldSpec::parsed("text")], true).unwrap();
    Resources::new(fields).unwrap()
}

/// Writes `query.emb` and `doc.emb` into `dir`. The document table skips
/// every seventh word so some tokens have no embedding.
pub fn write_embeddings(dir: &Path, rng: &mut ChaCha8Rng, vocab: usize, dim: usize) {
    let mut q = EmbeddingTable::new(dim);
    let mut d = EmbeddingTable::new(dim);
    for i in 0..vocab + 3 {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        q.insert(&word(i), &v).unwrap();
        if i % 7 != 3 {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            d.insert(&word(i), &v).unwrap();
        }
    }
    q.save(dir.join("query.emb")).unwrap();
    d.save(dir.join("doc.emb")).unwrap();
}

/// BM25 plus cosine embedding similarity over `text`: both vectorizable.
pub fn knn_configs() -> Vec<ExtractorConfig> {
    vec![
        ExtractorConfig::new("bm25").param("indexFieldName", "text"),
        ExtractorConfig::new("avgWordEmbed")
            .param("indexFieldName", "text")
            .param("queryEmbedFile", "query.emb")
            .param("docEmbedFile", "doc.emb")
            .param("distType", "cosine"),
    ]
}

/// `|a - b| <= tol * scale`, where `scale` bounds the magnitude of the summands.
pub fn close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * scale.max(a.abs()).max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn by_docno<T: Clone>(pairs: &[(String, T)]) -> BTreeMap<String, T> {
    pairs.iter().cloned().collect()
}
