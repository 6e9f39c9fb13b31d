//! BM25 term weighting shared by the inverted index, the forward-index
//! extractors and the vector exporter.
//!
//! IDF is `ln(1 + (N - df + 0.5) / (df + 0.5))`, which is never negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        let p = Bm25Params { k1, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(Error::invalid(format!("BM25 k1 must be >= 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::invalid(format!("BM25 b must be in [0, 1], got {}", self.b)));
        }
        Ok(())
    }

    /// Saturated, length-normalized term frequency.
    pub fn tf_norm(&self, tf: f64, doc_len: f64, avg_doc_len: f64) -> f64 {
        if tf <= 0.0 {
            return 0.0;
        }
        let rel_len = if avg_doc_len > 0.0 { doc_len / avg_doc_len } else { 1.0 };
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * rel_len))
    }
}

pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let (n, df) = (doc_count as f64, doc_freq as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// Sorts query terms by id and merges repeated ids by summing counts.
pub fn normalize_query(terms: &[(u32, u32)]) -> Vec<(u32, u32)> {
    let mut v: Vec<(u32, u32)> = terms.iter().copied().filter(|t| t.1 > 0).collect();
    v.sort_by_key(|t| t.0);
    let mut out: Vec<(u32, u32)> = Vec::with_capacity(v.len());
    for (id, c) in v {
        match out.last_mut() {
            Some(last) if last.0 == id => last.1 += c,
            _ => out.push((id, c)),
        }
    }
    out
}
