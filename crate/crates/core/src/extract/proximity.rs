//! Term-pair proximity scored as BM25 over pair pseudo-terms.
//!
//! For each pair of distinct query terms `(a, b)`, `a` first in the query,
//! an occurrence is a position `p` of `a` with some `b` at `p + 1 ..= p + W`
//! (ordered) or at distance `1 ..= W` on either side (unordered). Pair
//! document frequencies come from the documents containing both terms.

use std::sync::Arc;

use super::{query_text, Extractor, Feature, Params, QueryScorer, Resources};
use crate::bm25::{self, Bm25Params};
use crate::error::{Error, Result};
use crate::forward::{ForwardIndexField, QueryEntry};

pub const DEFAULT_WINDOW: usize = 8;

pub struct ProximityExtractor {
    field: Arc<ForwardIndexField>,
    query_field: String,
    window: usize,
    params: Bm25Params,
}

/// Ordered and unordered occurrence counts of a pair in one token sequence.
pub fn pair_counts(seq: &[u32], a: u32, b: u32, window: usize) -> (u32, u32) {
    let pos_b: Vec<usize> = seq.iter().enumerate().filter(|&(_, &t)| t == b).map(|(i, _)| i).collect();
    if pos_b.is_empty() {
        return (0, 0);
    }
    let (mut ordered, mut unordered) = (0, 0);
    for (p, _) in seq.iter().enumerate().filter(|&(_, &t)| t == a) {
        // First b strictly after p, and last b strictly before p.
        let after = pos_b.partition_point(|&q| q <= p);
        let next = pos_b.get(after).map(|&q| q - p);
        let before = pos_b.partition_point(|&q| q < p);
        let prev = before.checked_sub(1).map(|i| p - pos_b[i]);
        if next.is_some_and(|d| d <= window) {
            ordered += 1;
        }
        if next.is_some_and(|d| d <= window) || prev.is_some_and(|d| d >= 1 && d <= window) {
            unordered += 1;
        }
    }
    (ordered, unordered)
}

impl ProximityExtractor {
    pub fn new(field: Arc<ForwardIndexField>, query_field: &str, window: usize, params: Bm25Params) -> Result<Self> {
        if !field.has_positions() {
            return Err(Error::config(format!("proximity: field \"{}\" was indexed without positions", field.name())));
        }
        if window == 0 {
            return Err(Error::config("proximity: window must be >= 1"));
        }
        params.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(ProximityExtractor { field, query_field: query_field.to_string(), window, params })
    }

    pub(crate) fn from_params(p: &Params<'_>, res: &Resources) -> Result<Self> {
        let (index, query) = p.fields()?;
        let d = Bm25Params::default();
        let params = Bm25Params { k1: p.f64("k1", d.k1)?, b: p.f64("b", d.b)? };
        Self::new(res.field(index)?.clone(), query, p.usize("window", DEFAULT_WINDOW)?, params)
    }

    fn seq(&self, doc: u32) -> &[u32] {
        self.field.doc(doc).sequence.as_deref().unwrap_or(&[])
    }

    fn pair_doc_freqs(&self, a: u32, b: u32) -> (usize, usize) {
        let (da, db) = (self.field.docs_with_term(a), self.field.docs_with_term(b));
        let (mut i, mut j) = (0, 0);
        let (mut df_o, mut df_u) = (0, 0);
        while i < da.len() && j < db.len() {
            match da[i].cmp(&db[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let (o, u) = pair_counts(self.seq(da[i]), a, b, self.window);
                    df_o += usize::from(o > 0);
                    df_u += usize::from(u > 0);
                    i += 1;
                    j += 1;
                }
            }
        }
        (df_o, df_u)
    }
}

struct Pair {
    a: u32,
    b: u32,
    idf_ordered: f64,
    idf_unordered: f64,
}

struct ProximityScorer<'a> {
    ex: &'a ProximityExtractor,
    pairs: Vec<Pair>,
}

impl QueryScorer for ProximityScorer<'_> {
    fn score(&self, doc: u32) -> Feature {
        let ex = self.ex;
        let seq = ex.seq(doc);
        let (dl, avg) = (seq.len() as f64, ex.field.avg_doc_length());
        let mut s = 0.0;
        for p in &self.pairs {
            let (o, u) = pair_counts(seq, p.a, p.b, ex.window);
            s += p.idf_ordered * ex.params.tf_norm(f64::from(o), dl, avg);
            s += p.idf_unordered * ex.params.tf_norm(f64::from(u), dl, avg);
        }
        Feature::new(s)
    }
}

impl Extractor for ProximityExtractor {
    fn column(&self) -> String {
        format!("proximity({})", self.field.name())
    }

    fn prepare<'a>(&'a self, query: &QueryEntry) -> Box<dyn QueryScorer + 'a> {
        let mut terms: Vec<u32> = Vec::new();
        for t in self.field.query_terms(query_text(query, &self.query_field)) {
            if !terms.contains(&t) {
                terms.push(t);
            }
        }
        let n = self.field.doc_count();
        let mut pairs = Vec::new();
        for i in 0..terms.len() {
            for j in i + 1..terms.len() {
                let (a, b) = (terms[i], terms[j]);
                let (df_o, df_u) = self.pair_doc_freqs(a, b);
                pairs.push(Pair { a, b, idf_ordered: bm25::idf(n, df_o), idf_unordered: bm25::idf(n, df_u) });
            }
        }
        Box::new(ProximityScorer { ex: self, pairs })
    }
}
