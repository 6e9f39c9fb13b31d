//! Uncompressed term-level inverted file with document-at-a-time traversal.
//!
//! Two flavors share one layout: postings carry either raw sparse-vector
//! weights (for exact inner-product search) or raw term frequencies (for
//! BM25). File layout (little-endian): magic `HRIV`, u32 version, u8 flavor
//! (0 weights, 1 term frequencies), u64 N + N x f32 document lengths,
//! f64 average length, u64 term count, then per term id a u64 count + u32
//! doc ids and a u64 count + f32 weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::ann::SearchHit;
use crate::bm25::{self, Bm25Params};
use crate::codec::{Reader, Writer, MAX_ELEMS};
use crate::error::{Error, Result};
use crate::forward::ForwardIndexField;
use crate::topk::TopK;
use crate::vectors::SparseVector;

const MAGIC: &[u8; 4] = b"HRIV";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PostingFlavor {
    Weights,
    TermFrequencies,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PostingList {
    doc_ids: Vec<u32>,
    weights: Vec<f32>,
}

impl PostingList {
    pub fn doc_ids(&self) -> &[u32] {
        &self.doc_ids
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn weight_of(&self, doc: u32) -> Option<f32> {
        self.doc_ids.binary_search(&doc).ok().map(|i| self.weights[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    flavor: PostingFlavor,
    postings: Vec<PostingList>,
    doc_lengths: Vec<f32>,
    avg_doc_length: f64,
}

struct Cursor<'a> {
    list: &'a PostingList,
    pos: usize,
    term_id: u32,
    query_weight: f64,
}

impl Cursor<'_> {
    fn doc(&self) -> Option<u32> {
        self.list.doc_ids.get(self.pos).copied()
    }
}

impl InvertedIndex {
    fn from_docs<'a, I>(flavor: PostingFlavor, docs: I) -> Self
    where
        I: IntoIterator<Item = (f32, Box<dyn Iterator<Item = (u32, f32)> + 'a>)>,
    {
        let mut postings: Vec<PostingList> = Vec::new();
        let mut doc_lengths = Vec::new();
        for (doc, (len, terms)) in docs.into_iter().enumerate() {
            for (t, w) in terms {
                let t = t as usize;
                if t >= postings.len() {
                    postings.resize_with(t + 1, PostingList::default);
                }
                postings[t].doc_ids.push(doc as u32);
                postings[t].weights.push(w);
            }
            doc_lengths.push(len);
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / doc_lengths.len() as f64
        };
        InvertedIndex { flavor, postings, doc_lengths, avg_doc_length }
    }

    /// Weight-flavor index; weights are copied verbatim. Document length is
    /// the number of nonzero entries.
    pub fn build_from_sparse(vectors: &[SparseVector]) -> Self {
        Self::from_docs(
            PostingFlavor::Weights,
            vectors.iter().map(|v| (v.len() as f32, Box::new(v.iter()) as Box<dyn Iterator<Item = _>>)),
        )
    }

    /// Term-frequency index from per-document bags of `(term id, count)`
    /// sorted by term id. Document length is the total count.
    pub fn build_from_bags<'a>(bags: impl IntoIterator<Item = &'a [(u32, u32)]>) -> Self {
        Self::from_docs(
            PostingFlavor::TermFrequencies,
            bags.into_iter().map(|bag| {
                let len = bag.iter().map(|&(_, c)| c as f32).sum::<f32>();
                (len, Box::new(bag.iter().map(|&(t, c)| (t, c as f32))) as Box<dyn Iterator<Item = _>>)
            }),
        )
    }

    /// Term-frequency index over a parsed forward-index field.
    pub fn build_from_forward(field: &ForwardIndexField) -> Self {
        Self::build_from_bags(field.docs().iter().map(|d| d.bag.as_slice()))
    }

    pub fn flavor(&self) -> PostingFlavor {
        self.flavor
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn doc_length(&self, doc: u32) -> Option<f32> {
        self.doc_lengths.get(doc as usize).copied()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn postings(&self, term_id: u32) -> Option<&PostingList> {
        self.postings.get(term_id as usize).filter(|p| !p.is_empty())
    }

    pub fn doc_freq(&self, term_id: u32) -> usize {
        self.postings(term_id).map_or(0, PostingList::len)
    }

    /// Rebuilds every document's `(term id, weight)` list from the postings.
    pub fn reconstruct(&self) -> Vec<Vec<(u32, f32)>> {
        let mut docs = vec![Vec::new(); self.doc_count()];
        for (t, list) in self.postings.iter().enumerate() {
            for (&d, &w) in list.doc_ids.iter().zip(&list.weights) {
                docs[d as usize].push((t as u32, w));
            }
        }
        docs
    }

    fn cursors<'a>(&'a self, terms: impl Iterator<Item = (u32, f64)>) -> Vec<Cursor<'a>> {
        terms
            .filter_map(|(t, qw)| self.postings(t).map(|list| Cursor { list, pos: 0, term_id: t, query_weight: qw }))
            .collect()
    }

    /// Document-at-a-time traversal: calls `score(doc, matches)` once per
    /// document present in at least one list, with the cursors positioned on
    /// that document in term-id order.
    fn daat(
        &self,
        mut cursors: Vec<Cursor<'_>>,
        k: usize,
        mut score: impl FnMut(u32, &[&Cursor<'_>]) -> f64,
    ) -> Vec<SearchHit> {
        let mut top = TopK::new(k);
        let mut matched: Vec<usize> = Vec::with_capacity(cursors.len());
        while let Some(doc) = cursors.iter().filter_map(Cursor::doc).min() {
            matched.clear();
            matched.extend((0..cursors.len()).filter(|&i| cursors[i].doc() == Some(doc)));
            let refs: Vec<&Cursor<'_>> = matched.iter().map(|&i| &cursors[i]).collect();
            let s = score(doc, &refs);
            top.push(-s, doc);
            for &i in &matched {
                cursors[i].pos += 1;
            }
        }
        top.into_sorted().into_iter().map(|c| SearchHit { id: c.id, score: -c.key }).collect()
    }

    /// Exact top-k maximum inner-product search. Documents sharing no term
    /// with the query are never returned; ties go to the lower id.
    pub fn daat_mips(&self, q: &SparseVector, k: usize) -> Vec<SearchHit> {
        let cursors = self.cursors(q.iter().map(|(t, v)| (t, f64::from(v))));
        self.daat(cursors, k, |_, matches| {
            let mut s = 0.0;
            for c in matches {
                s += c.query_weight * f64::from(c.list.weights[c.pos]);
            }
            s
        })
    }

    fn require_tf(&self) -> Result<()> {
        if self.flavor != PostingFlavor::TermFrequencies {
            return Err(Error::invalid("BM25 needs a term-frequency index"));
        }
        Ok(())
    }

    fn bm25_term(&self, term_id: u32, qtf: f64, tf: f32, doc_len: f32, params: &Bm25Params) -> f64 {
        let idf = bm25::idf(self.doc_count(), self.doc_freq(term_id));
        qtf * idf * params.tf_norm(f64::from(tf), f64::from(doc_len), self.avg_doc_length)
    }

    /// BM25 score of one document for `(term id, query count)` pairs.
    pub fn bm25_score(&self, query: &[(u32, u32)], doc: u32, params: &Bm25Params) -> Result<f64> {
        self.require_tf()?;
        let doc_len = self.doc_length(doc).ok_or_else(|| Error::invalid(format!("unknown document {doc}")))?;
        let mut s = 0.0;
        for (t, qtf) in bm25::normalize_query(query) {
            if let Some(tf) = self.postings(t).and_then(|p| p.weight_of(doc)) {
                s += self.bm25_term(t, f64::from(qtf), tf, doc_len, params);
            }
        }
        Ok(s)
    }

    /// Exact BM25 top-k among documents containing at least one query term.
    pub fn bm25_retrieve(&self, query: &[(u32, u32)], k: usize, params: &Bm25Params) -> Result<Vec<SearchHit>> {
        self.require_tf()?;
        let terms = bm25::normalize_query(query);
        let cursors = self.cursors(terms.iter().map(|&(t, c)| (t, f64::from(c))));
        Ok(self.daat(cursors, k, |doc, matches| {
            let doc_len = self.doc_lengths[doc as usize];
            let mut s = 0.0;
            for c in matches {
                s += self.bm25_term(c.term_id, c.query_weight, c.list.weights[c.pos], doc_len, params);
            }
            s
        }))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.header(MAGIC, VERSION)?;
        w.u8(match self.flavor {
            PostingFlavor::Weights => 0,
            PostingFlavor::TermFrequencies => 1,
        })?;
        w.f32s(&self.doc_lengths)?;
        w.f64(self.avg_doc_length)?;
        w.len(self.postings.len())?;
        for p in &self.postings {
            w.u32s(&p.doc_ids)?;
            w.f32s(&p.weights)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.header(MAGIC, VERSION)?;
        let flavor = match r.u8()? {
            0 => PostingFlavor::Weights,
            1 => PostingFlavor::TermFrequencies,
            f => return Err(Error::Format(format!("unknown posting flavor {f}"))),
        };
        let doc_lengths = r.f32s()?;
        let avg_doc_length = r.f64()?;
        let n_terms = r.len(MAX_ELEMS)?;
        let mut postings = Vec::with_capacity(n_terms.min(1 << 24));
        for t in 0..n_terms {
            let doc_ids = r.u32s()?;
            let weights = r.f32s()?;
            let sorted = doc_ids.windows(2).all(|w| w[0] < w[1]);
            let in_range = doc_ids.last().is_none_or(|&d| (d as usize) < doc_lengths.len());
            if doc_ids.len() != weights.len() || !sorted || !in_range {
                return Err(Error::Format(format!("corrupt posting list for term {t}")));
            }
            postings.push(PostingList { doc_ids, weights });
        }
        r.expect_end()?;
        Ok(InvertedIndex { flavor, postings, doc_lengths, avg_doc_length })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
