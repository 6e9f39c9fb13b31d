//! IBM Model 1 lexical translation table trained by expectation maximization.
//!
//! `T(t | s)` is the probability that source token `s` (a document token, or
//! the NULL word) generates target token `t` (a query token). Each source row
//! sums to one. Query-document scores mix the translation probability with a
//! collection unigram model of target tokens:
//!
//! ```text
//! score = sum over query tokens q of
//!         ln[ (1 - λ) * (sum_{w in d} T(q|w) + T(q|NULL)) / (|d| + 1) + λ * P_c(q) ]
//! ```
//!
//! File layout (little-endian): magic `HRM1`, u32 version, f64 λ, u64-counted
//! source vocabulary (str, NULL first), u64-counted target vocabulary (str),
//! u64-counted f64 target unigram probabilities, then per source id a u64
//! entry count and (u32 target id, f64 probability) pairs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codec::{Reader, Writer, MAX_ELEMS};
use crate::error::{Error, Result};
use crate::exec::{map_chunks, Exec};
use crate::forward::{tokenize_parsed, ForwardIndexField, QueryEntry};
use crate::letor::Qrels;

pub const NULL_TOKEN: &str = "<NULL>";
pub const UNIGRAM_FLOOR: f64 = 1e-9;

const MAGIC: &[u8; 4] = b"HRM1";
const VERSION: u32 = 1;
/// The E-step always splits the bitext into this many pieces so the merge
/// order does not depend on the thread count.
const E_STEP_PIECES: usize = 16;

/// One aligned pair: `target` tokens are generated from `source` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitextPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl BitextPair {
    pub fn new(source: &str, target: &str) -> Self {
        BitextPair {
            source: tokenize_parsed(source).into_iter().map(String::from).collect(),
            target: tokenize_parsed(target).into_iter().map(String::from).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Model1Options {
    pub iterations: usize,
    pub prune_threshold: f64,
    pub lambda: f64,
}

impl Default for Model1Options {
    fn default() -> Self {
        Model1Options { iterations: 5, prune_threshold: 1e-6, lambda: 0.1 }
    }
}

/// Per-iteration diagnostics from [`model1_train`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    /// Corpus log-likelihood before the first update and after every iteration.
    pub log_likelihood: Vec<f64>,
    /// Largest `|sum_t T(t|s) - 1|` over source rows after each iteration.
    pub max_row_deviation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model1Table {
    lambda: f64,
    source_vocab: Vec<String>,
    source_ids: HashMap<String, u32>,
    target_vocab: Vec<String>,
    target_ids: HashMap<String, u32>,
    target_unigram: Vec<f64>,
    /// Per source id, `(target id, probability)` sorted by target id.
    rows: Vec<Vec<(u32, f64)>>,
}

fn vocab_index(tokens: &[String]) -> HashMap<String, u32> {
    tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect()
}

struct Interned {
    source: Vec<Vec<u32>>,
    target: Vec<Vec<u32>>,
    source_vocab: Vec<String>,
    target_vocab: Vec<String>,
}

fn intern(bitext: &[BitextPair]) -> Interned {
    let mut source_vocab = vec![NULL_TOKEN.to_string()];
    let mut source_ids: HashMap<String, u32> = HashMap::from([(NULL_TOKEN.to_string(), 0)]);
    let mut target_vocab = Vec::new();
    let mut target_ids: HashMap<String, u32> = HashMap::new();
    let get = |vocab: &mut Vec<String>, ids: &mut HashMap<String, u32>, t: &String| -> u32 {
        *ids.entry(t.clone()).or_insert_with(|| {
            vocab.push(t.clone());
            (vocab.len() - 1) as u32
        })
    };
    let mut source = Vec::with_capacity(bitext.len());
    let mut target = Vec::with_capacity(bitext.len());
    for p in bitext {
        source.push(p.source.iter().map(|t| get(&mut source_vocab, &mut source_ids, t)).collect());
        target.push(p.target.iter().map(|t| get(&mut target_vocab, &mut target_ids, t)).collect());
    }
    Interned { source, target, source_vocab, target_vocab }
}

/// Translation probabilities laid out as sparse rows with a fixed support.
struct Rows {
    targets: Vec<Vec<u32>>,
    probs: Vec<Vec<f64>>,
}

impl Rows {
    fn slot(&self, s: u32, t: u32) -> usize {
        self.targets[s as usize].binary_search(&t).expect("pair is in the support")
    }

    fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.targets.iter().map(|r| vec![0.0; r.len()]).collect()
    }
}

/// Expected counts and log-likelihood for one slice of the bitext.
fn e_step(rows: &Rows, sources: &[Vec<u32>], targets: &[Vec<u32>]) -> (Vec<Vec<f64>>, f64) {
    let mut counts = rows.zeros_like();
    let mut ll = 0.0;
    let mut slots: Vec<(u32, usize, f64)> = Vec::new();
    for (src, tgt) in sources.iter().zip(targets) {
        let norm = (src.len() + 1) as f64;
        for &t in tgt {
            slots.clear();
            let mut z = 0.0;
            for s in std::iter::once(0).chain(src.iter().copied()) {
                let slot = rows.slot(s, t);
                let p = rows.probs[s as usize][slot];
                z += p;
                slots.push((s, slot, p));
            }
            ll += (z / norm).ln();
            if z > 0.0 {
                for &(s, slot, p) in &slots {
                    counts[s as usize][slot] += p / z;
                }
            }
        }
    }
    (counts, ll)
}

fn run_e_step(rows: &Rows, data: &Interned, exec: Exec) -> (Vec<Vec<f64>>, f64) {
    let n = data.source.len();
    let piece = n.div_ceil(E_STEP_PIECES).max(1);
    let idx: Vec<usize> = (0..n).collect();
    let parts = map_chunks(exec, &idx, piece, |ix| {
        let lo = ix[0];
        let hi = lo + ix.len();
        e_step(rows, &data.source[lo..hi], &data.target[lo..hi])
    });
    let mut total = rows.zeros_like();
    let mut ll = 0.0;
    for (counts, part_ll) in parts {
        ll += part_ll;
        for (acc, c) in total.iter_mut().zip(counts) {
            for (a, x) in acc.iter_mut().zip(c) {
                *a += x;
            }
        }
    }
    (total, ll)
}

fn max_row_deviation(probs: &[Vec<f64>]) -> f64 {
    probs.iter().filter(|r| !r.is_empty()).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// Trains Model 1 with a NULL source word, starting from uniform `T`.
/// Entries below `prune_threshold` are dropped after the last iteration and
/// the remaining mass of each row is renormalized.
pub fn model1_train(bitext: &[BitextPair], opts: &Model1Options, exec: Exec) -> Result<(Model1Table, TrainingTrace)> {
    if bitext.is_empty() || bitext.iter().all(|p| p.target.is_empty()) {
        return Err(Error::Training("Model 1 needs a nonempty bitext".into()));
    }
    if !(opts.lambda > 0.0 && opts.lambda <= 1.0) {
        return Err(Error::invalid(format!("Model 1 lambda must be in (0, 1], got {}", opts.lambda)));
    }
    let data = intern(bitext);
    let mut support: Vec<Vec<u32>> = vec![Vec::new(); data.source_vocab.len()];
    for (src, tgt) in data.source.iter().zip(&data.target) {
        for s in std::iter::once(0).chain(src.iter().copied()) {
            support[s as usize].extend_from_slice(tgt);
        }
    }
    for row in &mut support {
        row.sort_unstable();
        row.dedup();
    }
    let uniform = 1.0 / data.target_vocab.len() as f64;
    let probs = support.iter().map(|r| vec![uniform; r.len()]).collect();
    let mut rows = Rows { targets: support, probs };
    let mut trace = TrainingTrace::default();

    for _ in 0..opts.iterations {
        let (counts, ll) = run_e_step(&rows, &data, exec);
        trace.log_likelihood.push(ll);
        for (p, c) in rows.probs.iter_mut().zip(counts) {
            let total: f64 = c.iter().sum();
            if total > 0.0 {
                for (pi, ci) in p.iter_mut().zip(c) {
                    *pi = ci / total;
                }
            }
        }
        trace.max_row_deviation.push(max_row_deviation(&rows.probs));
    }
    trace.log_likelihood.push(run_e_step(&rows, &data, exec).1);

    let mut unigram = vec![0.0; data.target_vocab.len()];
    let mut n_tokens = 0usize;
    for tgt in &data.target {
        for &t in tgt {
            unigram[t as usize] += 1.0;
            n_tokens += 1;
        }
    }
    unigram.iter_mut().for_each(|u| *u /= n_tokens as f64);

    let pruned = rows
        .targets
        .into_iter()
        .zip(rows.probs)
        .map(|(ts, ps)| {
            let kept: Vec<(u32, f64)> =
                ts.into_iter().zip(ps).filter(|&(_, p)| p >= opts.prune_threshold && p > 0.0).collect();
            let mass: f64 = kept.iter().map(|e| e.1).sum();
            kept.into_iter().map(|(t, p)| (t, p / mass)).collect()
        })
        .collect();

    let table = Model1Table {
        lambda: opts.lambda,
        source_ids: vocab_index(&data.source_vocab),
        target_ids: vocab_index(&data.target_vocab),
        source_vocab: data.source_vocab,
        target_vocab: data.target_vocab,
        target_unigram: unigram,
        rows: pruned,
    };
    Ok((table, trace))
}

impl Model1Table {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::invalid(format!("Model 1 lambda must be in (0, 1], got {lambda}")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn source_vocab(&self) -> &[String] {
        &self.source_vocab
    }

    pub fn target_vocab(&self) -> &[String] {
        &self.target_vocab
    }

    pub fn source_id(&self, token: &str) -> Option<u32> {
        self.source_ids.get(token).copied()
    }

    pub fn target_id(&self, token: &str) -> Option<u32> {
        self.target_ids.get(token).copied()
    }

    /// Maps each forward-index term id to its source id, if any.
    pub fn source_mapping(&self, field: &ForwardIndexField) -> Vec<Option<u32>> {
        field.terms().iter().map(|t| self.source_ids.get(t).copied().filter(|&i| i != 0)).collect()
    }

    /// `T(target | source)` by ids.
    pub fn prob(&self, target: u32, source: u32) -> f64 {
        self.rows
            .get(source as usize)
            .and_then(|r| r.binary_search_by_key(&target, |e| e.0).ok().map(|i| r[i].1))
            .unwrap_or(0.0)
    }

    /// `T(target | source)` by tokens; 0 for unknown tokens.
    pub fn translation(&self, target: &str, source: &str) -> f64 {
        match (self.target_id(target), self.source_id(source)) {
            (Some(t), Some(s)) => self.prob(t, s),
            _ => 0.0,
        }
    }

    pub fn row(&self, source: u32) -> &[(u32, f64)] {
        &self.rows[source as usize]
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    /// Collection probability of a target token, floored.
    pub fn unigram(&self, target: Option<u32>) -> f64 {
        target.map_or(0.0, |t| self.target_unigram[t as usize]).max(UNIGRAM_FLOOR)
    }

    /// Alignment log-probability of query target ids given a document bag
    /// `(source id or None, count)` of `doc_len` tokens.
    pub fn score_ids(&self, query: &[Option<u32>], doc: &[(Option<u32>, u32)], doc_len: u64) -> f64 {
        let norm = 1.0 / (doc_len as f64 + 1.0);
        query
            .iter()
            .map(|&q| {
                let trans = match q {
                    Some(t) => {
                        let mut sum = self.prob(t, 0);
                        for &(w, c) in doc {
                            if let Some(w) = w {
                                sum += f64::from(c) * self.prob(t, w);
                            }
                        }
                        sum
                    }
                    None => 0.0,
                };
                ((1.0 - self.lambda) * norm * trans + self.lambda * self.unigram(q)).ln()
            })
            .sum()
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.header(MAGIC, VERSION)?;
        w.f64(self.lambda)?;
        for vocab in [&self.source_vocab, &self.target_vocab] {
            w.len(vocab.len())?;
            vocab.iter().try_for_each(|t| w.str(t))?;
        }
        w.len(self.target_unigram.len())?;
        self.target_unigram.iter().try_for_each(|&p| w.f64(p))?;
        for row in &self.rows {
            w.len(row.len())?;
            for &(t, p) in row {
                w.u32(t)?;
                w.f64(p)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.header(MAGIC, VERSION)?;
        let lambda = r.f64()?;
        let mut vocab = || -> Result<Vec<String>> {
            let n = r.len(MAX_ELEMS)?;
            (0..n).map(|_| r.str()).collect()
        };
        let source_vocab = vocab()?;
        let target_vocab = vocab()?;
        let n = r.len(MAX_ELEMS)?;
        let target_unigram = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if source_vocab.first().map(String::as_str) != Some(NULL_TOKEN) || target_unigram.len() != target_vocab.len() {
            return Err(Error::Format("corrupt Model 1 vocabulary".into()));
        }
        let mut rows = Vec::with_capacity(source_vocab.len());
        for _ in 0..source_vocab.len() {
            let n = r.len(MAX_ELEMS)?;
            let row = (0..n).map(|_| Ok((r.u32()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
            if row.windows(2).any(|w| w[0].0 >= w[1].0) || row.iter().any(|e| e.0 as usize >= target_vocab.len()) {
                return Err(Error::Format("corrupt Model 1 row".into()));
            }
            rows.push(row);
        }
        r.expect_end()?;
        Ok(Model1Table {
            lambda,
            source_ids: vocab_index(&source_vocab),
            target_ids: vocab_index(&target_vocab),
            source_vocab,
            target_vocab,
            target_unigram,
            rows,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Consecutive non-overlapping chunks of at most `max_len` tokens.
pub fn chunk_document<T: Clone>(tokens: &[T], max_len: usize) -> Result<Vec<Vec<T>>> {
    if max_len == 0 {
        return Err(Error::invalid("chunk length must be >= 1"));
    }
    Ok(tokens.chunks(max_len).map(<[T]>::to_vec).collect())
}

/// Pairs every query with every chunk of each of its relevant documents.
/// Documents come from `doc_field`, which must keep positions.
pub fn build_bitext(
    queries: &[QueryEntry],
    query_field: &str,
    qrels: &Qrels,
    doc_field: &ForwardIndexField,
    chunk_len: usize,
) -> Result<Vec<BitextPair>> {
    if !doc_field.has_positions() {
        return Err(Error::config(format!(
            "field \"{}\" was indexed without positions; bitext needs token sequences",
            doc_field.name()
        )));
    }
    let mut out = Vec::new();
    for q in queries {
        let target: Vec<String> =
            tokenize_parsed(q.field(query_field).unwrap_or("")).into_iter().map(String::from).collect();
        if target.is_empty() {
            continue;
        }
        for (docno, grade) in qrels.judged(&q.docno) {
            if grade == 0 {
                continue;
            }
            let Some(d) = doc_field.doc_id(docno) else { continue };
            let seq = doc_field.doc(d).sequence.as_deref().unwrap_or(&[]);
            let tokens: Vec<String> = seq.iter().map(|&t| doc_field.term(t).unwrap().to_string()).collect();
            for chunk in chunk_document(&tokens, chunk_len)? {
                out.push(BitextPair { source: chunk, target: target.clone() });
            }
        }
    }
    Ok(out)
}
