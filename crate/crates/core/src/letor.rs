//! Rank metrics, linear fusion models and coordinate-ascent training.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Exec};
use crate::extract::{FeatureMatrix, FeatureRow};

/// Graded judgments, TREC `qid 0 docno grade` format. Unjudged pairs have grade 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, qid: impl Into<String>, docno: impl Into<String>, grade: u32) {
        self.judgments.entry(qid.into()).or_default().insert(docno.into(), grade);
    }

    pub fn parse<R: BufRead>(input: R) -> Result<Self> {
        let mut q = Qrels::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => continue,
                [qid, _, docno, grade] => {
                    let g: i64 = grade
                        .parse()
                        .map_err(|_| Error::Format(format!("qrels line {}: bad grade \"{grade}\"", i + 1)))?;
                    q.insert(*qid, *docno, g.max(0) as u32);
                }
                _ => return Err(Error::Format(format!("qrels line {}: expected 4 columns", i + 1))),
            }
        }
        Ok(q)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for (qid, docs) in &self.judgments {
            for (docno, g) in docs {
                writeln!(out, "{qid} 0 {docno} {g}")?;
            }
        }
        Ok(())
    }

    pub fn grade(&self, qid: &str, docno: &str) -> u32 {
        self.judgments.get(qid).and_then(|d| d.get(docno)).copied().unwrap_or(0)
    }

    pub fn judged(&self, qid: &str) -> impl Iterator<Item = (&str, u32)> {
        self.judgments.get(qid).into_iter().flatten().map(|(d, &g)| (d.as_str(), g))
    }

    pub fn relevant(&self, qid: &str) -> HashSet<&str> {
        self.judged(qid).filter(|&(_, g)| g > 0).map(|(d, _)| d).collect()
    }

    /// All judged grades for `qid`, best first.
    pub fn ideal_grades(&self, qid: &str) -> Vec<u32> {
        let mut g: Vec<u32> = self.judged(qid).map(|(_, g)| g).collect();
        g.sort_unstable_by(|a, b| b.cmp(a));
        g
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }
}

fn dcg(grades: &[u32], k: usize) -> f64 {
    grades.iter().take(k).enumerate().map(|(i, &g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2()).sum()
}

/// NDCG@k with exponential gain `2^g - 1`; 0 when the ideal DCG is 0.
pub fn ndcg_at_k(grades: &[u32], ideal: &[u32], k: usize) -> f64 {
    let mut ideal = ideal.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(grades, k) / idcg
    }
}

/// Reciprocal rank of the first relevant document; 0 if none.
pub fn mrr<S: AsRef<str>>(ranked: &[S], relevant: &HashSet<&str>) -> f64 {
    mrr_at(ranked, relevant, None)
}

pub fn mrr_at<S: AsRef<str>>(ranked: &[S], relevant: &HashSet<&str>, cutoff: Option<usize>) -> f64 {
    let n = cutoff.unwrap_or(usize::MAX);
    ranked.iter().take(n).position(|d| relevant.contains(d.as_ref())).map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn rr_from_grades(grades: &[u32], cutoff: Option<usize>) -> f64 {
    grades.iter().take(cutoff.unwrap_or(usize::MAX)).position(|&g| g > 0).map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Ndcg(usize),
    Mrr(Option<usize>),
}

impl Metric {
    /// Metric value for grades in ranked order; `ideal` holds all judged grades.
    pub fn from_grades(&self, grades: &[u32], ideal: &[u32]) -> f64 {
        match *self {
            Metric::Ndcg(k) => ndcg_at_k(grades, ideal, k),
            Metric::Mrr(cutoff) => rr_from_grades(grades, cutoff),
        }
    }

    pub fn evaluate<S: AsRef<str>>(&self, qid: &str, ranked: &[S], qrels: &Qrels) -> f64 {
        let grades: Vec<u32> = ranked.iter().map(|d| qrels.grade(qid, d.as_ref())).collect();
        self.from_grades(&grades, &qrels.ideal_grades(qid))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Mrr(None) => write!(f, "mrr"),
            Metric::Mrr(Some(k)) => write!(f, "mrr@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, k) = match lower.split_once('@') {
            Some((n, k)) => {
                let k: usize = k.parse().map_err(|_| Error::invalid(format!("bad metric cutoff in \"{s}\"")))?;
                if k == 0 {
                    return Err(Error::invalid("metric cutoff must be >= 1"));
                }
                (n.to_string(), Some(k))
            }
            None => (lower.clone(), None),
        };
        match name.as_str() {
            "ndcg" => Ok(Metric::Ndcg(k.unwrap_or(10))),
            "mrr" | "rr" => Ok(Metric::Mrr(k)),
            _ => Err(Error::invalid(format!("unknown metric \"{s}\""))),
        }
    }
}

/// Weights aligned with feature-matrix columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
}

impl LinearModel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("model weights must be finite"));
        }
        Ok(LinearModel { weights })
    }

    pub fn score(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// RankLib-style text: `##` comment lines, then `1:w1 2:w2 ...`.
    pub fn write_to<W: Write>(&self, mut out: W, columns: &[String]) -> Result<()> {
        writeln!(out, "## Coordinate Ascent")?;
        if !columns.is_empty() {
            writeln!(out, "## features: {}", columns.join(" "))?;
        }
        let body: Vec<String> = self.weights.iter().enumerate().map(|(i, w)| format!("{}:{w}", i + 1)).collect();
        writeln!(out, "{}", body.join(" "))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, columns: &[String]) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_to(&mut f, columns)?;
        f.flush()?;
        Ok(())
    }

    pub fn parse<R: BufRead>(input: R) -> Result<Self> {
        let mut weights: Vec<f64> = Vec::new();
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            for tok in line.split_whitespace() {
                let (i, w) = tok.split_once(':').ok_or_else(|| Error::Format(format!("bad model entry \"{tok}\"")))?;
                let i: usize = i.parse().map_err(|_| Error::Format(format!("bad feature index \"{i}\"")))?;
                let w: f64 = w.parse().map_err(|_| Error::Format(format!("bad weight \"{w}\"")))?;
                if i == 0 {
                    return Err(Error::Format("feature indices are 1-based".into()));
                }
                if weights.len() < i {
                    weights.resize(i, 0.0);
                }
                weights[i - 1] = w;
            }
        }
        if weights.is_empty() {
            return Err(Error::Format("model file has no weights".into()));
        }
        LinearModel::new(weights).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(BufReader::new(File::open(path)?))
    }
}

/// Ranked documents for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRun {
    pub query_id: String,
    pub hits: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub run_id: String,
    pub queries: Vec<QueryRun>,
}

impl RunOutput {
    /// TREC format: `qid Q0 docno rank score runId`, ranks from 1.
    pub fn write_trec<W: Write>(&self, mut out: W) -> Result<()> {
        for q in &self.queries {
            for (rank, (docno, score)) in q.hits.iter().enumerate() {
                writeln!(out, "{} Q0 {} {} {} {}", q.query_id, docno, rank + 1, score, self.run_id)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_trec(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a TREC run; queries keep first-appearance order, hits are
    /// ordered by the rank column.
    pub fn parse_trec<R: BufRead>(input: R) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut by_q: HashMap<String, Vec<(usize, String, f64)>> = HashMap::new();
        let mut run_id = String::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.is_empty() {
                continue;
            }
            if p.len() != 6 {
                return Err(Error::Format(format!("run line {}: expected 6 columns", i + 1)));
            }
            let bad = |what: &str| Error::Format(format!("run line {}: bad {what}", i + 1));
            let rank: usize = p[3].parse().map_err(|_| bad("rank"))?;
            let score: f64 = p[4].parse().map_err(|_| bad("score"))?;
            run_id = p[5].to_string();
            if !by_q.contains_key(p[0]) {
                order.push(p[0].to_string());
            }
            by_q.entry(p[0].to_string()).or_default().push((rank, p[2].to_string(), score));
        }
        let queries = order
            .into_iter()
            .map(|qid| {
                let mut hits = by_q.remove(&qid).unwrap();
                hits.sort_by_key(|h| h.0);
                QueryRun { query_id: qid, hits: hits.into_iter().map(|(_, d, s)| (d, s)).collect() }
            })
            .collect();
        Ok(RunOutput { run_id, queries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_trec(BufReader::new(File::open(path)?))
    }
}

/// Sorts `(docno, score)` by score descending, then docno ascending.
pub(crate) fn sort_hits(hits: &mut [(String, f64)]) {
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

fn check_columns(model: &LinearModel, features: &FeatureMatrix) -> Result<()> {
    if model.weights.len() != features.columns.len() {
        return Err(Error::invalid(format!(
            "model has {} weights but the feature matrix has {} columns",
            model.weights.len(),
            features.columns.len()
        )));
    }
    Ok(())
}

/// Scores every row and ranks each query's documents.
pub fn rank_with_model(model: &LinearModel, features: &FeatureMatrix, run_id: &str) -> Result<RunOutput> {
    check_columns(model, features)?;
    let queries = features
        .group_by_query()
        .into_iter()
        .map(|(qid, rows)| {
            let mut hits: Vec<(String, f64)> =
                rows.iter().map(|&i| (features.rows[i].docno.clone(), model.score(&features.rows[i].values))).collect();
            sort_hits(&mut hits);
            QueryRun { query_id: qid.to_string(), hits }
        })
        .collect();
    Ok(RunOutput { run_id: run_id.to_string(), queries })
}

/// Per-query report for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_query: Vec<(String, f64, f64)>,
    pub mean_ndcg: f64,
    pub mean_mrr: f64,
}

/// NDCG@`k` and MRR for every query in the run.
pub fn evaluate_run(run: &RunOutput, qrels: &Qrels, k: usize) -> Evaluation {
    let per_query: Vec<(String, f64, f64)> = run
        .queries
        .iter()
        .map(|q| {
            let docs: Vec<&str> = q.hits.iter().map(|h| h.0.as_str()).collect();
            let ndcg = Metric::Ndcg(k).evaluate(&q.query_id, &docs, qrels);
            let rr = Metric::Mrr(None).evaluate(&q.query_id, &docs, qrels);
            (q.query_id.clone(), ndcg, rr)
        })
        .collect();
    let n = per_query.len().max(1) as f64;
    Evaluation {
        mean_ndcg: per_query.iter().map(|x| x.1).sum::<f64>() / n,
        mean_mrr: per_query.iter().map(|x| x.2).sum::<f64>() / n,
        per_query,
    }
}

/// `grade qid:<q> 1:<v1> 2:<v2> ... # <docno>`, one line per row, queries contiguous.
pub fn export_ranklib<W: Write>(features: &FeatureMatrix, qrels: &Qrels, mut out: W) -> Result<()> {
    for (qid, rows) in features.group_by_query() {
        for i in rows {
            let row = &features.rows[i];
            write!(out, "{} qid:{}", qrels.grade(qid, &row.docno), qid)?;
            for (j, v) in row.values.iter().enumerate() {
                write!(out, " {}:{}", j + 1, v)?;
            }
            writeln!(out, " # {}", row.docno)?;
        }
    }
    Ok(())
}

/// Reads RankLib lines back into a feature matrix (columns `f1..fn`) and grades.
pub fn parse_ranklib<R: BufRead>(input: R) -> Result<(FeatureMatrix, Vec<u32>)> {
    let mut rows = Vec::new();
    let mut grades = Vec::new();
    let mut width = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("RankLib line {}: malformed", i + 1));
        let (body, docno) = match line.split_once('#') {
            Some((b, d)) => (b, d.trim().to_string()),
            None => (line.as_str(), String::new()),
        };
        let mut toks = body.split_whitespace();
        let grade: u32 = toks.next().and_then(|g| g.parse().ok()).ok_or_else(bad)?;
        let qid = toks.next().and_then(|q| q.strip_prefix("qid:")).ok_or_else(bad)?.to_string();
        let mut values = Vec::new();
        for t in toks {
            let (j, v) = t.split_once(':').ok_or_else(bad)?;
            let j: usize = j.parse().map_err(|_| bad())?;
            let v: f64 = v.parse().map_err(|_| bad())?;
            if j != values.len() + 1 {
                return Err(bad());
            }
            values.push(v);
        }
        width = width.max(values.len());
        grades.push(grade);
        rows.push(FeatureRow { query_id: qid, docno, doc_id: u32::MAX, values, flagged: false });
    }
    let columns = (1..=width).map(|j| format!("f{j}")).collect();
    Ok((FeatureMatrix { columns, rows }, grades))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateAscentOptions {
    /// Random restarts on top of the uniform start and the single-feature starts.
    pub restarts: usize,
    /// Additive step multipliers, tried in both directions.
    pub step_sizes: Vec<f64>,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for CoordinateAscentOptions {
    fn default() -> Self {
        CoordinateAscentOptions {
            restarts: 2,
            step_sizes: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0],
            tolerance: 1e-6,
            max_sweeps: 20,
            seed: 1,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: LinearModel,
    /// Mean training metric of `model`.
    pub metric: f64,
    /// Metric at the start of the winning restart and after each accepted step.
    pub trace: Vec<f64>,
    /// Index of the winning start: 0 uniform, then random, then single-feature.
    pub restart: usize,
    /// Training metric of ranking by each feature alone.
    pub single_feature_metrics: Vec<f64>,
}

struct TrainQuery {
    rows: Vec<usize>,
    grades: Vec<u32>,
    ideal: Vec<u32>,
}

struct Trainer<'a> {
    features: &'a FeatureMatrix,
    queries: Vec<TrainQuery>,
    metric: Metric,
}

impl Trainer<'_> {
    fn evaluate(&self, w: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut scored: Vec<(f64, &str, u32)> = Vec::new();
        for q in &self.queries {
            scored.clear();
            for (&i, &g) in q.rows.iter().zip(&q.grades) {
                let row = &self.features.rows[i];
                scored.push((dot(w, &row.values), row.docno.as_str(), g));
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            let ranked: Vec<u32> = scored.iter().map(|x| x.2).collect();
            total += self.metric.from_grades(&ranked, &q.ideal);
        }
        total / self.queries.len() as f64
    }

    fn ascend(&self, start: Vec<f64>, opts: &CoordinateAscentOptions) -> (Vec<f64>, f64, Vec<f64>) {
        let n = start.len();
        let mut w = start;
        l1_normalize(&mut w);
        let mut cur = self.evaluate(&w);
        let mut trace = vec![cur];
        let base = 1.0 / n as f64;
        for _ in 0..opts.max_sweeps {
            let mut improved = false;
            for i in 0..n {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for dir in [1.0, -1.0] {
                    for &step in &opts.step_sizes {
                        let mut cand = w.clone();
                        cand[i] += dir * step * base;
                        if !l1_normalize(&mut cand) {
                            continue;
                        }
                        let m = self.evaluate(&cand);
                        if best.as_ref().is_none_or(|b| m > b.0) {
                            best = Some((m, cand));
                        }
                    }
                }
                if let Some((m, cand)) = best {
                    if m > cur + opts.tolerance {
                        w = cand;
                        cur = m;
                        trace.push(cur);
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        (w, cur, trace)
    }
}

fn dot(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Returns false (leaving `w` untouched) for the all-zero vector.
fn l1_normalize(w: &mut [f64]) -> bool {
    let s: f64 = w.iter().map(|x| x.abs()).sum();
    if s == 0.0 || !s.is_finite() {
        return false;
    }
    w.iter_mut().for_each(|x| *x /= s);
    true
}

/// Coordinate ascent over a linear model maximizing the mean training metric.
///
/// Starts are the uniform vector, `restarts` random vectors and one unit
/// vector per feature; each is swept coordinate by coordinate, accepting a
/// step only when it improves the metric by more than `tolerance`. The best
/// start wins, ties going to the earlier start, so the result is never worse
/// than ranking by any single feature.
pub fn coordinate_ascent_train(
    features: &FeatureMatrix,
    qrels: &Qrels,
    metric: Metric,
    opts: &CoordinateAscentOptions,
) -> Result<TrainedModel> {
    let n = features.columns.len();
    if n == 0 {
        return Err(Error::Training("feature matrix has no columns".into()));
    }
    let queries: Vec<TrainQuery> = features
        .group_by_query()
        .into_iter()
        .map(|(qid, rows)| TrainQuery {
            grades: rows.iter().map(|&i| qrels.grade(qid, &features.rows[i].docno)).collect(),
            ideal: qrels.ideal_grades(qid),
            rows,
        })
        .collect();
    if !queries.iter().any(|q| q.grades.iter().any(|&g| g > 0)) {
        return Err(Error::Training("no candidate list contains a relevant document".into()));
    }
    let trainer = Trainer { features, queries, metric };

    let mut starts: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for r in 0..opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(r as u64));
        starts.push((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        starts.push(e);
    }
    let single_feature_metrics: Vec<f64> = starts[starts.len() - n..].iter().map(|e| trainer.evaluate(e)).collect();

    let results = map_ordered(opts.exec, &starts, |s| trainer.ascend(s.clone(), opts));
    let (restart, (w, m, trace)) = results
        .into_iter()
        .enumerate()
        .fold(None::<(usize, (Vec<f64>, f64, Vec<f64>))>, |best, (i, r)| match best {
            Some(b) if b.1 .1 >= r.1 => Some(b),
            _ => Some((i, r)),
        })
        .unwrap();
    Ok(TrainedModel { model: LinearModel::new(w)?, metric: m, trace, restart, single_feature_metrics })
}
