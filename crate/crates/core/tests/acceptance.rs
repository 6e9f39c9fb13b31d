//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Tolerances and time budgets are pinned below.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{close, knn_configs, random_docs, random_query, resources, rng, write_embeddings};
use hybrid_core::ann::{HnswBuilder, HnswIndex, HnswParams};
use hybrid_core::bm25::Bm25Params;
use hybrid_core::export::{write_export, Exporter, Scenario};
use hybrid_core::extract::{CompositeExtractor, FeatureMatrix, FeatureRow, Resources};
use hybrid_core::forward::{build_forward, forward_file_name, read_jsonl_file, save_forward, FieldSpec};
use hybrid_core::inverted::InvertedIndex;
use hybrid_core::letor::{
    coordinate_ascent_train, evaluate_run, mrr, ndcg_at_k, rank_with_model, CoordinateAscentOptions, LinearModel,
    Metric, Qrels, RunOutput,
};
use hybrid_core::model1::{build_bitext, model1_train, BitextPair, Model1Options};
use hybrid_core::pipeline::{to_run, Pipeline, PipelineMode};
use hybrid_core::vectors::{
    composite_score, dot_sparse, DenseVector, FieldVector, Space, SpaceKind, SparseVector, Vector,
};
use hybrid_core::Exec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const EXACT_SEARCH_BUDGET: Duration = Duration::from_secs(10);
const HNSW_BUDGET: Duration = Duration::from_secs(60);
const END_TO_END_BUDGET: Duration = Duration::from_secs(60);
const BM25_HAND_TOL: f64 = 1e-3;
const METRIC_HAND_TOL: f64 = 1e-3;
const HNSW_MIN_RECALL: f64 = 0.95;
const LL_TOL: f64 = 1e-9;
const ROW_TOL: f64 = 1e-6;
const EXPORT_REL_TOL: f64 = 1e-5;
const ORACLE_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("exact-search oracles", exact_search),
        ("hnsw quality", hnsw_quality),
        ("bm25 hand case", bm25_hand_case),
        ("model 1 training", model1_training),
        ("export equivalence", export_equivalence),
        ("fusion training", fusion_training),
        ("rank metrics", rank_metrics),
        ("end-to-end toy corpus", end_to_end),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<24} {secs:>6.2}s  {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<24} {secs:>6.2}s  {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", checks.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", checks.len());
}

fn within(start: Instant, budget: Duration) -> Result<(), String> {
    let took = start.elapsed();
    if took > budget {
        return Err(format!("took {:.1}s, budget {}s", took.as_secs_f64(), budget.as_secs()));
    }
    Ok(())
}

// Exact search

fn random_bag(rng: &mut ChaCha8Rng, vocab: u32, max_len: usize) -> Vec<(u32, u32)> {
    let len = rng.random_range(0..=max_len);
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for _ in 0..len {
        let u: f64 = rng.random();
        *counts.entry((u * u * f64::from(vocab)) as u32).or_default() += 1;
    }
    counts.into_iter().collect()
}

/// BM25 from raw bags, summing query terms in ascending id order.
fn bm25_oracle(bags: &[Vec<(u32, u32)>], query: &[(u32, u32)], p: &Bm25Params) -> Vec<(u32, f64)> {
    let n = bags.len() as f64;
    let lens: Vec<f64> = bags.iter().map(|b| b.iter().map(|e| f64::from(e.1)).sum()).collect();
    let avg = lens.iter().sum::<f64>() / n;
    let df = |t: u32| bags.iter().filter(|b| b.iter().any(|e| e.0 == t)).count() as f64;
    let mut out = Vec::new();
    for (d, bag) in bags.iter().enumerate() {
        let mut s = 0.0;
        let mut hit = false;
        for &(t, qtf) in query {
            if let Some(&(_, tf)) = bag.iter().find(|e| e.0 == t) {
                hit = true;
                let idf = (1.0 + (n - df(t) + 0.5) / (df(t) + 0.5)).ln();
                let tf = f64::from(tf);
                s += f64::from(qtf) * idf * (tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * (lens[d] / avg))));
            }
        }
        if hit {
            out.push((d as u32, s));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

fn exact_search() -> Outcome {
    let start = Instant::now();
    let params = Bm25Params::default();
    let instances = 24;
    let mut compared = 0usize;
    for seed in 0..instances {
        let mut rng = rng(1000 + seed);
        let n = rng.random_range(200..=1000);
        let vocab = rng.random_range(50..400);
        let k = rng.random_range(1..50);

        // Sparse MIPS over small integer weights: every sum is exact.
        let docs: Vec<BTreeMap<u32, i64>> = (0..n)
            .map(|_| {
                (0..rng.random_range(0..15)).map(|_| (rng.random_range(0..vocab), rng.random_range(1..6))).collect()
            })
            .collect();
        let vecs: Vec<SparseVector> =
            docs.iter().map(|d| SparseVector::from_pairs(d.iter().map(|(&t, &v)| (t, v as f32))).unwrap()).collect();
        let index = InvertedIndex::build_from_sparse(&vecs);
        for _ in 0..5 {
            let q: BTreeMap<u32, i64> =
                (0..rng.random_range(1..8)).map(|_| (rng.random_range(0..vocab), rng.random_range(-3..6))).collect();
            let q: BTreeMap<u32, i64> = q.into_iter().filter(|e| e.1 != 0).collect();
            let qv = SparseVector::from_pairs(q.iter().map(|(&t, &v)| (t, v as f32))).unwrap();
            let mut want: Vec<(u32, f64)> = docs
                .iter()
                .enumerate()
                .filter(|(_, d)| d.keys().any(|t| q.contains_key(t)))
                .map(|(i, d)| (i as u32, d.iter().map(|(t, v)| v * q.get(t).unwrap_or(&0)).sum::<i64>() as f64))
                .collect();
            want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            want.truncate(k);
            let got: Vec<(u32, f64)> = index.daat_mips(&qv, k).iter().map(|h| (h.id, h.score)).collect();
            ensure!(got == want, "daat_mips differs on instance {seed}");
            compared += 1;
        }

        let bags: Vec<Vec<(u32, u32)>> = (0..n).map(|_| random_bag(&mut rng, vocab, 40)).collect();
        let index = InvertedIndex::build_from_bags(bags.iter().map(Vec::as_slice));
        for _ in 0..5 {
            let query = random_bag(&mut rng, vocab + 5, 5);
            let mut want = bm25_oracle(&bags, &query, &params);
            want.truncate(k);
            let got: Vec<(u32, f64)> =
                index.bm25_retrieve(&query, k, &params).unwrap().iter().map(|h| (h.id, h.score)).collect();
            let ids = |v: &[(u32, f64)]| v.iter().map(|e| e.0).collect::<Vec<_>>();
            ensure!(ids(&got) == ids(&want), "bm25_retrieve order differs on instance {seed}");
            ensure!(
                got.iter().zip(&want).all(|(g, w)| close(g.1, w.1, 0.0, ORACLE_TOL)),
                "bm25_retrieve scores differ on instance {seed}"
            );
            compared += 1;
        }
    }
    within(start, EXACT_SEARCH_BUDGET)?;
    Ok(format!("{instances} instances, {compared} queries identical"))
}

// HNSW

fn gaussian(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vector> {
    (0..n)
        .map(|_| {
            Vector::Dense(DenseVector::new((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap())
        })
        .collect()
}

/// Mean overlap with the exact top-k, computed by sorting every distance.
fn mean_recall(index: &HnswIndex, data: &[Vector], queries: &[Vector], k: usize, ef: usize) -> f64 {
    let space = Space::new(SpaceKind::L2Dense);
    let mut total = 0.0;
    for q in queries {
        let mut all: Vec<(f64, u32)> = data.iter().enumerate().map(|(i, v)| (space.distance(q, v), i as u32)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let truth: HashSet<u32> = all.iter().take(k).map(|e| e.1).collect();
        let found = index.search(q, k, ef).unwrap();
        total += found.iter().filter(|h| truth.contains(&h.id)).count() as f64 / k as f64;
    }
    total / queries.len() as f64
}

fn hnsw_quality() -> Outcome {
    let start = Instant::now();
    let space = Space::new(SpaceKind::L2Dense);
    let params = HnswParams { seed: 42, ..HnswParams::default() };
    ensure!(params.m == 16 && params.ef_construction == 200, "unexpected defaults {params:?}");

    let mut rng = rng(42);
    let data = gaussian(&mut rng, 10_000, 64);
    let queries = gaussian(&mut rng, 200, 64);
    let mut b = HnswBuilder::new(space, params).unwrap();
    b.insert_batched(data.clone(), 64, Exec::Parallel).unwrap();
    let index = b.freeze();
    index.check_structure().map_err(|e| format!("structure: {e}"))?;
    let large = mean_recall(&index, &data, &queries, 10, 100);

    let mut rng = common::rng(4242);
    let small_data = gaussian(&mut rng, 200, 16);
    let small_queries = gaussian(&mut rng, 50, 16);
    let small = HnswIndex::build(space, params, small_data.clone()).unwrap();
    let small_recall = mean_recall(&small, &small_data, &small_queries, 10, 200);

    within(start, HNSW_BUDGET)?;
    let detail = format!("10k x 64-d recall@10 {large:.4} at ef=100; 200 points recall {small_recall:.4} at ef=200");
    ensure!(large >= HNSW_MIN_RECALL && small_recall == 1.0, "{detail} (need >= {HNSW_MIN_RECALL} and 1.0)");
    Ok(detail)
}

// BM25 hand case

fn bm25_hand_case() -> Outcome {
    let docs = vec![
        hybrid_core::forward::DocumentEntry::new("d0", "cat sat"),
        hybrid_core::forward::DocumentEntry::new("d1", "cat cat run"),
        hybrid_core::forward::DocumentEntry::new("d2", "dog"),
    ];
    let fwd = build_forward(&docs, &[FieldSpec::parsed("text")], false).unwrap();
    let field = &fwd["text"];
    let index = InvertedIndex::build_from_forward(field);
    let q = field.query_bag("cat");
    let score = index.bm25_score(&q, 1, &Bm25Params { k1: 1.2, b: 0.75 }).unwrap();
    ensure!((score - 0.5666).abs() <= BM25_HAND_TOL, "score(d1, cat) = {score}");
    let order: Vec<u32> = index.bm25_retrieve(&q, 3, &Bm25Params::default()).unwrap().iter().map(|h| h.id).collect();
    ensure!(order == [1, 0], "ranking {order:?}");
    Ok(format!("score(d1, \"cat\") = {score:.4}, ranking d1 > d0"))
}

// Model 1

const NULL: &str = "\u{0}null";

/// Textbook Model 1 EM with a NULL source word; returns T and the
/// log-likelihood before each update and after the last.
fn em_oracle(bitext: &[BitextPair], iterations: usize) -> (HashMap<(String, String), f64>, Vec<f64>) {
    let targets: BTreeSet<&String> = bitext.iter().flat_map(|p| &p.target).collect();
    let init = 1.0 / targets.len() as f64;
    let mut t: HashMap<(String, String), f64> = HashMap::new();
    let mut lls = Vec::new();
    for it in 0..=iterations {
        let mut counts: HashMap<(String, String), f64> = HashMap::new();
        let mut totals: HashMap<String, f64> = HashMap::new();
        let mut ll = 0.0;
        for p in bitext {
            let src: Vec<String> = std::iter::once(NULL.to_string()).chain(p.source.iter().cloned()).collect();
            for e in &p.target {
                let prob = |f: &String| *t.get(&(e.clone(), f.clone())).unwrap_or(&init);
                let z: f64 = src.iter().map(prob).sum();
                ll += (z / src.len() as f64).ln();
                for f in &src {
                    let x = prob(f) / z;
                    *counts.entry((e.clone(), f.clone())).or_default() += x;
                    *totals.entry(f.clone()).or_default() += x;
                }
            }
        }
        lls.push(ll);
        if it < iterations {
            t = counts.into_iter().map(|((e, f), c)| ((e, f.clone()), c / totals[&f])).collect();
        }
    }
    (t, lls)
}

fn random_bitext(rng: &mut ChaCha8Rng) -> Vec<BitextPair> {
    let sentence = |rng: &mut ChaCha8Rng, prefix: char, vocab: u32| -> String {
        let len = rng.random_range(1..7);
        (0..len).map(|_| format!("{prefix}{}", rng.random_range(0..vocab))).collect::<Vec<_>>().join(" ")
    };
    (0..rng.random_range(5..30)).map(|_| BitextPair::new(&sentence(rng, 's', 15), &sentence(rng, 't', 12))).collect()
}

fn model1_training() -> Outcome {
    let iterations = 10;
    let mut worst_dev: f64 = 0.0;
    for seed in 0..5 {
        let bitext = random_bitext(&mut rng(500 + seed));
        let opts = Model1Options { iterations, prune_threshold: 0.0, ..Default::default() };
        let (table, trace) = model1_train(&bitext, &opts, Exec::Sequential).unwrap();
        let (oracle, oracle_ll) = em_oracle(&bitext, iterations);
        ensure!(trace.log_likelihood.len() == iterations + 1, "trace length {}", trace.log_likelihood.len());
        for w in trace.log_likelihood.windows(2) {
            ensure!(w[1] >= w[0] - LL_TOL, "bitext {seed}: log-likelihood fell {} -> {}", w[0], w[1]);
        }
        for (a, b) in trace.log_likelihood.iter().zip(&oracle_ll) {
            ensure!(close(*a, *b, 0.0, 1e-9), "bitext {seed}: log-likelihood {a} vs oracle {b}");
        }
        for ((e, f), p) in &oracle {
            // Source id 0 is the NULL word.
            let got = if f == NULL { table.prob(table.target_id(e).unwrap(), 0) } else { table.translation(e, f) };
            ensure!((got - p).abs() <= 1e-9, "bitext {seed}: T({e}|{f}) = {got} vs oracle {p}");
        }
        worst_dev = trace.max_row_deviation.iter().copied().fold(worst_dev, f64::max);
        for s in 0..table.row_count() as u32 {
            let row = table.row(s);
            if !row.is_empty() {
                worst_dev = worst_dev.max((row.iter().map(|e| e.1).sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure!(worst_dev <= ROW_TOL, "row sums off by {worst_dev}");

    let pairs = [BitextPair::new("maison", "house"), BitextPair::new("la maison", "the house")];
    let (table, _) =
        model1_train(&pairs, &Model1Options { iterations: 20, ..Default::default() }, Exec::Sequential).unwrap();
    let p = table.translation("house", "maison");
    ensure!(p > 0.9, "T(house|maison) = {p}");
    Ok(format!(
        "5 bitexts monotone and equal to the EM oracle, max row deviation {worst_dev:.1e}, T(house|maison) = {p:.4}"
    ))
}

// Export

struct ExportFixture {
    _dir: tempfile::TempDir,
    exporter: Exporter,
    extractor: CompositeExtractor,
    queries: Vec<hybrid_core::forward::QueryEntry>,
    docs: usize,
}

fn export_fixture(seed: u64) -> ExportFixture {
    let mut rng = rng(seed);
    let dir = tempfile::tempdir().unwrap();
    let vocab = rng.random_range(30..120);
    let n = rng.random_range(50..300);
    let docs = random_docs(&mut rng, n, vocab, 30);
    write_embeddings(dir.path(), &mut rng, vocab, 12);
    let res: Resources = resources(&docs).with_base_dir(dir.path());
    let exporter = Exporter::new(&knn_configs(), &res).unwrap();
    let extractor = CompositeExtractor::new(&knn_configs(), &res).unwrap();
    let queries = (0..10)
        .map(|i| {
            let len = rng.random_range(1..6);
            random_query(&mut rng, &format!("q{i}"), vocab, len)
        })
        .collect();
    ExportFixture { _dir: dir, exporter, extractor, queries, docs: docs.len() }
}

fn abs_dot(x: &FieldVector, y: &FieldVector) -> f64 {
    match (x, y) {
        (FieldVector::Dense(a), FieldVector::Dense(b)) => {
            a.values().iter().zip(b.values()).map(|(p, q)| (f64::from(*p) * f64::from(*q)).abs()).sum()
        }
        (FieldVector::Sparse(a), FieldVector::Sparse(b)) => {
            a.iter().filter_map(|(i, p)| b.get(i).map(|q| (f64::from(p) * f64::from(q)).abs())).sum()
        }
        _ => f64::NAN,
    }
}

fn export_equivalence() -> Outcome {
    let mut pairs = 0usize;
    let mut worst: f64 = 0.0;
    for seed in 0..8 {
        let f = export_fixture(700 + seed);
        let mut wrng = rng(seed);
        let w = [wrng.random_range(0.1..3.0), wrng.random_range(0.1..3.0)];
        let (pm, ps) = f.exporter.export(Scenario::PerField, &w, Exec::Parallel).unwrap();
        let (cm, cs) = f.exporter.export(Scenario::Composite, &w, Exec::Parallel).unwrap();
        let all: Vec<u32> = (0..f.docs as u32).collect();
        for q in &f.queries {
            let fm = f.extractor.extract(q, &all, Exec::Sequential).unwrap();
            let Vector::Composite(qp) = f.exporter.query_vector(&pm, q).unwrap() else { return Err("layout".into()) };
            let Vector::Sparse(qc) = f.exporter.query_vector(&cm, q).unwrap() else { return Err("layout".into()) };
            for row in &fm.rows {
                let (Vector::Composite(dp), Vector::Sparse(dc)) = (ps.get(row.doc_id), cs.get(row.doc_id)) else {
                    return Err("layout".into());
                };
                for (j, (qf, df)) in qp.fields().iter().zip(dp.fields()).enumerate() {
                    let ip = qf.vector.inner_product(&df.vector).unwrap();
                    let want = row.values[j];
                    ensure!(
                        close(ip, want, 0.0, EXPORT_REL_TOL),
                        "seed {seed} {} {} field {j}: inner product {ip} vs feature {want}",
                        q.docno,
                        row.docno
                    );
                    if want != 0.0 {
                        worst = worst.max((ip - want).abs() / want.abs());
                    }
                }
                // Both layouts must give the same weighted score; rounding scales with the summand magnitudes.
                let a = composite_score(&qp, dp).unwrap();
                let b = dot_sparse(&qc, dc);
                let scale: f64 = qp
                    .fields()
                    .iter()
                    .zip(dp.fields())
                    .map(|(x, y)| x.weight.abs() * abs_dot(&x.vector, &y.vector))
                    .sum();
                ensure!(close(a, b, scale, EXPORT_REL_TOL), "seed {seed}: per-field {a} vs composite {b}");
                pairs += 1;
            }
        }
    }
    Ok(format!("{pairs} query-document pairs on 8 corpora, worst relative error {worst:.1e}"))
}

// Fusion

fn fusion_instance(rng: &mut ChaCha8Rng) -> (FeatureMatrix, Qrels) {
    let cols = rng.random_range(2..6);
    let mut fm = FeatureMatrix::new((0..cols).map(|c| format!("f{c}")).collect());
    let mut qrels = Qrels::new();
    for q in 0..rng.random_range(4..12) {
        let qid = format!("q{q}");
        for d in 0..rng.random_range(5..30) {
            let docno = format!("d{d:03}");
            let grade = if rng.random_bool(0.2) { rng.random_range(1..4) } else { 0 };
            qrels.insert(qid.clone(), docno.clone(), grade);
            let values = (0..cols)
                .map(|c| {
                    let signal = if c % 2 == 0 { f64::from(grade) } else { 0.0 };
                    signal * rng.random_range(0.0..1.0) + rng.random_range(-1.0..1.0) * (c + 1) as f64
                })
                .collect();
            fm.rows.push(FeatureRow { query_id: qid.clone(), doc_id: d, docno, values, flagged: false });
        }
    }
    (fm, qrels)
}

/// Mean metric over queries when ranking by `w · row`, ties by docno.
fn oracle_metric(fm: &FeatureMatrix, qrels: &Qrels, w: &[f64], ndcg: bool) -> f64 {
    let mut by_query: BTreeMap<&str, Vec<(f64, &str)>> = BTreeMap::new();
    for r in &fm.rows {
        let s: f64 = r.values.iter().zip(w).map(|(v, w)| v * w).sum();
        by_query.entry(&r.query_id).or_default().push((s, &r.docno));
    }
    let mut total = 0.0;
    for (qid, mut list) in by_query.clone() {
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let grades: Vec<u32> = list.iter().map(|e| qrels.grade(qid, e.1)).collect();
        total += if ndcg {
            let gain = |g: &[u32]| -> f64 {
                g.iter().take(10).enumerate().map(|(i, &g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2()).sum()
            };
            let mut ideal = qrels.ideal_grades(qid);
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let idcg = gain(&ideal);
            if idcg == 0.0 {
                0.0
            } else {
                gain(&grades) / idcg
            }
        } else {
            grades.iter().position(|&g| g > 0).map_or(0.0, |i| 1.0 / (i + 1) as f64)
        };
    }
    total / by_query.len() as f64
}

fn order(model: &LinearModel, fm: &FeatureMatrix) -> Vec<Vec<String>> {
    let run = rank_with_model(model, fm, "r").unwrap();
    run.queries.into_iter().map(|q| q.hits.into_iter().map(|h| h.0).collect()).collect()
}

fn fusion_training() -> Outcome {
    let mut gains = Vec::new();
    let mut rng = rng(900);
    let mut done = 0;
    while done < 10 {
        let (fm, qrels) = fusion_instance(&mut rng);
        if !fm.rows.iter().any(|r| qrels.grade(&r.query_id, &r.docno) > 0) {
            continue;
        }
        let ndcg = done % 2 == 0;
        let metric = if ndcg { Metric::Ndcg(10) } else { Metric::Mrr(None) };
        let trained = coordinate_ascent_train(&fm, &qrels, metric, &CoordinateAscentOptions::default()).unwrap();
        let cols = fm.columns.len();
        let mut best_single = f64::NEG_INFINITY;
        for c in 0..cols {
            let mut e = vec![0.0; cols];
            e[c] = 1.0;
            let single = oracle_metric(&fm, &qrels, &e, ndcg);
            ensure!(
                (single - trained.single_feature_metrics[c]).abs() <= ORACLE_TOL,
                "instance {done}: feature {c} baseline {} vs oracle {single}",
                trained.single_feature_metrics[c]
            );
            best_single = best_single.max(single);
        }
        let fused = oracle_metric(&fm, &qrels, &trained.model.weights, ndcg);
        ensure!(
            (fused - trained.metric).abs() <= ORACLE_TOL,
            "instance {done}: reported {} vs oracle {fused}",
            trained.metric
        );
        ensure!(
            fused >= best_single - ORACLE_TOL,
            "instance {done}: fused {fused} < best single feature {best_single}"
        );
        ensure!(trained.trace.windows(2).all(|w| w[1] > w[0]), "instance {done}: trace {:?}", trained.trace);
        ensure!(trained.trace.last() == Some(&trained.metric), "instance {done}: trace does not end at the metric");
        for c in [0.01, 0.5, 3.0, 1e4] {
            let scaled = LinearModel::new(trained.model.weights.iter().map(|w| w * c).collect()).unwrap();
            ensure!(
                order(&scaled, &fm) == order(&trained.model, &fm),
                "instance {done}: scaling by {c} changed ranking"
            );
        }
        gains.push(fused - best_single);
        done += 1;
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    Ok(format!("10 instances, mean gain over best single feature {mean_gain:.4}"))
}

// Metrics

fn rank_metrics() -> Outcome {
    let v = ndcg_at_k(&[0, 3], &[3, 0], 2);
    ensure!((v - 0.6309).abs() <= METRIC_HAND_TOL, "ndcg([0,3]) = {v}");
    let ideal = ndcg_at_k(&[3, 2, 0], &[3, 2, 0], 3);
    ensure!(ideal == 1.0, "ideal ndcg = {ideal}");
    let rel: HashSet<&str> = ["b"].into();
    ensure!(mrr(&["b", "a"], &rel) == 1.0, "mrr first");
    ensure!((mrr(&["a", "b"], &rel) - 0.5).abs() <= METRIC_HAND_TOL, "mrr second");
    ensure!(mrr(&["a", "c"], &rel) == 0.0, "mrr none");

    let qrels = Qrels::parse("q1 0 a 1\nq2 0 d 2\nq2 0 f 1\nq3 0 z 1\n".as_bytes()).unwrap();
    let run = RunOutput::parse_trec(
        "q1 Q0 x 1 3.0 r\nq1 Q0 a 2 2.0 r\nq1 Q0 y 3 1.0 r\nq2 Q0 d 1 3.0 r\nq2 Q0 e 2 2.0 r\nq2 Q0 f 3 1.0 r\nq3 Q0 x 1 1.0 r\n"
            .as_bytes(),
    )
    .unwrap();
    let e = evaluate_run(&run, &qrels, 10);
    let l3 = 3f64.log2();
    let want_ndcg = (1.0 / l3 + (3.0 + 0.5) / (3.0 + 1.0 / l3)) / 3.0;
    ensure!((e.mean_mrr - 0.5).abs() <= METRIC_HAND_TOL, "run mrr {}", e.mean_mrr);
    ensure!((e.mean_ndcg - want_ndcg).abs() <= METRIC_HAND_TOL, "run ndcg {} vs {want_ndcg}", e.mean_ndcg);
    Ok(format!("ndcg@2 {v:.4}, run ndcg@10 {:.4}, run mrr {:.4}", e.mean_ndcg, e.mean_mrr))
}

// Toy corpus

fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

/// Copies the bundled corpus and configs, without any build output.
fn toy_workspace() -> tempfile::TempDir {
    let ws = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(toy_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            fs::copy(&p, ws.path().join(p.file_name().unwrap())).unwrap();
        }
    }
    ws
}

struct ToyReport {
    bm25_train_mrr: f64,
    fusion_train_mrr: f64,
    fusion_fit_mrr: f64,
    bm25_test_mrr: f64,
    fusion_test_mrr: f64,
}

/// Writes the run file and reads it back, as `evaluate` would. Queries
/// without candidates have no lines, so they drop out of the means exactly
/// as they drop out of training.
fn run_and_save(ws: &Path, config: &str, queries: &[hybrid_core::forward::QueryEntry], out: &str) -> RunOutput {
    let p = Pipeline::load_file(ws.join(config), PipelineMode::Query, Exec::Sequential).unwrap();
    let run = to_run(&p.run_batch(queries).unwrap(), &p.descriptor().run_id, None);
    let path = ws.join("build").join(out);
    run.save(&path).unwrap();
    RunOutput::load(&path).unwrap()
}

/// The whole workflow through library calls, writing under `ws/build`.
fn build_toy(ws: &Path, exec: Exec) -> ToyReport {
    let build = ws.join("build");
    let docs = read_jsonl_file(ws.join("docs.jsonl")).unwrap();
    let fwd = build_forward(&docs, &[FieldSpec::parsed("text"), FieldSpec::parsed("title")], true).unwrap();
    save_forward(build.join("forward"), &fwd).unwrap();
    let text = hybrid_core::forward::load_forward(forward_file_name(build.join("forward"), "text")).unwrap();
    InvertedIndex::build_from_forward(&text).save(build.join("inverted_text.bin")).unwrap();

    let train = read_jsonl_file(ws.join("queries_train.jsonl")).unwrap();
    let test = read_jsonl_file(ws.join("queries_test.jsonl")).unwrap();
    let qrels = Qrels::load(ws.join("qrels.txt")).unwrap();
    let bitext = build_bitext(&train, "text", &qrels, &text, 64).unwrap();
    let (table, _) = model1_train(&bitext, &Model1Options { iterations: 5, ..Default::default() }, exec).unwrap();
    table.save(build.join("model1.bin")).unwrap();

    let trainer = Pipeline::load_file(ws.join("exp_fusion_train.json"), PipelineMode::Training, exec).unwrap();
    let features = trainer.final_features_batch(&train).unwrap();
    let opts = CoordinateAscentOptions { seed: 42, exec, ..Default::default() };
    let trained = coordinate_ascent_train(&features, &qrels, Metric::Mrr(None), &opts).unwrap();
    trained.model.save(build.join("fusion.model"), &trainer.final_columns().unwrap()).unwrap();

    let res = Resources::load(build.join("forward")).unwrap();
    let exporter = Exporter::from_file(ws.join("extractors_knn.json"), &res).unwrap();
    let (manifest, store) = exporter.export(Scenario::PerField, &[1.0, 1.0], exec).unwrap();
    write_export(build.join("knn"), &manifest, &store).unwrap();
    let mut b = HnswBuilder::new(store.space(), HnswParams { seed: 42, ..HnswParams::default() }).unwrap();
    b.insert_batched(store.vectors().to_vec(), 64, exec).unwrap();
    b.freeze().save(build.join("hnsw.bin")).unwrap();

    let mrr_of = |run: &RunOutput| evaluate_run(run, &qrels, 10).mean_mrr;
    let report = ToyReport {
        bm25_train_mrr: mrr_of(&run_and_save(ws, "exp_bm25.json", &train, "bm25_train.run")),
        fusion_train_mrr: mrr_of(&run_and_save(ws, "exp_fusion.json", &train, "fusion_train.run")),
        fusion_fit_mrr: trained.metric,
        bm25_test_mrr: mrr_of(&run_and_save(ws, "exp_bm25.json", &test, "bm25.run")),
        fusion_test_mrr: mrr_of(&run_and_save(ws, "exp_fusion.json", &test, "fusion.run")),
    };
    run_and_save(ws, "exp_knn.json", &test, "knn.run");
    report
}

fn end_to_end() -> Outcome {
    let ws = toy_workspace();
    let start = Instant::now();
    let r = build_toy(ws.path(), Exec::Sequential);
    within(start, END_TO_END_BUDGET)?;
    ensure!(
        r.fusion_train_mrr >= r.bm25_train_mrr,
        "fusion training MRR {:.4} < BM25 {:.4}",
        r.fusion_train_mrr,
        r.bm25_train_mrr
    );
    ensure!(
        (r.fusion_train_mrr - r.fusion_fit_mrr).abs() <= ORACLE_TOL,
        "evaluated MRR {} differs from the training metric {}",
        r.fusion_train_mrr,
        r.fusion_fit_mrr
    );
    Ok(format!(
        "train MRR bm25 {:.4} -> fusion {:.4}; test MRR bm25 {:.4} -> fusion {:.4}",
        r.bm25_train_mrr, r.fusion_train_mrr, r.bm25_test_mrr, r.fusion_test_mrr
    ))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let ws = toy_workspace();
    let build = ws.path().join("build");
    build_toy(ws.path(), Exec::Sequential);
    let first = snapshot(&build);
    fs::remove_dir_all(&build).unwrap();
    build_toy(ws.path(), Exec::Parallel);
    let second = snapshot(&build);
    let names: Vec<_> = first.keys().collect();
    ensure!(names == second.keys().collect::<Vec<_>>(), "different file sets");
    for (name, bytes) in &first {
        ensure!(second[name] == *bytes, "{} differs", name.display());
    }
    ensure!(
        first.keys().any(|p| p.ends_with("hnsw.bin")) && first.keys().any(|p| p.ends_with("fusion.run")),
        "missing outputs"
    );
    Ok(format!("{} files byte-identical across sequential and parallel builds", first.len()))
}
