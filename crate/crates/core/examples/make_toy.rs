//! Writes the bundled toy collection: about a thousand synthetic documents,
//! train/test queries with graded judgments, word embeddings and the
//! extractor and experiment configurations used in the README walkthrough.
//!
//! Queries are drawn from the same topics as the documents but half of their
//! content words are replaced by query-only synonyms, so lexical matching
//! alone misses part of the signal.
//!
//! Usage: `cargo run -p hybrid-core --example make_toy [-- OUT_DIR]`

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hybrid_core::extract::EmbeddingTable;
use hybrid_core::forward::DocumentEntry;
use hybrid_core::letor::Qrels;
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 7;
const TOPICS: usize = 40;
const SUBTOPICS: usize = 5;
const TOPIC_WORDS: usize = 10;
const SUB_WORDS: usize = 4;
const BACKGROUND: usize = 400;
const DOCS: usize = 1000;
const TRAIN_QUERIES: usize = 150;
const DIM: usize = 24;

struct Words {
    rng: ChaCha8Rng,
    seen: HashSet<String>,
}

impl Words {
    fn fresh(&mut self) -> String {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(C[self.rng.random_range(0..C.len())] as char);
                w.push(V[self.rng.random_range(0..V.len())] as char);
            }
            if self.rng.random_bool(0.3) {
                w.push(C[self.rng.random_range(0..C.len())] as char);
            }
            if self.seen.insert(w.clone()) {
                return w;
            }
        }
    }

    fn many(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.fresh()).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, scale: f32) -> Vec<f32> {
    (0..DIM)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x as f32
        })
        .collect::<Vec<f32>>()
}

fn jitter(rng: &mut ChaCha8Rng, base: &[f32], scale: f32) -> Vec<f32> {
    base.iter().zip(gaussian(rng, scale)).map(|(a, b)| a + b).collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String]) -> &'a str {
    &words[rng.random_range(0..words.len())]
}

fn write_jsonl(path: &Path, entries: &[DocumentEntry]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in entries {
        writeln!(w, "{}", e.to_json())?;
    }
    w.flush()
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(&value).unwrap();
    text.push('\n');
    fs::write(dir.join(name), text)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/toy"));
    fs::create_dir_all(&out)?;
    let mut words = Words { rng: ChaCha8Rng::seed_from_u64(SEED), seen: HashSet::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);

    let background = words.many(BACKGROUND);
    let topic_words: Vec<Vec<String>> = (0..TOPICS).map(|_| words.many(TOPIC_WORDS)).collect();
    let sub_words: Vec<Vec<Vec<String>>> =
        (0..TOPICS).map(|_| (0..SUBTOPICS).map(|_| words.many(SUB_WORDS)).collect()).collect();
    let synonyms: Vec<Vec<String>> = topic_words.iter().map(|ws| words.many(ws.len())).collect();
    let sub_synonyms: Vec<Vec<Vec<String>>> =
        sub_words.iter().map(|t| t.iter().map(|ws| words.many(ws.len())).collect()).collect();
    let zipf = WeightedIndex::new((0..BACKGROUND).map(|r| 1.0 / (r as f64 + 1.0)))?;

    // Documents.
    let mut docs = Vec::with_capacity(DOCS);
    let mut doc_topic = Vec::with_capacity(DOCS);
    let mut strong = Vec::with_capacity(DOCS);
    for i in 0..DOCS {
        let t = i % TOPICS;
        let s = rng.random_range(0..SUBTOPICS);
        let len = rng.random_range(30..90);
        let mut text = Vec::with_capacity(len);
        for _ in 0..len {
            let u: f64 = rng.random();
            text.push(if u < 0.15 {
                pick(&mut rng, &topic_words[t])
            } else if u < 0.27 {
                pick(&mut rng, &sub_words[t][s])
            } else {
                background[zipf.sample(&mut rng)].as_str()
            });
        }
        let mut title: Vec<&str> = (0..3).map(|_| pick(&mut rng, &topic_words[t])).collect();
        let has_sub = rng.random_bool(0.5);
        if has_sub {
            title.push(pick(&mut rng, &sub_words[t][s]));
        }
        docs.push(DocumentEntry::new(format!("D{i:04}"), text.join(" ")).with_field("title", title.join(" ")));
        doc_topic.push((t, s));
        strong.push(has_sub);
    }

    // Queries, one per (topic, subtopic) that has documents.
    let mut pairs: Vec<(usize, usize)> =
        (0..TOPICS).flat_map(|t| (0..SUBTOPICS).map(move |s| (t, s))).filter(|p| doc_topic.contains(p)).collect();
    pairs.shuffle(&mut rng);
    let mut queries = Vec::with_capacity(pairs.len());
    let mut qrels = Qrels::new();
    for (qi, &(t, s)) in pairs.iter().enumerate() {
        let mut tokens = Vec::new();
        for _ in 0..2 {
            let j = rng.random_range(0..TOPIC_WORDS);
            tokens.push(if rng.random_bool(0.5) { &synonyms[t][j] } else { &topic_words[t][j] });
        }
        for _ in 0..2 {
            let j = rng.random_range(0..SUB_WORDS);
            tokens.push(if rng.random_bool(0.5) { &sub_synonyms[t][s][j] } else { &sub_words[t][s][j] });
        }
        if rng.random_bool(0.3) {
            tokens.push(&background[zipf.sample(&mut rng)]);
        }
        let qid = format!("Q{qi:03}");
        let text: Vec<&str> = tokens.iter().map(|w| w.as_str()).collect();
        queries.push(DocumentEntry::new(qid.clone(), text.join(" ")));
        for (d, &(dt, ds)) in doc_topic.iter().enumerate() {
            if (dt, ds) == (t, s) {
                qrels.insert(qid.clone(), docs[d].docno.clone(), if strong[d] { 2 } else { 1 });
            } else if dt == t && rng.random_bool(0.2) {
                qrels.insert(qid.clone(), docs[d].docno.clone(), 0);
            }
        }
    }
    let (train, test) = queries.split_at(TRAIN_QUERIES.min(queries.len()));

    // Embeddings: words cluster by topic and subtopic; a synonym sits next to its word.
    let mut doc_emb = EmbeddingTable::new(DIM);
    let mut query_emb = EmbeddingTable::new(DIM);
    for w in &background {
        let v = gaussian(&mut rng, 0.8);
        doc_emb.insert(w, &v)?;
        query_emb.insert(w, &v)?;
    }
    for t in 0..TOPICS {
        let centre = gaussian(&mut rng, 1.0);
        for (w, syn) in topic_words[t].iter().zip(&synonyms[t]) {
            let v = jitter(&mut rng, &centre, 0.5);
            doc_emb.insert(w, &v)?;
            query_emb.insert(w, &v)?;
            query_emb.insert(syn, &jitter(&mut rng, &v, 0.3))?;
        }
        for s in 0..SUBTOPICS {
            let sub_centre = jitter(&mut rng, &centre, 0.7);
            for (w, syn) in sub_words[t][s].iter().zip(&sub_synonyms[t][s]) {
                let v = jitter(&mut rng, &sub_centre, 0.5);
                doc_emb.insert(w, &v)?;
                query_emb.insert(w, &v)?;
                query_emb.insert(syn, &jitter(&mut rng, &v, 0.3))?;
            }
        }
    }

    write_jsonl(&out.join("docs.jsonl"), &docs)?;
    write_jsonl(&out.join("queries_train.jsonl"), train)?;
    write_jsonl(&out.join("queries_test.jsonl"), test)?;
    qrels.write_to(BufWriter::new(fs::File::create(out.join("qrels.txt"))?))?;
    doc_emb.save(out.join("embed_doc.txt"))?;
    query_emb.save(out.join("embed_query.txt"))?;

    use serde_json::json;
    write_config(
        &out,
        "extractors_fusion.json",
        json!({"extractors": [
            {"type": "bm25", "params": {"indexFieldName": "text", "k1": 1.2, "b": 0.75}},
            {"type": "model1", "params": {"indexFieldName": "text", "modelFile": "build/model1.bin", "lambda": 0.1}}
        ]}),
    )?;
    write_config(
        &out,
        "extractors_knn.json",
        json!({"extractors": [
            {"type": "bm25", "params": {"indexFieldName": "text"}},
            {"type": "avgWordEmbed", "params": {
                "indexFieldName": "text",
                "queryEmbedFile": "embed_query.txt",
                "docEmbedFile": "embed_doc.txt",
                "useIDFWeight": true,
                "useL2Norm": true,
                "distType": "cosine"
            }}
        ]}),
    )?;
    write_config(
        &out,
        "provider_bm25.json",
        json!({"indexFile": "build/inverted_text.bin", "indexFieldName": "text"}),
    )?;
    write_config(
        &out,
        "provider_knn.json",
        json!({"exportDir": "build/knn", "indexFile": "build/hnsw.bin", "efSearch": 100}),
    )?;
    let bm25 = json!({
        "candProv": "inverted-bm25",
        "candProvAddConfParam": "provider_bm25.json",
        "fwdIndexDir": "build/forward",
        "candQty": 100,
        "topFinal": 100,
        "runId": "bm25"
    });
    write_config(&out, "exp_bm25.json", bm25)?;
    let mut fusion = json!({
        "candProv": "inverted-bm25",
        "candProvAddConfParam": "provider_bm25.json",
        "fwdIndexDir": "build/forward",
        "extrType": "extractors_fusion.json",
        "candQty": 100,
        "topFinal": 100,
        "runId": "fusion"
    });
    write_config(&out, "exp_fusion_train.json", fusion.clone())?;
    fusion["modelFinal"] = json!("build/fusion.model");
    write_config(&out, "exp_fusion.json", fusion)?;
    write_config(
        &out,
        "exp_knn.json",
        json!({
            "candProv": "knn-hnsw",
            "candProvAddConfParam": "provider_knn.json",
            "fwdIndexDir": "build/forward",
            "candQty": 100,
            "topFinal": 100,
            "runId": "knn"
        }),
    )?;
    fs::write(out.join(".gitignore"), "build/\n")?;

    eprintln!(
        "{} documents, {} train and {} test queries, {} judgments",
        docs.len(),
        train.len(),
        test.len(),
        qrels.query_ids().map(|q| qrels.judged(q).count()).sum::<usize>()
    );
    Ok(())
}
