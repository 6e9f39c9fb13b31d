use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hybrid_core::ann::{HnswBuilder, HnswParams};
use hybrid_core::export::{read_export, write_export, Exporter, Scenario};
use hybrid_core::extract::Resources;
use hybrid_core::forward::{build_forward, forward_file_name, load_forward, read_jsonl_file, save_forward, FieldSpec};
use hybrid_core::inverted::InvertedIndex;
use hybrid_core::letor::{
    coordinate_ascent_train, evaluate_run, export_ranklib, CoordinateAscentOptions, LinearModel, Metric, Qrels,
    RunOutput,
};
use hybrid_core::model1::{build_bitext, model1_train, Model1Options};
use hybrid_core::pipeline::{to_run, Pipeline, PipelineMode};
use hybrid_core::{server, Exec};

/// Hybrid sparse-dense retrieval toolkit.
#[derive(Parser)]
#[command(name = "hybrid-retriever", version)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed for randomized steps (HNSW levels, coordinate-ascent restarts).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexKind {
    Inverted,
    Hnsw,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    PerField,
    Composite,
}

#[derive(Subcommand)]
enum Command {
    /// Build forward indices from a JSONL document file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated field specs: name, name:parsed or name:raw.
        #[arg(long, value_delimiter = ',', default_value = "text")]
        fields: Vec<String>,
        /// Keep token sequences (needed by proximity features and Model 1 training).
        #[arg(long)]
        positions: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an inverted index from a forward index, or an HNSW graph from exported vectors.
    BuildIndex {
        #[arg(long, value_enum)]
        kind: IndexKind,
        #[arg(long, required_if_eq("kind", "inverted"))]
        forward: Option<PathBuf>,
        #[arg(long, default_value = "text")]
        field: String,
        #[arg(long, required_if_eq("kind", "hnsw"))]
        export: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long, default_value_t = 200)]
        ef_construction: usize,
        /// Insertion batch size for HNSW construction.
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an IBM Model 1 translation table on query/relevant-document pairs.
    TrainModel1 {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long)]
        forward: PathBuf,
        #[arg(long, default_value = "text")]
        field: String,
        #[arg(long)]
        query_field: Option<String>,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 64)]
        chunk_len: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a linear fusion model with coordinate ascent.
    TrainFusion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value = "ndcg@10")]
        metric: String,
        #[arg(long, default_value_t = 2)]
        restarts: usize,
        /// Also write the training features in RankLib format.
        #[arg(long)]
        ranklib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export query and document vectors for k-NN search.
    ExportKnn {
        #[arg(long)]
        forward: PathBuf,
        #[arg(long)]
        extractors: PathBuf,
        #[arg(long, value_enum, default_value = "per-field")]
        scenario: ScenarioArg,
        /// Comma-separated field weights (default: all 1).
        #[arg(long, value_delimiter = ',', conflicts_with = "model")]
        weights: Option<Vec<f64>>,
        /// Take the weights from a trained fusion model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run queries through a pipeline and write a TREC run.
    Query {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Run file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-query and mean NDCG@k and MRR of a TREC run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Serve a pipeline over newline-delimited JSON on TCP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
}

fn setup_exec(threads: usize) -> Result<Exec> {
    if threads == 1 {
        return Ok(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("cannot start the thread pool")?;
    }
    Ok(Exec::Parallel)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn ingest(input: &Path, fields: &[String], positions: bool, out: &Path) -> Result<()> {
    let docs = read_jsonl_file(input)?;
    let specs = fields.iter().map(|f| f.parse()).collect::<hybrid_core::Result<Vec<FieldSpec>>>()?;
    let index = build_forward(&docs, &specs, positions)?;
    save_forward(out, &index)?;
    for (name, f) in &index {
        eprintln!("{name}: {} documents, {} terms, {} tokens", f.doc_count(), f.vocab_size(), f.total_tokens());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = setup_exec(cli.threads)?;
    match cli.command {
        Command::Ingest { input, fields, positions, out } => ingest(&input, &fields, positions, &out),
        Command::BuildIndex { kind: IndexKind::Inverted, forward, field, out, .. } => {
            let fwd = load_forward(forward_file_name(forward.unwrap(), &field))?;
            let index = InvertedIndex::build_from_forward(&fwd);
            ensure_parent(&out)?;
            index.save(&out)?;
            eprintln!("{} documents, {} terms", index.doc_count(), index.term_count());
            Ok(())
        }
        Command::BuildIndex { kind: IndexKind::Hnsw, export, m, ef_construction, batch, out, .. } => {
            let (_, store) = read_export(export.unwrap())?;
            let params = HnswParams {
                ef_construction,
                seed: cli.seed.unwrap_or(HnswParams::default().seed),
                ..HnswParams::with_m(m)
            };
            let mut b = HnswBuilder::new(store.space(), params)?;
            b.insert_batched(store.vectors().to_vec(), batch, exec)?;
            let index = b.freeze();
            ensure_parent(&out)?;
            index.save(&out)?;
            eprintln!("{} points, max level {}", index.len(), index.max_level());
            Ok(())
        }
        Command::TrainModel1 { queries, qrels, forward, field, query_field, iterations, chunk_len, lambda, out } => {
            let queries = read_jsonl_file(&queries)?;
            let qrels = Qrels::load(&qrels)?;
            let fwd = load_forward(forward_file_name(&forward, &field))?;
            let qf = query_field.as_deref().unwrap_or(&field);
            let bitext = build_bitext(&queries, qf, &qrels, &fwd, chunk_len)?;
            if bitext.is_empty() {
                bail!("no query has a judged relevant document in the forward index");
            }
            let opts = Model1Options { iterations, lambda, ..Default::default() };
            let (table, trace) = model1_train(&bitext, &opts, exec)?;
            for (i, ll) in trace.log_likelihood.iter().enumerate() {
                eprintln!("iteration {i}: log-likelihood {ll:.4}");
            }
            ensure_parent(&out)?;
            table.save(&out)?;
            Ok(())
        }
        Command::TrainFusion { config, queries, qrels, metric, restarts, ranklib, out } => {
            let pipeline = Pipeline::load_file(&config, PipelineMode::Training, exec)?;
            if pipeline.descriptor().test_only {
                bail!("{} is marked testOnly", config.display());
            }
            let columns = pipeline.final_columns().context("descriptor has no extrType")?;
            let queries = read_jsonl_file(&queries)?;
            let qrels = Qrels::load(&qrels)?;
            let metric: Metric = metric.parse()?;
            let features = pipeline.final_features_batch(&queries)?;
            if let Some(path) = ranklib {
                let mut w = create(&path)?;
                export_ranklib(&features, &qrels, &mut w)?;
                w.flush()?;
            }
            let opts = CoordinateAscentOptions {
                restarts,
                seed: cli.seed.unwrap_or(CoordinateAscentOptions::default().seed),
                exec,
                ..Default::default()
            };
            let trained = coordinate_ascent_train(&features, &qrels, metric, &opts)?;
            for (c, m) in columns.iter().zip(&trained.single_feature_metrics) {
                eprintln!("{c} alone: {metric} {m:.4}");
            }
            eprintln!("fused: {metric} {:.4}", trained.metric);
            ensure_parent(&out)?;
            trained.model.save(&out, &columns)?;
            Ok(())
        }
        Command::ExportKnn { forward, extractors, scenario, weights, model, out } => {
            let res = Resources::load(&forward)?;
            let exporter = Exporter::from_file(&extractors, &res)?;
            let weights = match (weights, model) {
                (Some(w), _) => w,
                (None, Some(m)) => LinearModel::load(&m)?.weights,
                (None, None) => vec![1.0; exporter.field_count()],
            };
            let scenario = match scenario {
                ScenarioArg::PerField => Scenario::PerField,
                ScenarioArg::Composite => Scenario::Composite,
            };
            let (manifest, store) = exporter.export(scenario, &weights, exec)?;
            write_export(&out, &manifest, &store)?;
            if !manifest.flagged_docs.is_empty() {
                eprintln!("{} documents have no in-vocabulary embedding tokens", manifest.flagged_docs.len());
            }
            Ok(())
        }
        Command::Query { config, queries, k, out } => {
            if k == 0 {
                bail!("--k must be >= 1");
            }
            let pipeline = Pipeline::load_file(&config, PipelineMode::Query, exec)?;
            let queries = read_jsonl_file(&queries)?;
            let results = pipeline.run_batch(&queries)?;
            let run = to_run(&results, &pipeline.descriptor().run_id, Some(k));
            match out {
                Some(path) => {
                    let mut w = create(&path)?;
                    run.write_trec(&mut w)?;
                    w.flush()?;
                }
                None => {
                    let mut w = BufWriter::new(io::stdout().lock());
                    run.write_trec(&mut w)?;
                    w.flush()?;
                }
            }
            Ok(())
        }
        Command::Evaluate { run, qrels, k } => {
            let run = RunOutput::load(&run)?;
            let qrels = Qrels::load(&qrels)?;
            let e = evaluate_run(&run, &qrels, k);
            let mut w = BufWriter::new(io::stdout().lock());
            for (qid, ndcg, rr) in &e.per_query {
                writeln!(w, "ndcg@{k}\t{qid}\t{ndcg:.4}")?;
                writeln!(w, "mrr\t{qid}\t{rr:.4}")?;
            }
            writeln!(w, "ndcg@{k}\tall\t{:.4}", e.mean_ndcg)?;
            writeln!(w, "mrr\tall\t{:.4}", e.mean_mrr)?;
            w.flush()?;
            Ok(())
        }
        Command::Serve { config, bind } => {
            let pipeline = Pipeline::load_file(&config, PipelineMode::Query, exec)?;
            let handle = server::spawn(Arc::new(pipeline), bind.as_str())?;
            println!("listening on {}", handle.local_addr());
            io::stdout().flush()?;
            handle.wait();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
