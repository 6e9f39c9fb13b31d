//! Multi-stage retrieval: a candidate provider, then an optional
//! intermediate re-ranker over all candidates, then an optional final
//! re-ranker over the top `topFinal`.
//!
//! Experiments are described by JSON descriptors:
//!
//! ```json
//! [{"candProv": "inverted-bm25",
//!   "candProvAddConfParam": "provider.json",
//!   "extrTypeInterm": "interm_extr.json", "modelInterm": "interm.model",
//!   "extrType": "final_extr.json", "modelFinal": "final.model",
//!   "candQty": 2000, "topFinal": 150, "runId": "sample_run_id",
//!   "testOnly": 0, "fwdIndexDir": "forward"}]
//! ```
//!
//! Relative paths resolve against the descriptor's directory. The provider
//! configuration for `inverted-bm25` takes `indexFile` (optional; built from
//! the forward index when absent), `indexFieldName`, `queryFieldName`, `k1`
//! and `b`. The `knn-*` providers take `exportDir`, `indexFile` (HNSW only)
//! and `efSearch`; their paths resolve against the provider file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::ann::{BruteForceIndex, HnswIndex, SearchHit};
use crate::bm25::Bm25Params;
use crate::error::{Error, Result};
use crate::exec::{map_ordered, Exec};
use crate::export::{read_export, ExportManifest, Exporter};
use crate::extract::{CompositeExtractor, ExtractorConfig, FeatureMatrix, Params, Resources};
use crate::forward::{ForwardIndexField, QueryEntry};
use crate::inverted::InvertedIndex;
use crate::letor::{LinearModel, QueryRun, RunOutput};
use crate::vectors::Vector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderKind {
    #[serde(rename = "inverted-bm25")]
    InvertedBm25,
    #[serde(rename = "knn-hnsw")]
    KnnHnsw,
    #[serde(rename = "knn-bruteforce")]
    KnnBruteForce,
}

fn flag<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    match Value::deserialize(d)? {
        Value::Bool(b) => Ok(b),
        Value::Number(n) => Ok(n.as_f64() != Some(0.0)),
        Value::String(s) => match s.to_ascii_lowercase().as_str() {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            _ => Err(serde::de::Error::custom(format!("bad flag \"{s}\""))),
        },
        Value::Null => Ok(false),
        other => Err(serde::de::Error::custom(format!("bad flag {other}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentDescriptor {
    #[serde(default = "ExperimentDescriptor::default_provider")]
    pub cand_prov: ProviderKind,
    #[serde(default)]
    pub cand_prov_add_conf_param: Option<String>,
    #[serde(default)]
    pub extr_type_interm: Option<String>,
    #[serde(default)]
    pub model_interm: Option<String>,
    #[serde(default)]
    pub extr_type: Option<String>,
    #[serde(default)]
    pub model_final: Option<String>,
    #[serde(default = "ExperimentDescriptor::default_cand_qty")]
    pub cand_qty: usize,
    #[serde(default = "ExperimentDescriptor::default_top_final")]
    pub top_final: usize,
    #[serde(default = "ExperimentDescriptor::default_run_id")]
    pub run_id: String,
    #[serde(default, deserialize_with = "flag")]
    pub test_only: bool,
    /// Accepted for compatibility; output paths are given explicitly.
    #[serde(default)]
    pub exper_subdir: Option<String>,
    #[serde(default = "ExperimentDescriptor::default_fwd_dir")]
    pub fwd_index_dir: String,
}

impl ExperimentDescriptor {
    fn default_provider() -> ProviderKind {
        ProviderKind::InvertedBm25
    }

    fn default_cand_qty() -> usize {
        1000
    }

    fn default_top_final() -> usize {
        150
    }

    fn default_run_id() -> String {
        "run".into()
    }

    fn default_fwd_dir() -> String {
        "forward".into()
    }

    pub fn new() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_final == 0 || self.cand_qty < self.top_final {
            return Err(Error::config(format!(
                "need candQty >= topFinal >= 1, got candQty {} and topFinal {}",
                self.cand_qty, self.top_final
            )));
        }
        if self.extr_type_interm.is_some() != self.model_interm.is_some() {
            return Err(Error::config("extrTypeInterm and modelInterm must be given together"));
        }
        if self.model_final.is_some() && self.extr_type.is_none() {
            return Err(Error::config("modelFinal needs extrType"));
        }
        if self.cand_prov != ProviderKind::InvertedBm25 && self.cand_prov_add_conf_param.is_none() {
            return Err(Error::config("k-NN providers need candProvAddConfParam"));
        }
        Ok(())
    }
}

impl Default for ExperimentDescriptor {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DescriptorFile {
    Many(Vec<ExperimentDescriptor>),
    One(ExperimentDescriptor),
}

pub fn parse_descriptors(text: &str) -> Result<Vec<ExperimentDescriptor>> {
    let parsed: DescriptorFile =
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad experiment descriptor: {e}")))?;
    Ok(match parsed {
        DescriptorFile::Many(v) => v,
        DescriptorFile::One(d) => vec![d],
    })
}

pub fn load_descriptors(path: impl AsRef<Path>) -> Result<Vec<ExperimentDescriptor>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_descriptors(&text)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn read_provider_config(path: &Path, kind: &str) -> Result<ExtractorConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let params: serde_json::Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("bad provider configuration {}: {e}", path.display())))?;
    Ok(ExtractorConfig { kind: kind.to_string(), params })
}

/// Exact BM25 top-k from the inverted index.
pub struct Bm25Provider {
    index: InvertedIndex,
    field: Arc<ForwardIndexField>,
    query_field: String,
    params: Bm25Params,
}

impl Bm25Provider {
    pub fn new(
        index: InvertedIndex,
        field: Arc<ForwardIndexField>,
        query_field: &str,
        params: Bm25Params,
    ) -> Result<Self> {
        params.validate().map_err(|e| Error::config(e.to_string()))?;
        if index.doc_count() != field.doc_count() {
            return Err(Error::config(format!(
                "inverted index has {} documents but field \"{}\" has {}",
                index.doc_count(),
                field.name(),
                field.doc_count()
            )));
        }
        Ok(Bm25Provider { index, field, query_field: query_field.to_string(), params })
    }

    fn from_config(cfg: &ExtractorConfig, base: &Path, res: &Resources) -> Result<Self> {
        let p = Params::new(cfg);
        let field_name = p.str("indexFieldName")?.unwrap_or("text");
        let query_field = p.str("queryFieldName")?.unwrap_or(field_name);
        let field = res.field(field_name)?.clone();
        let index = match p.str("indexFile")? {
            Some(f) => {
                let path = resolve(base, f);
                require_file(&path, "inverted index")?;
                InvertedIndex::load(&path)?
            }
            None => InvertedIndex::build_from_forward(&field),
        };
        let d = Bm25Params::default();
        Self::new(index, field, query_field, Bm25Params { k1: p.f64("k1", d.k1)?, b: p.f64("b", d.b)? })
    }

    pub fn search(&self, query: &QueryEntry, k: usize) -> Result<Vec<SearchHit>> {
        let bag = self.field.query_bag(query.field(&self.query_field).unwrap_or(""));
        self.index.bm25_retrieve(&bag, k, &self.params)
    }
}

enum KnnIndex {
    BruteForce(BruteForceIndex),
    Hnsw(HnswIndex),
}

/// k-NN search over exported vectors; queries are vectorized with the
/// extractors recorded in the export manifest.
pub struct KnnSearcher {
    exporter: Exporter,
    manifest: ExportManifest,
    index: KnnIndex,
    ef_search: usize,
}

impl KnnSearcher {
    fn from_config(kind: ProviderKind, cfg: &ExtractorConfig, base: &Path, res: &Resources) -> Result<Self> {
        let p = Params::new(cfg);
        let export_dir = resolve(base, p.required_str("exportDir")?);
        let (manifest, store) = read_export(&export_dir)?;
        let exporter = Exporter::from_manifest(&manifest, res)?;
        if manifest.doc_count != res.doc_count() {
            return Err(Error::config("export and forward indices cover different document counts"));
        }
        let index = match kind {
            ProviderKind::KnnBruteForce => KnnIndex::BruteForce(BruteForceIndex::new(store)),
            ProviderKind::KnnHnsw => {
                let path = resolve(base, p.required_str("indexFile")?);
                require_file(&path, "HNSW index")?;
                let h = HnswIndex::load(&path)?;
                if h.len() != manifest.doc_count || h.store().space() != store.space() {
                    return Err(Error::config(format!("{} does not match the export", path.display())));
                }
                KnnIndex::Hnsw(h)
            }
            ProviderKind::InvertedBm25 => unreachable!("not a k-NN provider"),
        };
        Ok(KnnSearcher { exporter, manifest, index, ef_search: p.usize("efSearch", 100)? })
    }

    pub fn manifest(&self) -> &ExportManifest {
        &self.manifest
    }

    pub fn query_vector(&self, query: &QueryEntry) -> Result<Vector> {
        self.exporter.query_vector(&self.manifest, query)
    }

    pub fn search_vector(&self, q: &Vector, k: usize) -> Result<Vec<SearchHit>> {
        match &self.index {
            KnnIndex::BruteForce(b) => b.search_with(q, k, Exec::Sequential),
            KnnIndex::Hnsw(h) => h.search(q, k, self.ef_search.max(k)),
        }
    }

    pub fn search(&self, query: &QueryEntry, k: usize) -> Result<Vec<SearchHit>> {
        self.search_vector(&self.query_vector(query)?, k)
    }
}

pub enum CandidateProvider {
    Bm25(Bm25Provider),
    Knn(KnnSearcher),
}

impl CandidateProvider {
    pub fn name(&self) -> &'static str {
        match self {
            CandidateProvider::Bm25(_) => "inverted-bm25",
            CandidateProvider::Knn(k) => match k.index {
                KnnIndex::BruteForce(_) => "knn-bruteforce",
                KnnIndex::Hnsw(_) => "knn-hnsw",
            },
        }
    }

    /// Top-`k` `(doc id, score)` best first.
    pub fn candidates(&self, query: &QueryEntry, k: usize) -> Result<Vec<SearchHit>> {
        match self {
            CandidateProvider::Bm25(p) => p.search(query, k),
            CandidateProvider::Knn(s) => s.search(query, k),
        }
    }

    pub fn knn(&self) -> Option<&KnnSearcher> {
        match self {
            CandidateProvider::Knn(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineMode {
    /// Every configured stage needs its model.
    Query,
    /// `modelFinal` may be absent; final-stage features are computed for training.
    Training,
}

struct Rerank {
    extractor: CompositeExtractor,
    model: LinearModel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageInfo {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    pub query_id: String,
    /// `(docno, score)` best first.
    pub hits: Vec<(String, f64)>,
    pub stages: Vec<StageInfo>,
}

pub struct Pipeline {
    descriptor: ExperimentDescriptor,
    resources: Resources,
    provider: CandidateProvider,
    interm: Option<Rerank>,
    final_extractor: Option<CompositeExtractor>,
    final_model: Option<LinearModel>,
    exec: Exec,
}

fn load_model(path: &Path, extractor: &CompositeExtractor) -> Result<LinearModel> {
    require_file(path, "model")?;
    let m = LinearModel::load(path)?;
    if m.weights.len() != extractor.columns().len() {
        return Err(Error::config(format!(
            "model {} has {} weights for {} features",
            path.display(),
            m.weights.len(),
            extractor.columns().len()
        )));
    }
    Ok(m)
}

impl Pipeline {
    /// Loads every index, model and extractor resource up front.
    pub fn load(descriptor: &ExperimentDescriptor, base_dir: &Path, mode: PipelineMode, exec: Exec) -> Result<Self> {
        descriptor.validate()?;
        let fwd = resolve(base_dir, &descriptor.fwd_index_dir);
        if !fwd.is_dir() {
            return Err(Error::config(format!("forward index directory {} does not exist", fwd.display())));
        }
        let resources = Resources::load(&fwd)?;
        Self::with_resources(descriptor, base_dir, resources, mode, exec)
    }

    pub fn load_file(path: impl AsRef<Path>, mode: PipelineMode, exec: Exec) -> Result<Self> {
        let path = path.as_ref();
        let mut ds = load_descriptors(path)?;
        if ds.len() != 1 {
            return Err(Error::config(format!(
                "{} must hold exactly one descriptor, found {}",
                path.display(),
                ds.len()
            )));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::load(&ds.remove(0), &base, mode, exec)
    }

    pub fn with_resources(
        descriptor: &ExperimentDescriptor,
        base_dir: &Path,
        resources: Resources,
        mode: PipelineMode,
        exec: Exec,
    ) -> Result<Self> {
        descriptor.validate()?;
        let d = descriptor;
        let provider = {
            let kind = d.cand_prov;
            let (cfg, pbase) = match &d.cand_prov_add_conf_param {
                Some(p) => {
                    let path = resolve(base_dir, p);
                    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                    (read_provider_config(&path, "provider")?, base)
                }
                None => (ExtractorConfig::new("provider"), base_dir.to_path_buf()),
            };
            match kind {
                ProviderKind::InvertedBm25 => {
                    CandidateProvider::Bm25(Bm25Provider::from_config(&cfg, &pbase, &resources)?)
                }
                _ => CandidateProvider::Knn(KnnSearcher::from_config(kind, &cfg, &pbase, &resources)?),
            }
        };
        let extractor = |p: &str| CompositeExtractor::from_file(resolve(base_dir, p), &resources);
        let interm = match (&d.extr_type_interm, &d.model_interm) {
            (Some(e), Some(m)) => {
                let extractor = extractor(e)?;
                let model = load_model(&resolve(base_dir, m), &extractor)?;
                Some(Rerank { extractor, model })
            }
            _ => None,
        };
        let final_extractor = d.extr_type.as_deref().map(extractor).transpose()?;
        let final_model = match (&final_extractor, &d.model_final) {
            (Some(e), Some(m)) => Some(load_model(&resolve(base_dir, m), e)?),
            (Some(_), None) if mode == PipelineMode::Query => {
                return Err(Error::config("extrType is set but modelFinal is missing"));
            }
            _ => None,
        };
        Ok(Pipeline { descriptor: d.clone(), resources, provider, interm, final_extractor, final_model, exec })
    }

    pub fn descriptor(&self) -> &ExperimentDescriptor {
        &self.descriptor
    }

    pub fn resources(&self) -> &Resources {
        &self.resources
    }

    pub fn provider(&self) -> &CandidateProvider {
        &self.provider
    }

    pub fn final_columns(&self) -> Option<Vec<String>> {
        self.final_extractor.as_ref().map(|e| e.columns())
    }

    fn rescore(
        &self,
        ex: &CompositeExtractor,
        model: &LinearModel,
        query: &QueryEntry,
        docs: &[u32],
        exec: Exec,
    ) -> Result<Vec<(u32, f64)>> {
        let fm = ex.extract(query, docs, exec)?;
        let mut scored: Vec<(String, f64, u32)> =
            fm.rows.into_iter().map(|r| (r.docno, model.score(&r.values), r.doc_id)).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(scored.into_iter().map(|(_, s, d)| (d, s)).collect())
    }

    /// Provider candidates and the intermediate re-ranking, with provenance.
    fn first_stages(&self, query: &QueryEntry, exec: Exec) -> Result<(Vec<(u32, f64)>, Vec<StageInfo>)> {
        let hits = self.provider.candidates(query, self.descriptor.cand_qty)?;
        let mut list: Vec<(u32, f64)> = hits.iter().map(|h| (h.id, h.score)).collect();
        let mut stages = vec![StageInfo {
            name: self.provider.name().into(),
            input: self.resources.doc_count(),
            output: list.len(),
        }];
        if let Some(r) = &self.interm {
            let docs: Vec<u32> = list.iter().map(|c| c.0).collect();
            list = self.rescore(&r.extractor, &r.model, query, &docs, exec)?;
            stages.push(StageInfo { name: "intermediate".into(), input: docs.len(), output: list.len() });
        }
        Ok((list, stages))
    }

    fn run_with(&self, query: &QueryEntry, exec: Exec) -> Result<PipelineResult> {
        let (mut list, mut stages) = self.first_stages(query, exec)?;
        if let (Some(ex), Some(model)) = (&self.final_extractor, &self.final_model) {
            let input = list.len();
            let docs: Vec<u32> = list.iter().take(self.descriptor.top_final).map(|c| c.0).collect();
            list = self.rescore(ex, model, query, &docs, exec)?;
            stages.push(StageInfo { name: "final".into(), input, output: list.len() });
        }
        let hits = list.into_iter().map(|(d, s)| (self.resources.docno(d).to_string(), s)).collect();
        Ok(PipelineResult { query_id: query.docno.clone(), hits, stages })
    }

    pub fn run(&self, query: &QueryEntry) -> Result<PipelineResult> {
        self.run_with(query, self.exec)
    }

    /// Runs queries independently; results keep input order.
    pub fn run_batch(&self, queries: &[QueryEntry]) -> Result<Vec<PipelineResult>> {
        map_ordered(self.exec, queries, |q| self.run_with(q, Exec::Sequential)).into_iter().collect()
    }

    /// Scores the given documents with the final model, or the intermediate
    /// one when there is no final stage; best first.
    pub fn score_docnos(&self, query: &QueryEntry, docnos: &[String]) -> Result<Vec<(String, f64)>> {
        let (ex, model) = match (&self.final_extractor, &self.final_model, &self.interm) {
            (Some(e), Some(m), _) => (e, m),
            (_, _, Some(r)) => (&r.extractor, &r.model),
            _ => return Err(Error::invalid("the pipeline has no re-ranking model")),
        };
        let docs = docnos
            .iter()
            .map(|d| self.resources.doc_id(d).ok_or_else(|| Error::invalid(format!("unknown document \"{d}\""))))
            .collect::<Result<Vec<u32>>>()?;
        let scored = self.rescore(ex, model, query, &docs, self.exec)?;
        Ok(scored.into_iter().map(|(d, s)| (self.resources.docno(d).to_string(), s)).collect())
    }

    /// Final-stage features of the documents the final re-ranker would see.
    pub fn final_features(&self, query: &QueryEntry, exec: Exec) -> Result<FeatureMatrix> {
        let ex = self.final_extractor.as_ref().ok_or_else(|| Error::config("descriptor has no extrType"))?;
        let (list, _) = self.first_stages(query, exec)?;
        let docs: Vec<u32> = list.iter().take(self.descriptor.top_final).map(|c| c.0).collect();
        ex.extract(query, &docs, exec)
    }

    pub fn final_features_batch(&self, queries: &[QueryEntry]) -> Result<FeatureMatrix> {
        let parts: Vec<Result<FeatureMatrix>> =
            map_ordered(self.exec, queries, |q| self.final_features(q, Exec::Sequential));
        let mut out = FeatureMatrix::new(self.final_columns().unwrap_or_default());
        for p in parts {
            out.append(p?)?;
        }
        Ok(out)
    }
}

/// Run file contents, keeping at most `k` hits per query.
pub fn to_run(results: &[PipelineResult], run_id: &str, k: Option<usize>) -> RunOutput {
    let queries = results
        .iter()
        .map(|r| {
            let hits = r.hits.iter().take(k.unwrap_or(usize::MAX)).cloned().collect();
            QueryRun { query_id: r.query_id.clone(), hits }
        })
        .collect();
    RunOutput { run_id: run_id.to_string(), queries }
}
