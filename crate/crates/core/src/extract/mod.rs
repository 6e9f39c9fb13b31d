//! Feature extractors over forward indices.
//!
//! A scoring configuration is a JSON list of `{"type": ..., "params": {...}}`
//! objects, either bare or wrapped as `{"extractors": [...]}`. Each entry
//! yields one extractor and one feature column, in configuration order.
//! Parameter values may be JSON numbers/booleans or their string spellings.

mod embed;
mod lexical;
mod proximity;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Exec};
use crate::export::Vectorizable;
use crate::forward::{load_forward_dir, ForwardIndexField, QueryEntry};

pub use embed::{AvgEmbedExtractor, EmbedDistance, EmbeddingTable, MISSING_L2_DISTANCE};
pub use lexical::{Bm25Extractor, Model1Extractor};
pub use proximity::{ProximityExtractor, DEFAULT_WINDOW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl ExtractorConfig {
    pub fn new(kind: impl Into<String>) -> Self {
        ExtractorConfig { kind: kind.into(), params: Map::new() }
    }

    pub fn param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    Wrapped { extractors: Vec<ExtractorConfig> },
    Bare(Vec<ExtractorConfig>),
}

pub fn parse_extractor_configs(text: &str) -> Result<Vec<ExtractorConfig>> {
    let parsed: ConfigFile =
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad extractor configuration: {e}")))?;
    Ok(match parsed {
        ConfigFile::Wrapped { extractors } => extractors,
        ConfigFile::Bare(v) => v,
    })
}

pub fn load_extractor_configs(path: impl AsRef<Path>) -> Result<Vec<ExtractorConfig>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_extractor_configs(&text)
}

/// Typed access to an extractor's `params` map.
pub(crate) struct Params<'a> {
    kind: &'a str,
    map: &'a Map<String, Value>,
}

impl<'a> Params<'a> {
    pub(crate) fn new(cfg: &'a ExtractorConfig) -> Self {
        Params { kind: &cfg.kind, map: &cfg.params }
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        Error::config(format!("{}: parameter \"{key}\" {what}", self.kind))
    }

    pub(crate) fn str(&self, key: &str) -> Result<Option<&'a str>> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.bad(key, "must be a string")),
        }
    }

    pub(crate) fn required_str(&self, key: &str) -> Result<&'a str> {
        self.str(key)?.ok_or_else(|| self.bad(key, "is required"))
    }

    pub(crate) fn f64(&self, key: &str, default: f64) -> Result<f64> {
        let v = match self.map.get(key) {
            None | Some(Value::Null) => return Ok(default),
            Some(Value::Number(n)) => n.as_f64(),
            Some(Value::String(s)) => s.trim().parse().ok(),
            Some(_) => None,
        };
        v.filter(|x: &f64| x.is_finite()).ok_or_else(|| self.bad(key, "must be a finite number"))
    }

    pub(crate) fn usize(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.f64(key, default as f64)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(self.bad(key, "must be a nonnegative integer"));
        }
        Ok(v as usize)
    }

    pub(crate) fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None | Some(Value::Null) => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(Value::Number(n)) if n.as_f64() == Some(0.0) => Ok(false),
            Some(Value::Number(n)) if n.as_f64() == Some(1.0) => Ok(true),
            Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(self.bad(key, "must be a boolean")),
            },
            Some(_) => Err(self.bad(key, "must be a boolean")),
        }
    }

    /// `(indexFieldName, queryFieldName)`; the query field defaults to the index field.
    pub(crate) fn fields(&self) -> Result<(&'a str, &'a str)> {
        let index = self.required_str("indexFieldName")?;
        Ok((index, self.str("queryFieldName")?.unwrap_or(index)))
    }
}

/// Forward indices shared by extractors, plus the directory relative
/// resource paths (models, embeddings) are resolved against.
#[derive(Clone, Debug)]
pub struct Resources {
    fields: BTreeMap<String, Arc<ForwardIndexField>>,
    base_dir: PathBuf,
}

impl Resources {
    /// All fields must index the same documents in the same order.
    pub fn new(fields: BTreeMap<String, ForwardIndexField>) -> Result<Self> {
        let mut first: Option<&ForwardIndexField> = None;
        for f in fields.values() {
            match first {
                None => first = Some(f),
                Some(a) if a.docnos() != f.docnos() => {
                    return Err(Error::config(format!(
                        "forward indices \"{}\" and \"{}\" cover different documents",
                        a.name(),
                        f.name()
                    )))
                }
                _ => {}
            }
        }
        Ok(Resources {
            fields: fields.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            base_dir: PathBuf::from("."),
        })
    }

    pub fn load(forward_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = forward_dir.as_ref();
        let fields = load_forward_dir(dir)?;
        if fields.is_empty() {
            return Err(Error::config(format!("no forward indices in {}", dir.display())));
        }
        Self::new(fields)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn field(&self, name: &str) -> Result<&Arc<ForwardIndexField>> {
        self.fields.get(name).ok_or_else(|| Error::config(format!("no forward index for field \"{name}\"")))
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    fn any(&self) -> Option<&ForwardIndexField> {
        self.fields.values().next().map(|f| f.as_ref())
    }

    pub fn doc_count(&self) -> usize {
        self.any().map_or(0, |f| f.doc_count())
    }

    pub fn docno(&self, doc: u32) -> &str {
        self.any().expect("resources hold no fields").docno(doc)
    }

    pub fn doc_id(&self, docno: &str) -> Option<u32> {
        self.any().and_then(|f| f.doc_id(docno))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feature {
    pub value: f64,
    /// Set when the value is a fallback (e.g. no in-vocabulary token).
    pub flagged: bool,
}

impl Feature {
    pub fn new(value: f64) -> Self {
        Feature { value, flagged: false }
    }
}

/// Per-query state; scores documents of the extractor's field.
pub trait QueryScorer: Send + Sync {
    fn score(&self, doc: u32) -> Feature;
}

pub trait Extractor: Send + Sync {
    /// Column name, e.g. `bm25(text)`.
    fn column(&self) -> String;

    fn prepare<'a>(&'a self, query: &QueryEntry) -> Box<dyn QueryScorer + 'a>;

    fn vectorizable(&self) -> Option<&dyn Vectorizable> {
        None
    }
}

pub(crate) fn query_text<'a>(query: &'a QueryEntry, field: &str) -> &'a str {
    query.field(field).unwrap_or("")
}

/// Builds one extractor from its configuration.
pub fn create_extractor(cfg: &ExtractorConfig, res: &Resources) -> Result<Box<dyn Extractor>> {
    let p = Params::new(cfg);
    Ok(match cfg.kind.as_str() {
        "bm25" => Box::new(Bm25Extractor::from_params(&p, res)?),
        "TFIDFSimilarity" => {
            let simil = p.str("similType")?.unwrap_or("bm25");
            if !simil.eq_ignore_ascii_case("bm25") {
                return Err(Error::config(format!("TFIDFSimilarity: unsupported similType \"{simil}\"")));
            }
            Box::new(Bm25Extractor::from_params(&p, res)?)
        }
        "proximity" => Box::new(ProximityExtractor::from_params(&p, res)?),
        "model1" => Box::new(Model1Extractor::from_params(&p, res)?),
        "avgWordEmbed" => Box::new(AvgEmbedExtractor::from_params(&p, res)?),
        other => return Err(Error::config(format!("unknown extractor type \"{other}\""))),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub query_id: String,
    pub doc_id: u32,
    pub docno: String,
    pub values: Vec<f64>,
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

impl FeatureMatrix {
    pub fn new(columns: Vec<String>) -> Self {
        FeatureMatrix { columns, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn append(&mut self, other: FeatureMatrix) -> Result<()> {
        if other.columns != self.columns {
            return Err(Error::invalid("feature matrices have different columns"));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    /// Row indices per query, queries in first-appearance order.
    pub fn group_by_query(&self) -> Vec<(&str, Vec<usize>)> {
        let mut order: Vec<(&str, Vec<usize>)> = Vec::new();
        let mut pos: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let slot = *pos.entry(r.query_id.as_str()).or_insert_with(|| {
                order.push((r.query_id.as_str(), Vec::new()));
                order.len() - 1
            });
            order[slot].1.push(i);
        }
        order
    }
}

/// Runs every configured extractor; one column per extractor.
pub struct CompositeExtractor {
    extractors: Vec<Box<dyn Extractor>>,
    resources: Resources,
}

impl CompositeExtractor {
    pub fn new(configs: &[ExtractorConfig], resources: &Resources) -> Result<Self> {
        let extractors = configs.iter().map(|c| create_extractor(c, resources)).collect::<Result<_>>()?;
        Ok(CompositeExtractor { extractors, resources: resources.clone() })
    }

    /// Loads a configuration file; relative resource paths resolve against its directory.
    pub fn from_file(path: impl AsRef<Path>, resources: &Resources) -> Result<Self> {
        let path = path.as_ref();
        let configs = load_extractor_configs(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(&configs, &resources.clone().with_base_dir(base))
    }

    pub fn columns(&self) -> Vec<String> {
        self.extractors.iter().map(|e| e.column()).collect()
    }

    pub fn extractors(&self) -> &[Box<dyn Extractor>] {
        &self.extractors
    }

    pub fn resources(&self) -> &Resources {
        &self.resources
    }

    /// Feature rows for `candidates` (document ids), in candidate order.
    pub fn extract(&self, query: &QueryEntry, candidates: &[u32], exec: Exec) -> Result<FeatureMatrix> {
        let n = self.resources.doc_count();
        if let Some(&bad) = candidates.iter().find(|&&d| d as usize >= n) {
            return Err(Error::invalid(format!("candidate document id {bad} out of range")));
        }
        let scorers: Vec<Box<dyn QueryScorer + '_>> = self.extractors.iter().map(|e| e.prepare(query)).collect();
        let rows = map_ordered(exec, candidates, |&doc| {
            let feats: Vec<Feature> = scorers.iter().map(|s| s.score(doc)).collect();
            FeatureRow {
                query_id: query.docno.clone(),
                doc_id: doc,
                docno: self.resources.docno(doc).to_string(),
                values: feats.iter().map(|f| f.value).collect(),
                flagged: feats.iter().any(|f| f.flagged),
            }
        });
        Ok(FeatureMatrix { columns: self.columns(), rows })
    }
}
