use std::sync::Arc;

use super::{query_text, Extractor, Feature, Params, QueryScorer, Resources};
use crate::bm25::{self, Bm25Params};
use crate::error::{Error, Result};
use crate::export::Vectorizable;
use crate::forward::{tokenize_parsed, ForwardIndexField, QueryEntry};
use crate::model1::Model1Table;
use crate::vectors::{FieldKind, FieldVector, SparseVector};

/// BM25 over a parsed field; scores match `InvertedIndex::bm25_score` bit for bit.
pub struct Bm25Extractor {
    field: Arc<ForwardIndexField>,
    query_field: String,
    params: Bm25Params,
}

impl Bm25Extractor {
    pub fn new(field: Arc<ForwardIndexField>, query_field: &str, params: Bm25Params) -> Result<Self> {
        params.validate().map_err(|e| Error::config(e.to_string()))?;
        Ok(Bm25Extractor { field, query_field: query_field.to_string(), params })
    }

    pub(crate) fn from_params(p: &Params<'_>, res: &Resources) -> Result<Self> {
        let (index, query) = p.fields()?;
        let d = Bm25Params::default();
        let params = Bm25Params { k1: p.f64("k1", d.k1)?, b: p.f64("b", d.b)? };
        Self::new(res.field(index)?.clone(), query, params)
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn field(&self) -> &ForwardIndexField {
        &self.field
    }

    /// In-vocabulary query bag, sorted by term id.
    pub fn query_bag(&self, query: &QueryEntry) -> Vec<(u32, u32)> {
        self.field.query_bag(query_text(query, &self.query_field))
    }

    fn idf(&self, term: u32) -> f64 {
        bm25::idf(self.field.doc_count(), self.field.doc_freq(term) as usize)
    }

    fn tf_norm(&self, doc: u32, term: u32) -> f64 {
        let d = self.field.doc(doc);
        self.params.tf_norm(f64::from(d.tf(term)), d.len() as f64, self.field.avg_doc_length())
    }

    pub fn score(&self, bag: &[(u32, u32)], doc: u32) -> f64 {
        let mut s = 0.0;
        let d = self.field.doc(doc);
        for &(t, qtf) in bag {
            if d.tf(t) > 0 {
                s += f64::from(qtf) * self.idf(t) * self.tf_norm(doc, t);
            }
        }
        s
    }
}

struct Bm25Scorer<'a> {
    ex: &'a Bm25Extractor,
    bag: Vec<(u32, u32)>,
}

impl QueryScorer for Bm25Scorer<'_> {
    fn score(&self, doc: u32) -> Feature {
        Feature::new(self.ex.score(&self.bag, doc))
    }
}

impl Extractor for Bm25Extractor {
    fn column(&self) -> String {
        format!("bm25({})", self.field.name())
    }

    fn prepare<'a>(&'a self, query: &QueryEntry) -> Box<dyn QueryScorer + 'a> {
        Box::new(Bm25Scorer { ex: self, bag: self.query_bag(query) })
    }

    fn vectorizable(&self) -> Option<&dyn Vectorizable> {
        Some(self)
    }
}

impl Vectorizable for Bm25Extractor {
    fn kind(&self) -> FieldKind {
        FieldKind::Sparse
    }

    fn dim(&self) -> usize {
        self.field.vocab_size()
    }

    /// Component `qtf * idf` per query term.
    fn query_vector(&self, query: &QueryEntry) -> (FieldVector, bool) {
        let pairs = self.query_bag(query).into_iter().map(|(t, qtf)| (t, (f64::from(qtf) * self.idf(t)) as f32));
        (FieldVector::Sparse(SparseVector::from_pairs(pairs).expect("finite")), false)
    }

    /// Component: saturated, length-normalized tf per document term.
    fn doc_vector(&self, doc: u32) -> (FieldVector, bool) {
        let pairs = self.field.doc(doc).bag.iter().map(|&(t, _)| (t, self.tf_norm(doc, t) as f32));
        (FieldVector::Sparse(SparseVector::from_pairs(pairs).expect("finite")), false)
    }
}

/// Translation-model alignment log-probability of query given document.
pub struct Model1Extractor {
    field: Arc<ForwardIndexField>,
    query_field: String,
    table: Arc<Model1Table>,
    source_of_term: Vec<Option<u32>>,
}

impl Model1Extractor {
    pub fn new(field: Arc<ForwardIndexField>, query_field: &str, table: Arc<Model1Table>) -> Self {
        let source_of_term = table.source_mapping(&field);
        Model1Extractor { field, query_field: query_field.to_string(), table, source_of_term }
    }

    pub(crate) fn from_params(p: &Params<'_>, res: &Resources) -> Result<Self> {
        let (index, query) = p.fields()?;
        let path = res.resolve(p.required_str("modelFile")?);
        let mut table = Model1Table::load(&path)
            .map_err(|e| Error::config(format!("model1: cannot load {}: {e}", path.display())))?;
        if p.map.contains_key("lambda") {
            let lambda = p.f64("lambda", table.lambda())?;
            table = table.with_lambda(lambda).map_err(|e| Error::config(e.to_string()))?;
        }
        Ok(Self::new(res.field(index)?.clone(), query, Arc::new(table)))
    }

    pub fn table(&self) -> &Model1Table {
        &self.table
    }

    pub fn score(&self, query: &[Option<u32>], doc: u32) -> f64 {
        let d = self.field.doc(doc);
        let bag: Vec<(Option<u32>, u32)> = d.bag.iter().map(|&(t, c)| (self.source_of_term[t as usize], c)).collect();
        self.table.score_ids(query, &bag, d.len())
    }
}

struct Model1Scorer<'a> {
    ex: &'a Model1Extractor,
    query: Vec<Option<u32>>,
}

impl QueryScorer for Model1Scorer<'_> {
    fn score(&self, doc: u32) -> Feature {
        Feature::new(self.ex.score(&self.query, doc))
    }
}

impl Extractor for Model1Extractor {
    fn column(&self) -> String {
        format!("model1({})", self.field.name())
    }

    fn prepare<'a>(&'a self, query: &QueryEntry) -> Box<dyn QueryScorer + 'a> {
        let query = tokenize_parsed(query_text(query, &self.query_field))
            .into_iter()
            .map(|t| self.table.target_id(t))
            .collect();
        Box::new(Model1Scorer { ex: self, query })
    }
}
