//! Averaged word embeddings.
//!
//! Embedding files are text: a `count dim` header line, then one line per
//! token holding the token and `dim` reals.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use super::{query_text, Extractor, Feature, Params, QueryScorer, Resources};
use crate::bm25;
use crate::error::{Error, Result};
use crate::export::Vectorizable;
use crate::forward::{ForwardIndexField, QueryEntry};
use crate::vectors::{dot_dense, l2_distance, DenseVector, FieldKind, FieldVector};

/// Reported L2 distance when either side has no in-vocabulary token.
pub const MISSING_L2_DISTANCE: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    values: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, tokens: Vec::new(), ids: HashMap::new(), values: Vec::new() }
    }

    pub fn insert(&mut self, token: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding for \"{token}\" has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("embedding for \"{token}\" is not finite")));
        }
        if self.ids.contains_key(token) {
            return Err(Error::invalid(format!("duplicate embedding for \"{token}\"")));
        }
        self.ids.insert(token.to_string(), self.tokens.len() as u32);
        self.tokens.push(token.to_string());
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn vector(&self, id: u32) -> &[f32] {
        let i = id as usize * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.id(token).map(|i| self.vector(i))
    }

    pub fn parse<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::Format(format!("embeddings line {}: {msg}", line + 1));
        let (count, dim) = loop {
            let Some((i, line)) = lines.next() else {
                return Err(Error::Format("embedding file is empty".into()));
            };
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let h: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(i, "bad header"))?;
            match h.as_slice() {
                [c, d] if *d > 0 => break (*c, *d),
                _ => return Err(bad(i, "header must be \"count dim\"")),
            }
        };
        let mut t = EmbeddingTable::new(dim);
        let mut buf = Vec::with_capacity(dim);
        for (i, line) in lines {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            buf.clear();
            for p in parts {
                buf.push(p.parse::<f32>().map_err(|_| bad(i, "bad value"))?);
            }
            t.insert(token, &buf).map_err(|e| bad(i, &e.to_string()))?;
        }
        if t.len() != count {
            return Err(Error::Format(format!("embedding header promises {count} tokens, found {}", t.len())));
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for (i, tok) in self.tokens.iter().enumerate() {
            write!(out, "{tok}")?;
            for v in self.vector(i as u32) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedDistance {
    L2,
    Cosine,
}

/// tf x idf weighted embedding centroid; distance or cosine between sides.
pub struct AvgEmbedExtractor {
    field: Arc<ForwardIndexField>,
    query_field: String,
    query_table: Arc<EmbeddingTable>,
    doc_table: Arc<EmbeddingTable>,
    use_idf: bool,
    use_l2_norm: bool,
    distance: EmbedDistance,
    /// Forward-index term id to document-table row.
    doc_rows: Vec<Option<u32>>,
}

impl AvgEmbedExtractor {
    pub fn new(
        field: Arc<ForwardIndexField>,
        query_field: &str,
        query_table: Arc<EmbeddingTable>,
        doc_table: Arc<EmbeddingTable>,
        use_idf: bool,
        use_l2_norm: bool,
        distance: EmbedDistance,
    ) -> Result<Self> {
        if query_table.dim() != doc_table.dim() {
            return Err(Error::config(format!(
                "avgWordEmbed: query embeddings have dimension {}, document embeddings {}",
                query_table.dim(),
                doc_table.dim()
            )));
        }
        let doc_rows = field.terms().iter().map(|t| doc_table.id(t)).collect();
        Ok(AvgEmbedExtractor {
            field,
            query_field: query_field.to_string(),
            query_table,
            doc_table,
            use_idf,
            use_l2_norm,
            distance,
            doc_rows,
        })
    }

    pub(crate) fn from_params(p: &Params<'_>, res: &Resources) -> Result<Self> {
        let (index, query) = p.fields()?;
        let load = |key: &str| -> Result<Arc<EmbeddingTable>> {
            let path = res.resolve(p.required_str(key)?);
            EmbeddingTable::load(&path)
                .map(Arc::new)
                .map_err(|e| Error::config(format!("avgWordEmbed: cannot load {}: {e}", path.display())))
        };
        let distance = match p.str("distType")?.unwrap_or("l2").to_ascii_lowercase().as_str() {
            "l2" => EmbedDistance::L2,
            "cosine" => EmbedDistance::Cosine,
            other => return Err(Error::config(format!("avgWordEmbed: unknown distType \"{other}\""))),
        };
        Self::new(
            res.field(index)?.clone(),
            query,
            load("queryEmbedFile")?,
            load("docEmbedFile")?,
            p.bool("useIDFWeight", true)?,
            p.bool("useL2Norm", true)?,
            distance,
        )
    }

    pub fn distance(&self) -> EmbedDistance {
        self.distance
    }

    fn normalized(&self) -> bool {
        self.use_l2_norm || self.distance == EmbedDistance::Cosine
    }

    fn weight(&self, term: u32, tf: u32) -> f64 {
        let idf =
            if self.use_idf { bm25::idf(self.field.doc_count(), self.field.doc_freq(term) as usize) } else { 1.0 };
        f64::from(tf) * idf
    }

    fn centroid<'a>(&self, table: &EmbeddingTable, rows: impl Iterator<Item = (u32, f64)>) -> Option<DenseVector> {
        let mut acc = vec![0.0f64; table.dim()];
        let mut any = false;
        for (row, w) in rows {
            any = true;
            for (a, &x) in acc.iter_mut().zip(table.vector(row)) {
                *a += w * f64::from(x);
            }
        }
        if !any {
            return None;
        }
        if self.normalized() {
            let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                acc.iter_mut().for_each(|x| *x /= n);
            }
        }
        Some(DenseVector::new(acc.into_iter().map(|x| x as f32).collect()).expect("finite centroid"))
    }

    /// Query centroid over query tokens present in both the field vocabulary
    /// and the query embeddings; `None` if there are none.
    pub fn query_centroid(&self, query: &QueryEntry) -> Option<DenseVector> {
        let bag = self.field.query_bag(query_text(query, &self.query_field));
        let rows = bag.into_iter().filter_map(|(t, c)| {
            let row = self.query_table.id(self.field.term(t)?)?;
            Some((row, self.weight(t, c)))
        });
        self.centroid(&self.query_table, rows)
    }

    pub fn doc_centroid(&self, doc: u32) -> Option<DenseVector> {
        let rows =
            self.field.doc(doc).bag.iter().filter_map(|&(t, c)| Some((self.doc_rows[t as usize]?, self.weight(t, c))));
        self.centroid(&self.doc_table, rows)
    }

    pub fn compare(&self, q: Option<&DenseVector>, d: Option<&DenseVector>) -> Feature {
        match (q, d, self.distance) {
            (Some(q), Some(d), EmbedDistance::L2) => Feature::new(l2_distance(q, d).expect("same dimension")),
            (Some(q), Some(d), EmbedDistance::Cosine) => {
                Feature::new(dot_dense(q, d).expect("same dimension").clamp(-1.0, 1.0))
            }
            (_, _, EmbedDistance::L2) => Feature { value: MISSING_L2_DISTANCE, flagged: true },
            (_, _, EmbedDistance::Cosine) => Feature { value: 0.0, flagged: true },
        }
    }
}

struct EmbedScorer<'a> {
    ex: &'a AvgEmbedExtractor,
    query: Option<DenseVector>,
}

impl QueryScorer for EmbedScorer<'_> {
    fn score(&self, doc: u32) -> Feature {
        self.ex.compare(self.query.as_ref(), self.ex.doc_centroid(doc).as_ref())
    }
}

impl Extractor for AvgEmbedExtractor {
    fn column(&self) -> String {
        format!("avgWordEmbed({})", self.field.name())
    }

    fn prepare<'a>(&'a self, query: &QueryEntry) -> Box<dyn QueryScorer + 'a> {
        Box::new(EmbedScorer { ex: self, query: self.query_centroid(query) })
    }

    fn vectorizable(&self) -> Option<&dyn Vectorizable> {
        (self.distance == EmbedDistance::Cosine).then_some(self as &dyn Vectorizable)
    }
}

impl Vectorizable for AvgEmbedExtractor {
    fn kind(&self) -> FieldKind {
        FieldKind::Dense
    }

    fn dim(&self) -> usize {
        self.doc_table.dim()
    }

    fn query_vector(&self, query: &QueryEntry) -> (FieldVector, bool) {
        match self.query_centroid(query) {
            Some(v) => (FieldVector::Dense(v), false),
            None => (FieldVector::Dense(DenseVector::zeros(self.dim())), true),
        }
    }

    fn doc_vector(&self, doc: u32) -> (FieldVector, bool) {
        match self.doc_centroid(doc) {
            Some(v) => (FieldVector::Dense(v), false),
            None => (FieldVector::Dense(DenseVector::zeros(self.dim())), true),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_resources;
    use super::*;
    use crate::forward::DocumentEntry;

    fn table(rows: &[(&str, &[f32])]) -> Arc<EmbeddingTable> {
        let mut t = EmbeddingTable::new(rows[0].1.len());
        for (tok, v) in rows {
            t.insert(tok, v).unwrap();
        }
        Arc::new(t)
    }

    fn extractor(res: &Resources, t: &Arc<EmbeddingTable>, idf: bool, l2: bool, d: EmbedDistance) -> AvgEmbedExtractor {
        AvgEmbedExtractor::new(res.field("text").unwrap().clone(), "text", t.clone(), t.clone(), idf, l2, d).unwrap()
    }

    #[test]
    fn file_round_trip_and_errors() {
        let t = table(&[("a", &[1.0, 0.5]), ("b", &[-2.0, 0.25])]);
        let mut out = Vec::new();
        t.write_to(&mut out).unwrap();
        assert_eq!(&*t, &EmbeddingTable::parse(&out[..]).unwrap());
        assert!(EmbeddingTable::parse("2 2\na 1 2\n".as_bytes()).is_err());
        assert!(EmbeddingTable::parse("1 2\na 1\n".as_bytes()).is_err());
        assert!(EmbeddingTable::parse("1 2\na 1 x\n".as_bytes()).is_err());
        assert!(EmbeddingTable::parse("".as_bytes()).is_err());
    }

    #[test]
    fn identical_bags_have_zero_distance() {
        let res = toy_resources(&[("d1", "a b b"), ("d2", "c")]);
        let t = table(&[("a", &[1.0, 0.0, 2.0]), ("b", &[0.0, 3.0, -1.0]), ("c", &[1.0, 1.0, 1.0])]);
        let e = extractor(&res, &t, true, true, EmbedDistance::L2);
        let f = e.prepare(&DocumentEntry::new("q", "b a b")).score(0);
        assert!(f.value.abs() < 1e-6 && !f.flagged, "{f:?}");
    }

    #[test]
    fn orthogonal_tokens_cosine_zero() {
        let res = toy_resources(&[("d1", "a"), ("d2", "b")]);
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let e = extractor(&res, &t, true, false, EmbedDistance::Cosine);
        assert_eq!(e.prepare(&DocumentEntry::new("q", "b")).score(0).value, 0.0);
        assert!((e.prepare(&DocumentEntry::new("q", "b")).score(1).value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_centroids() {
        // N = 2; df(a) = 2, df(b) = 1.
        let res = toy_resources(&[("d1", "a b"), ("d2", "a")]);
        let t = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 2.0])]);
        let e = extractor(&res, &t, true, true, EmbedDistance::L2);
        let idf_a = (1.0f64 + 0.5 / 2.5).ln();
        let idf_b = (1.0f64 + 1.5 / 1.5).ln();
        // d1 centroid before normalization: (idf_a, 2 idf_b); query "a": (1, 0).
        let (x, y) = (idf_a, 2.0 * idf_b);
        let n = (x * x + y * y).sqrt();
        let want = ((x / n - 1.0).powi(2) + (y / n).powi(2)).sqrt();
        let got = e.prepare(&DocumentEntry::new("q", "a")).score(0).value;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn missing_side_is_flagged() {
        let res = toy_resources(&[("d1", "a"), ("d2", "zzz")]);
        let t = table(&[("a", &[1.0, 0.0])]);
        let l2 = extractor(&res, &t, true, true, EmbedDistance::L2);
        let f = l2.prepare(&DocumentEntry::new("q", "a")).score(1);
        assert_eq!(f, Feature { value: MISSING_L2_DISTANCE, flagged: true });
        let cos = extractor(&res, &t, true, true, EmbedDistance::Cosine);
        let f = cos.prepare(&DocumentEntry::new("q", "qqq")).score(0);
        assert_eq!(f, Feature { value: 0.0, flagged: true });
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let res = toy_resources(&[("d1", "a")]);
        let q = table(&[("a", &[1.0])]);
        let d = table(&[("a", &[1.0, 2.0])]);
        let r = AvgEmbedExtractor::new(res.field("text").unwrap().clone(), "text", q, d, true, true, EmbedDistance::L2);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
