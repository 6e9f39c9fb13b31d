//! Multi-field JSONL ingestion and per-field forward indices.
//!
//! A forward index holds everything re-ranking needs for one field: the term
//! dictionary, per-document bags of `(term id, count)`, optionally the
//! ordered term-id sequence, and for raw fields the unmodified text.
//!
//! File layout of `<field>.fwd` (little-endian): magic `HRFW`, u32 version,
//! str field name, u8 kind (0 parsed, 1 raw), u8 positions flag, u64
//! vocabulary size followed by (str token, u32 doc freq) per term id, u64
//! document count followed by per document: str DOCNO, u64 bag size + (u32
//! term id, u32 count) pairs, the u64-counted u32 term sequence when
//! positions are kept, and the raw str for raw fields.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use serde_json::Value;

use crate::codec::{Reader, Writer, MAX_ELEMS};
use crate::error::{Error, Result};

pub const DOCNO: &str = "DOCNO";
pub const TEXT: &str = "text";

/// One JSONL entry: the mandatory DOCNO plus every other field verbatim.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentEntry {
    pub docno: String,
    pub fields: BTreeMap<String, Value>,
}

/// Queries use the same schema as documents.
pub type QueryEntry = DocumentEntry;

impl DocumentEntry {
    pub fn new(docno: impl Into<String>, text: impl Into<String>) -> Self {
        let mut fields = BTreeMap::new();
        fields.insert(TEXT.to_string(), Value::String(text.into()));
        DocumentEntry { docno: docno.into(), fields }
    }

    pub fn with_field(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.fields.insert(name.into(), Value::String(value.into()));
        self
    }

    /// String value of a field; absent fields read as `None`.
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).and_then(Value::as_str)
    }

    pub fn from_json(value: Value, line: usize) -> Result<Self> {
        let Value::Object(map) = value else {
            return Err(Error::Format(format!("line {line}: entry is not a JSON object")));
        };
        let mut fields: BTreeMap<String, Value> = map.into_iter().collect();
        let docno = match fields.remove(DOCNO) {
            Some(Value::String(s)) => s,
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(Error::MissingField { line, field: DOCNO.into() }),
        };
        if !matches!(fields.get(TEXT), Some(Value::String(_))) {
            return Err(Error::MissingField { line, field: TEXT.into() });
        }
        Ok(DocumentEntry { docno, fields })
    }

    pub fn to_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        map.insert(DOCNO.into(), Value::String(self.docno.clone()));
        for (k, v) in &self.fields {
            map.insert(k.clone(), v.clone());
        }
        Value::Object(map)
    }
}

/// Reads one JSON object per line; blank lines are skipped.
pub fn parse_jsonl<R: BufRead>(input: R) -> Result<Vec<DocumentEntry>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|source| Error::Json { line: i + 1, source })?;
        out.push(DocumentEntry::from_json(value, i + 1)?);
    }
    Ok(out)
}

pub fn read_jsonl_file(path: impl AsRef<Path>) -> Result<Vec<DocumentEntry>> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

/// Splits on runs of whitespace. No case folding or stopping.
pub fn tokenize_parsed(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldType {
    Parsed,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldType,
}

impl FieldSpec {
    pub fn parsed(name: impl Into<String>) -> Self {
        FieldSpec { name: name.into(), kind: FieldType::Parsed }
    }

    pub fn raw(name: impl Into<String>) -> Self {
        FieldSpec { name: name.into(), kind: FieldType::Raw }
    }
}

/// `name` or `name:parsed` or `name:raw`.
impl FromStr for FieldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, kind) = match s.split_once(':') {
            None => (s, FieldType::Parsed),
            Some((n, "parsed")) => (n, FieldType::Parsed),
            Some((n, "raw")) => (n, FieldType::Raw),
            Some((_, k)) => return Err(Error::invalid(format!("unknown field kind \"{k}\""))),
        };
        if name.is_empty() {
            return Err(Error::invalid("empty field name"));
        }
        Ok(FieldSpec { name: name.to_string(), kind })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardDoc {
    /// `(term id, count)` sorted by term id.
    pub bag: Vec<(u32, u32)>,
    pub sequence: Option<Vec<u32>>,
    pub raw: Option<String>,
}

impl ForwardDoc {
    pub fn len(&self) -> u64 {
        self.bag.iter().map(|&(_, c)| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bag.is_empty()
    }

    pub fn tf(&self, term: u32) -> u32 {
        self.bag.binary_search_by_key(&term, |p| p.0).map_or(0, |i| self.bag[i].1)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardIndexField {
    name: String,
    kind: FieldType,
    positions: bool,
    terms: Vec<String>,
    term_ids: HashMap<String, u32>,
    doc_freq: Vec<u32>,
    docnos: Vec<String>,
    docs: Vec<ForwardDoc>,
    total_tokens: u64,
    docno_ids: OnceLock<HashMap<String, u32>>,
    term_docs: OnceLock<Vec<Vec<u32>>>,
}

impl PartialEq for ForwardIndexField {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name
            && self.kind == o.kind
            && self.positions == o.positions
            && self.terms == o.terms
            && self.doc_freq == o.doc_freq
            && self.docnos == o.docnos
            && self.docs == o.docs
    }
}

struct FieldBuilder {
    field: ForwardIndexField,
}

impl FieldBuilder {
    fn new(spec: &FieldSpec, positions: bool) -> Self {
        FieldBuilder {
            field: ForwardIndexField {
                name: spec.name.clone(),
                kind: spec.kind,
                positions: positions && spec.kind == FieldType::Parsed,
                terms: Vec::new(),
                term_ids: HashMap::new(),
                doc_freq: Vec::new(),
                docnos: Vec::new(),
                docs: Vec::new(),
                total_tokens: 0,
                docno_ids: OnceLock::new(),
                term_docs: OnceLock::new(),
            },
        }
    }

    fn intern(&mut self, token: &str) -> u32 {
        let f = &mut self.field;
        if let Some(&id) = f.term_ids.get(token) {
            return id;
        }
        let id = f.terms.len() as u32;
        f.terms.push(token.to_string());
        f.term_ids.insert(token.to_string(), id);
        f.doc_freq.push(0);
        id
    }

    fn add(&mut self, docno: &str, text: &str) {
        let doc = match self.field.kind {
            FieldType::Raw => ForwardDoc { raw: Some(text.to_string()), ..Default::default() },
            FieldType::Parsed => {
                let seq: Vec<u32> = tokenize_parsed(text).into_iter().map(|t| self.intern(t)).collect();
                let bag = bag_of(&seq);
                for &(t, _) in &bag {
                    self.field.doc_freq[t as usize] += 1;
                }
                self.field.total_tokens += seq.len() as u64;
                ForwardDoc { bag, sequence: self.field.positions.then_some(seq), raw: None }
            }
        };
        self.field.docnos.push(docno.to_string());
        self.field.docs.push(doc);
    }
}

pub(crate) fn bag_of(seq: &[u32]) -> Vec<(u32, u32)> {
    let mut sorted = seq.to_vec();
    sorted.sort_unstable();
    let mut bag: Vec<(u32, u32)> = Vec::new();
    for t in sorted {
        match bag.last_mut() {
            Some(last) if last.0 == t => last.1 += 1,
            _ => bag.push((t, 1)),
        }
    }
    bag
}

/// Builds one forward index per field spec. Term ids are assigned in order
/// of first occurrence; a field missing from an entry indexes as empty.
pub fn build_forward(
    entries: &[DocumentEntry],
    specs: &[FieldSpec],
    keep_positions: bool,
) -> Result<BTreeMap<String, ForwardIndexField>> {
    let mut seen = std::collections::HashSet::new();
    for e in entries {
        if !seen.insert(e.docno.as_str()) {
            return Err(Error::DuplicateDocno(e.docno.clone()));
        }
    }
    let mut out = BTreeMap::new();
    for spec in specs {
        if out.contains_key(&spec.name) {
            return Err(Error::invalid(format!("field \"{}\" specified twice", spec.name)));
        }
        let mut b = FieldBuilder::new(spec, keep_positions);
        for e in entries {
            let text = match e.fields.get(&spec.name) {
                None | Some(Value::Null) => "",
                Some(Value::String(s)) => s.as_str(),
                Some(_) => {
                    return Err(Error::invalid(format!(
                        "field \"{}\" of document \"{}\" is not a string",
                        spec.name, e.docno
                    )))
                }
            };
            b.add(&e.docno, text);
        }
        out.insert(spec.name.clone(), b.field);
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"HRFW";
const VERSION: u32 = 1;

impl ForwardIndexField {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> FieldType {
        self.kind
    }

    pub fn has_positions(&self) -> bool {
        self.positions
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.terms.len()
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn avg_doc_length(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_tokens as f64 / self.docs.len() as f64
        }
    }

    pub fn term_id(&self, token: &str) -> Option<u32> {
        self.term_ids.get(token).copied()
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn doc_freq(&self, term: u32) -> u32 {
        self.doc_freq.get(term as usize).copied().unwrap_or(0)
    }

    pub fn docno(&self, doc: u32) -> &str {
        &self.docnos[doc as usize]
    }

    pub fn docnos(&self) -> &[String] {
        &self.docnos
    }

    pub fn doc_id(&self, docno: &str) -> Option<u32> {
        self.docno_ids
            .get_or_init(|| self.docnos.iter().enumerate().map(|(i, d)| (d.clone(), i as u32)).collect())
            .get(docno)
            .copied()
    }

    pub fn doc(&self, doc: u32) -> &ForwardDoc {
        &self.docs[doc as usize]
    }

    pub fn docs(&self) -> &[ForwardDoc] {
        &self.docs
    }

    /// Documents containing `term`, ascending. Built on first use.
    pub fn docs_with_term(&self, term: u32) -> &[u32] {
        let lists = self.term_docs.get_or_init(|| {
            let mut lists = vec![Vec::new(); self.terms.len()];
            for (d, doc) in self.docs.iter().enumerate() {
                for &(t, _) in &doc.bag {
                    lists[t as usize].push(d as u32);
                }
            }
            lists
        });
        lists.get(term as usize).map_or(&[], Vec::as_slice)
    }

    /// In-vocabulary query terms as a bag sorted by term id.
    pub fn query_bag(&self, text: &str) -> Vec<(u32, u32)> {
        bag_of(&self.query_terms(text))
    }

    /// In-vocabulary query terms in text order.
    pub fn query_terms(&self, text: &str) -> Vec<u32> {
        tokenize_parsed(text).into_iter().filter_map(|t| self.term_id(t)).collect()
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.header(MAGIC, VERSION)?;
        w.str(&self.name)?;
        w.u8(match self.kind {
            FieldType::Parsed => 0,
            FieldType::Raw => 1,
        })?;
        w.u8(u8::from(self.positions))?;
        w.len(self.terms.len())?;
        for (t, df) in self.terms.iter().zip(&self.doc_freq) {
            w.str(t)?;
            w.u32(*df)?;
        }
        w.len(self.docs.len())?;
        for (docno, doc) in self.docnos.iter().zip(&self.docs) {
            w.str(docno)?;
            w.len(doc.bag.len())?;
            for &(t, c) in &doc.bag {
                w.u32(t)?;
                w.u32(c)?;
            }
            if self.positions {
                w.u32s(doc.sequence.as_deref().unwrap_or(&[]))?;
            }
            if self.kind == FieldType::Raw {
                w.str(doc.raw.as_deref().unwrap_or(""))?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.header(MAGIC, VERSION)?;
        let name = r.str()?;
        let kind = match r.u8()? {
            0 => FieldType::Parsed,
            1 => FieldType::Raw,
            k => return Err(Error::Format(format!("unknown field kind {k}"))),
        };
        let positions = match r.u8()? {
            0 => false,
            1 => true,
            p => return Err(Error::Format(format!("bad positions flag {p}"))),
        };
        let n_terms = r.len(MAX_ELEMS)?;
        let mut b = FieldBuilder::new(&FieldSpec { name, kind }, positions);
        let mut stored_df = Vec::with_capacity(n_terms.min(1 << 24));
        for _ in 0..n_terms {
            let token = r.str()?;
            if b.field.term_ids.contains_key(&token) {
                return Err(Error::Format(format!("duplicate token \"{token}\"")));
            }
            b.intern(&token);
            stored_df.push(r.u32()?);
        }
        let n_docs = r.len(u32::MAX as usize)?;
        let corrupt = |what: &str| Error::Format(format!("corrupt forward index: {what}"));
        for _ in 0..n_docs {
            let docno = r.str()?;
            let n = r.len(MAX_ELEMS)?;
            let mut bag = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                bag.push((r.u32()?, r.u32()?));
            }
            if bag.windows(2).any(|w| w[0].0 >= w[1].0) || bag.iter().any(|&(t, c)| t as usize >= n_terms || c == 0) {
                return Err(corrupt("bag out of order or out of range"));
            }
            let sequence = if positions {
                let seq = r.u32s()?;
                if bag_of(&seq) != bag {
                    return Err(corrupt("sequence disagrees with bag"));
                }
                Some(seq)
            } else {
                None
            };
            let raw = if kind == FieldType::Raw { Some(r.str()?) } else { None };
            for &(t, _) in &bag {
                b.field.doc_freq[t as usize] += 1;
            }
            let doc = ForwardDoc { bag, sequence, raw };
            b.field.total_tokens += doc.len();
            b.field.docnos.push(docno);
            b.field.docs.push(doc);
        }
        r.expect_end()?;
        if stored_df != b.field.doc_freq {
            return Err(corrupt("document frequencies disagree with bags"));
        }
        Ok(b.field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn forward_file_name(dir: impl AsRef<Path>, field: &str) -> PathBuf {
    dir.as_ref().join(format!("{field}.fwd"))
}

/// Writes `<dir>/<field>.fwd` for every field.
pub fn save_forward(dir: impl AsRef<Path>, fields: &BTreeMap<String, ForwardIndexField>) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    for (name, f) in fields {
        f.save(forward_file_name(&dir, name))?;
    }
    Ok(())
}

pub fn load_forward(path: impl AsRef<Path>) -> Result<ForwardIndexField> {
    ForwardIndexField::load(path)
}

/// Loads every `*.fwd` file in `dir`, keyed by field name.
pub fn load_forward_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<String, ForwardIndexField>> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fwd"))
        .collect();
    paths.sort();
    for p in paths {
        let f = ForwardIndexField::load(&p)?;
        out.insert(f.name().to_string(), f);
    }
    Ok(out)
}
