//! Query and document vector representations and the space abstraction.
//!
//! Values are stored as `f32`; every inner product, norm and distance is
//! accumulated in `f64`. A [`Space`] pairs a vector kind with a distance or
//! similarity and is the only thing the search indices know about their data.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer, MAX_ELEMS};
use crate::error::{Error, Result};

/// Fixed-length dense vector with finite entries.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DenseVector(Vec<f32>);

impl DenseVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("dense entry {i} is not finite")));
        }
        Ok(DenseVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> DenseVector {
        DenseVector(self.0.iter().map(|&v| (f64::from(v) * factor) as f32).collect())
    }
}

impl TryFrom<Vec<f32>> for DenseVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        DenseVector::new(values)
    }
}

/// Sparse vector: strictly increasing term ids, nonzero finite values.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SparseVector {
    ids: Vec<u32>,
    values: Vec<f32>,
}

impl SparseVector {
    pub fn new(ids: Vec<u32>, values: Vec<f32>) -> Result<Self> {
        if ids.len() != values.len() {
            return Err(Error::invalid(format!("sparse vector has {} ids but {} values", ids.len(), values.len())));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sparse term ids must be strictly increasing"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v == 0.0) {
            return Err(Error::invalid(format!("sparse value at position {i} is zero or not finite")));
        }
        Ok(SparseVector { ids, values })
    }

    /// Builds from unordered pairs: sorts, sums duplicate ids and drops zeros.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, f32)>) -> Result<Self> {
        let mut pairs: Vec<(u32, f32)> = pairs.into_iter().collect();
        pairs.sort_by_key(|p| p.0);
        let mut ids = Vec::with_capacity(pairs.len());
        let mut values: Vec<f32> = Vec::with_capacity(pairs.len());
        for (id, v) in pairs {
            if ids.last() == Some(&id) {
                *values.last_mut().unwrap() += v;
            } else {
                ids.push(id);
                values.push(v);
            }
        }
        let (ids, values) = ids.into_iter().zip(values).filter(|(_, v)| *v != 0.0).unzip();
        SparseVector::new(ids, values)
    }

    pub fn empty() -> Self {
        SparseVector::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.ids.iter().copied().zip(self.values.iter().copied())
    }

    pub fn get(&self, id: u32) -> Option<f32> {
        self.ids.binary_search(&id).ok().map(|i| self.values[i])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }

    /// Scales every value; entries that underflow to zero are dropped.
    pub fn scaled(&self, factor: f64) -> SparseVector {
        let (ids, values) =
            self.iter().map(|(i, v)| (i, (f64::from(v) * factor) as f32)).filter(|(_, v)| *v != 0.0).unzip();
        SparseVector { ids, values }
    }

    /// Shifts every term id by `offset`.
    pub fn offset(&self, offset: u32) -> Result<SparseVector> {
        let ids = self
            .ids
            .iter()
            .map(|&i| i.checked_add(offset).ok_or_else(|| Error::invalid("term id overflow")))
            .collect::<Result<_>>()?;
        Ok(SparseVector { ids, values: self.values.clone() })
    }
}

/// One field of a composite vector.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldVector {
    Dense(DenseVector),
    Sparse(SparseVector),
}

impl FieldVector {
    pub fn kind(&self) -> FieldKind {
        match self {
            FieldVector::Dense(_) => FieldKind::Dense,
            FieldVector::Sparse(_) => FieldKind::Sparse,
        }
    }

    pub fn inner_product(&self, other: &FieldVector) -> Result<f64> {
        match (self, other) {
            (FieldVector::Dense(a), FieldVector::Dense(b)) => dot_dense(a, b),
            (FieldVector::Sparse(a), FieldVector::Sparse(b)) => Ok(dot_sparse(a, b)),
            _ => Err(Error::invalid("field vector kinds differ")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeField {
    pub name: String,
    pub vector: FieldVector,
    pub weight: f64,
}

/// Ordered per-field vectors with per-field weights.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CompositeVector {
    fields: Vec<CompositeField>,
}

impl CompositeVector {
    pub fn new(fields: Vec<CompositeField>) -> Result<Self> {
        for (i, f) in fields.iter().enumerate() {
            if !f.weight.is_finite() {
                return Err(Error::invalid(format!("weight of field \"{}\" is not finite", f.name)));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::invalid(format!("duplicate field name \"{}\"", f.name)));
            }
        }
        Ok(CompositeVector { fields })
    }

    pub fn fields(&self) -> &[CompositeField] {
        &self.fields
    }

    /// Replaces the weights in field order.
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.fields.len() {
            return Err(Error::invalid(format!("{} weights for {} fields", weights.len(), self.fields.len())));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("weights must be finite"));
        }
        for (f, &w) in self.fields.iter_mut().zip(weights) {
            f.weight = w;
        }
        Ok(())
    }

    pub fn same_schema(&self, other: &CompositeVector) -> bool {
        self.fields.len() == other.fields.len()
            && self
                .fields
                .iter()
                .zip(&other.fields)
                .all(|(a, b)| a.name == b.name && a.vector.kind() == b.vector.kind())
    }
}

/// Any vector an index can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Vector {
    Dense(DenseVector),
    Sparse(SparseVector),
    Composite(CompositeVector),
}

impl From<DenseVector> for Vector {
    fn from(v: DenseVector) -> Self {
        Vector::Dense(v)
    }
}

impl From<SparseVector> for Vector {
    fn from(v: SparseVector) -> Self {
        Vector::Sparse(v)
    }
}

impl From<CompositeVector> for Vector {
    fn from(v: CompositeVector) -> Self {
        Vector::Composite(v)
    }
}

fn check_dims(a: &DenseVector, b: &DenseVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn dot_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub fn dot_dense(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(dot_slices(&a.0, &b.0))
}

/// Inner product over shared term ids, by ordered merge.
pub fn dot_sparse(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j) = (0, 0);
    let mut sum = 0.0;
    while i < a.ids.len() && j < b.ids.len() {
        match a.ids[i].cmp(&b.ids[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum += f64::from(a.values[i]) * f64::from(b.values[j]);
                i += 1;
                j += 1;
            }
        }
    }
    sum
}

pub fn l2_distance(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(l2_slices(&a.0, &b.0))
}

fn l2_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_similarity(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(cosine_slices(&a.0, &b.0))
}

fn cosine_slices(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(na * na) == na exactly, so a vector against itself scores exactly 1.
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

pub fn normalize_l2(a: &DenseVector) -> DenseVector {
    let n = a.norm();
    if n > 0.0 {
        a.scaled(1.0 / n)
    } else {
        a.clone()
    }
}

/// Weighted sum of per-field inner products; weights come from `q`.
pub fn composite_score(q: &CompositeVector, d: &CompositeVector) -> Result<f64> {
    if !q.same_schema(d) {
        return Err(Error::invalid("composite field schemas differ"));
    }
    let mut sum = 0.0;
    for (qf, df) in q.fields.iter().zip(&d.fields) {
        if qf.weight != 0.0 {
            sum += qf.weight * qf.vector.inner_product(&df.vector)?;
        }
    }
    Ok(sum)
}

/// Whether lower or higher scores are better.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Distance,
    Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceKind {
    L2Dense,
    CosineDense,
    InnerProductDense,
    InnerProductSparse,
    CompositeInnerProduct,
}

impl SpaceKind {
    pub fn orientation(self) -> Orientation {
        match self {
            SpaceKind::L2Dense => Orientation::Distance,
            _ => Orientation::Similarity,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SpaceKind::L2Dense => 0,
            SpaceKind::CosineDense => 1,
            SpaceKind::InnerProductDense => 2,
            SpaceKind::InnerProductSparse => 3,
            SpaceKind::CompositeInnerProduct => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => SpaceKind::L2Dense,
            1 => SpaceKind::CosineDense,
            2 => SpaceKind::InnerProductDense,
            3 => SpaceKind::InnerProductSparse,
            4 => SpaceKind::CompositeInnerProduct,
            _ => return Err(Error::Format(format!("unknown space kind code {code}"))),
        })
    }
}

/// A vector kind together with its distance or similarity.
///
/// Indices only ever call [`Space::distance`], which is lower-is-better for
/// every kind: similarities are negated. No metric property is assumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Space {
    kind: SpaceKind,
}

impl Space {
    pub fn new(kind: SpaceKind) -> Self {
        Space { kind }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn orientation(&self) -> Orientation {
        self.kind.orientation()
    }

    /// Checks that `v` is the vector type this space accepts.
    pub fn accepts(&self, v: &Vector) -> Result<()> {
        let ok = matches!(
            (self.kind, v),
            (SpaceKind::L2Dense | SpaceKind::CosineDense | SpaceKind::InnerProductDense, Vector::Dense(_))
                | (SpaceKind::InnerProductSparse, Vector::Sparse(_))
                | (SpaceKind::CompositeInnerProduct, Vector::Composite(_))
        );
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("vector does not conform to space {:?}", self.kind)))
        }
    }

    /// Checks that `v` is accepted and shape-compatible with `reference`.
    pub fn conforms(&self, v: &Vector, reference: &Vector) -> Result<()> {
        self.accepts(v)?;
        match (v, reference) {
            (Vector::Dense(a), Vector::Dense(b)) => check_dims(a, b),
            (Vector::Composite(a), Vector::Composite(b)) if !a.same_schema(b) => {
                Err(Error::invalid("composite field schemas differ"))
            }
            _ => Ok(()),
        }
    }

    /// Raw score in the space's own orientation.
    pub fn score(&self, q: &Vector, d: &Vector) -> Result<f64> {
        match (self.kind, q, d) {
            (SpaceKind::L2Dense, Vector::Dense(a), Vector::Dense(b)) => l2_distance(a, b),
            (SpaceKind::CosineDense, Vector::Dense(a), Vector::Dense(b)) => cosine_similarity(a, b),
            (SpaceKind::InnerProductDense, Vector::Dense(a), Vector::Dense(b)) => dot_dense(a, b),
            (SpaceKind::InnerProductSparse, Vector::Sparse(a), Vector::Sparse(b)) => Ok(dot_sparse(a, b)),
            (SpaceKind::CompositeInnerProduct, Vector::Composite(a), Vector::Composite(b)) => composite_score(a, b),
            _ => Err(Error::invalid(format!("vectors do not conform to space {:?}", self.kind))),
        }
    }

    /// Lower-is-better distance. Inputs must already conform to the space.
    pub fn distance(&self, q: &Vector, d: &Vector) -> f64 {
        match (self.kind, q, d) {
            (SpaceKind::L2Dense, Vector::Dense(a), Vector::Dense(b)) => l2_slices(&a.0, &b.0),
            (SpaceKind::CosineDense, Vector::Dense(a), Vector::Dense(b)) => -cosine_slices(&a.0, &b.0),
            (SpaceKind::InnerProductDense, Vector::Dense(a), Vector::Dense(b)) => -dot_slices(&a.0, &b.0),
            _ => -self.score(q, d).expect("vector conformance is checked on insert"),
        }
    }

    /// Converts a [`Space::distance`] value back to the space's orientation.
    pub fn score_from_distance(&self, distance: f64) -> f64 {
        match self.orientation() {
            Orientation::Distance => distance,
            Orientation::Similarity => -distance,
        }
    }
}

// Vector payload layout (shared by every file that stores vectors):
//   tag u8: 0 dense, 1 sparse, 2 composite
//   dense:     u64 dim, dim x f32
//   sparse:    u64 nnz, nnz x u32 ids, u64 nnz, nnz x f32 values
//   composite: u64 nfields, then per field: str name, f64 weight, nested dense/sparse payload
pub(crate) fn write_vector<W: Write>(w: &mut Writer<W>, v: &Vector) -> Result<()> {
    match v {
        Vector::Dense(d) => {
            w.u8(0)?;
            w.f32s(d.values())
        }
        Vector::Sparse(s) => {
            w.u8(1)?;
            w.u32s(s.ids())?;
            w.f32s(s.values())
        }
        Vector::Composite(c) => {
            w.u8(2)?;
            w.len(c.fields.len())?;
            for f in &c.fields {
                w.str(&f.name)?;
                w.f64(f.weight)?;
                match &f.vector {
                    FieldVector::Dense(d) => write_vector(w, &Vector::Dense(d.clone()))?,
                    FieldVector::Sparse(s) => write_vector(w, &Vector::Sparse(s.clone()))?,
                }
            }
            Ok(())
        }
    }
}

pub(crate) fn read_vector<R: Read>(r: &mut Reader<R>) -> Result<Vector> {
    let fmt = |e: Error| match e {
        Error::InvalidArgument(m) => Error::Format(m),
        e => e,
    };
    match r.u8()? {
        0 => Ok(Vector::Dense(DenseVector::new(r.f32s()?).map_err(fmt)?)),
        1 => {
            let ids = r.u32s()?;
            let values = r.f32s()?;
            Ok(Vector::Sparse(SparseVector::new(ids, values).map_err(fmt)?))
        }
        2 => {
            let n = r.len(MAX_ELEMS)?;
            let mut fields = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let name = r.str()?;
                let weight = r.f64()?;
                let vector = match read_vector(r)? {
                    Vector::Dense(d) => FieldVector::Dense(d),
                    Vector::Sparse(s) => FieldVector::Sparse(s),
                    Vector::Composite(_) => return Err(Error::Format("nested composite vector".into())),
                };
                fields.push(CompositeField { name, vector, weight });
            }
            Ok(Vector::Composite(CompositeVector::new(fields).map_err(fmt)?))
        }
        t => Err(Error::Format(format!("unknown vector tag {t}"))),
    }
}
