//! Export of inner-product-equivalent features as k-NN vectors.
//!
//! Two layouts are supported. `per_field` keeps one vector per extractor in
//! a [`CompositeVector`] whose weights live on the query side and can be
//! changed at search time. `composite` concatenates all fields into one
//! sparse vector (dense dimensions become ids at a per-field offset) with
//! each side scaled by `sqrt(w)`, so the weights are baked in and must be
//! nonnegative.
//!
//! An export directory holds `manifest.json` and `vectors.bin` (a
//! [`VectorStore`] file, one vector per document in document-id order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::VectorStore;
use crate::error::{Error, Result};
use crate::exec::{map_range, Exec};
use crate::extract::{CompositeExtractor, ExtractorConfig, Resources};
use crate::forward::QueryEntry;
use crate::vectors::{CompositeField, CompositeVector, FieldKind, FieldVector, Space, SpaceKind, SparseVector, Vector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VECTORS_FILE: &str = "vectors.bin";

/// Config keys that name files and are rewritten to absolute paths on export.
const RESOURCE_KEYS: [&str; 3] = ["modelFile", "queryEmbedFile", "docEmbedFile"];

/// An extractor whose feature is the inner product of a query vector and a
/// document vector.
pub trait Vectorizable: Send + Sync {
    fn kind(&self) -> FieldKind;
    /// Dense dimension, or the size of the sparse id space.
    fn dim(&self) -> usize;
    /// The vector and whether it is a fallback (no in-vocabulary token).
    fn query_vector(&self, query: &QueryEntry) -> (FieldVector, bool);
    fn doc_vector(&self, doc: u32) -> (FieldVector, bool);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    PerField,
    Composite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestField {
    pub name: String,
    pub kind: FieldKind,
    pub dim: usize,
    /// First id of this field in the composite layout; 0 for `per_field`.
    pub offset: u32,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub scenario: Scenario,
    pub space: SpaceKind,
    pub doc_count: usize,
    pub fields: Vec<ManifestField>,
    /// Extractor configurations the vectors came from.
    pub extractors: Vec<ExtractorConfig>,
    /// Documents with a fallback (zero) vector in some field.
    pub flagged_docs: Vec<String>,
}

impl ExportManifest {
    pub fn weights(&self) -> Vec<f64> {
        self.fields.iter().map(|f| f.weight).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("bad export manifest: {e}")))
    }
}

/// Vectorizes queries and documents for a list of vectorizable extractors.
pub struct Exporter {
    extractor: CompositeExtractor,
    configs: Vec<ExtractorConfig>,
    names: Vec<String>,
}

fn field_names(columns: &[String]) -> Vec<String> {
    columns
        .iter()
        .enumerate()
        .map(|(i, c)| if columns[..i].contains(c) { format!("{c}#{i}") } else { c.clone() })
        .collect()
}

fn check_weights(weights: &[f64], n: usize, scenario: Scenario) -> Result<()> {
    if weights.len() != n {
        return Err(Error::invalid(format!("{} weights for {n} exported fields", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::invalid("export weights must be finite"));
    }
    if scenario == Scenario::Composite {
        if let Some(w) = weights.iter().find(|&&w| w < 0.0) {
            return Err(Error::invalid(format!(
                "composite export needs nonnegative weights, got {w}; use the per-field layout"
            )));
        }
    }
    Ok(())
}

fn scale_into(out: &mut Vec<(u32, f32)>, v: &FieldVector, offset: u32, factor: f64) {
    match v {
        FieldVector::Sparse(s) => out.extend(s.iter().map(|(i, x)| (offset + i, (f64::from(x) * factor) as f32))),
        FieldVector::Dense(d) => {
            out.extend(d.values().iter().enumerate().map(|(i, &x)| (offset + i as u32, (f64::from(x) * factor) as f32)))
        }
    }
}

impl Exporter {
    /// Every configured extractor must be vectorizable.
    pub fn new(configs: &[ExtractorConfig], resources: &Resources) -> Result<Self> {
        let extractor = CompositeExtractor::new(configs, resources)?;
        for (e, c) in extractor.extractors().iter().zip(configs) {
            if e.vectorizable().is_none() {
                return Err(Error::config(format!(
                    "extractor {} (type \"{}\") has no inner-product form and cannot be exported",
                    e.column(),
                    c.kind
                )));
            }
        }
        let names = field_names(&extractor.columns());
        let configs = configs.iter().map(|c| absolutize(c, resources)).collect();
        Ok(Exporter { extractor, configs, names })
    }

    pub fn from_file(path: impl AsRef<Path>, resources: &Resources) -> Result<Self> {
        let path = path.as_ref();
        let configs = crate::extract::load_extractor_configs(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(&configs, &resources.clone().with_base_dir(base))
    }

    /// Rebuilds the exporter recorded in a manifest.
    pub fn from_manifest(manifest: &ExportManifest, resources: &Resources) -> Result<Self> {
        let e = Self::new(&manifest.extractors, resources)?;
        if e.names != manifest.fields.iter().map(|f| f.name.clone()).collect::<Vec<_>>() {
            return Err(Error::config("export manifest fields do not match its extractors"));
        }
        Ok(e)
    }

    fn parts(&self) -> impl Iterator<Item = &dyn Vectorizable> {
        self.extractor.extractors().iter().map(|e| e.vectorizable().expect("checked in new"))
    }

    pub fn field_count(&self) -> usize {
        self.names.len()
    }

    pub fn manifest(&self, scenario: Scenario, weights: &[f64]) -> Result<ExportManifest> {
        check_weights(weights, self.field_count(), scenario)?;
        let mut offset: u64 = 0;
        let mut fields = Vec::new();
        for ((v, name), &w) in self.parts().zip(&self.names).zip(weights) {
            let off = match scenario {
                Scenario::PerField => 0,
                Scenario::Composite => offset,
            };
            offset += v.dim() as u64;
            if offset > u64::from(u32::MAX) {
                return Err(Error::invalid("composite id space exceeds u32"));
            }
            fields.push(ManifestField {
                name: name.clone(),
                kind: v.kind(),
                dim: v.dim(),
                offset: off as u32,
                weight: w,
            });
        }
        Ok(ExportManifest {
            scenario,
            space: match scenario {
                Scenario::PerField => SpaceKind::CompositeInnerProduct,
                Scenario::Composite => SpaceKind::InnerProductSparse,
            },
            doc_count: self.extractor.resources().doc_count(),
            fields,
            extractors: self.configs.clone(),
            flagged_docs: Vec::new(),
        })
    }

    fn assemble(&self, manifest: &ExportManifest, parts: Vec<(FieldVector, bool)>) -> Result<(Vector, bool)> {
        let flagged = parts.iter().any(|p| p.1);
        let v = match manifest.scenario {
            Scenario::PerField => Vector::Composite(CompositeVector::new(
                parts
                    .into_iter()
                    .zip(&manifest.fields)
                    .map(|((vector, _), f)| CompositeField { name: f.name.clone(), vector, weight: f.weight })
                    .collect(),
            )?),
            Scenario::Composite => {
                let mut pairs = Vec::new();
                for ((vector, _), f) in parts.iter().zip(&manifest.fields) {
                    scale_into(&mut pairs, vector, f.offset, f.weight.sqrt());
                }
                Vector::Sparse(SparseVector::from_pairs(pairs)?)
            }
        };
        Ok((v, flagged))
    }

    /// Query-side vector in the manifest's layout, with its weights.
    pub fn query_vector(&self, manifest: &ExportManifest, query: &QueryEntry) -> Result<Vector> {
        let parts = self.parts().map(|v| v.query_vector(query)).collect();
        Ok(self.assemble(manifest, parts)?.0)
    }

    pub fn doc_vector(&self, manifest: &ExportManifest, doc: u32) -> Result<(Vector, bool)> {
        let parts = self.parts().map(|v| v.doc_vector(doc)).collect();
        self.assemble(manifest, parts)
    }

    /// Vectors for every document, in document-id order.
    pub fn export(&self, scenario: Scenario, weights: &[f64], exec: Exec) -> Result<(ExportManifest, VectorStore)> {
        let mut manifest = self.manifest(scenario, weights)?;
        let n = manifest.doc_count;
        let docs =
            map_range(exec, n, |d| self.doc_vector(&manifest, d as u32)).into_iter().collect::<Result<Vec<_>>>()?;
        let res = self.extractor.resources();
        manifest.flagged_docs =
            docs.iter().enumerate().filter(|(_, d)| d.1).map(|(i, _)| res.docno(i as u32).to_string()).collect();
        let store = VectorStore::from_vectors(Space::new(manifest.space), docs.into_iter().map(|d| d.0).collect())?;
        Ok((manifest, store))
    }

    pub fn export_per_field(&self, weights: &[f64], exec: Exec) -> Result<(ExportManifest, Vec<CompositeVector>)> {
        let (m, store) = self.export(Scenario::PerField, weights, exec)?;
        let v = store
            .vectors()
            .iter()
            .map(|v| match v {
                Vector::Composite(c) => c.clone(),
                _ => unreachable!("per-field export yields composite vectors"),
            })
            .collect();
        Ok((m, v))
    }

    pub fn export_composite(&self, weights: &[f64], exec: Exec) -> Result<(ExportManifest, Vec<SparseVector>)> {
        let (m, store) = self.export(Scenario::Composite, weights, exec)?;
        let v = store
            .vectors()
            .iter()
            .map(|v| match v {
                Vector::Sparse(s) => s.clone(),
                _ => unreachable!("composite export yields sparse vectors"),
            })
            .collect();
        Ok((m, v))
    }
}

fn absolutize(cfg: &ExtractorConfig, res: &Resources) -> ExtractorConfig {
    let mut c = cfg.clone();
    for key in RESOURCE_KEYS {
        if let Some(serde_json::Value::String(p)) = c.params.get(key) {
            let resolved = res.resolve(p);
            let abs = fs::canonicalize(&resolved).unwrap_or(resolved);
            c.params.insert(key.to_string(), abs.to_string_lossy().into_owned().into());
        }
    }
    c
}

/// Writes `manifest.json` and `vectors.bin` into `dir`.
pub fn write_export(dir: impl AsRef<Path>, manifest: &ExportManifest, store: &VectorStore) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    manifest.save(dir.join(MANIFEST_FILE))?;
    store.save(dir.join(VECTORS_FILE))?;
    Ok(())
}

pub fn read_export(dir: impl AsRef<Path>) -> Result<(ExportManifest, VectorStore)> {
    let dir = dir.as_ref();
    let manifest = ExportManifest::load(dir.join(MANIFEST_FILE))?;
    let store = VectorStore::load(dir.join(VECTORS_FILE))?;
    if store.len() != manifest.doc_count || store.space().kind() != manifest.space {
        return Err(Error::config(format!("{} does not match its manifest", dir.join(VECTORS_FILE).display())));
    }
    Ok((manifest, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::tests::toy_resources;
    use crate::extract::EmbeddingTable;
    use crate::forward::DocumentEntry;
    use crate::vectors::{composite_score, dot_sparse};

    fn bm25_cfg() -> ExtractorConfig {
        ExtractorConfig::new("bm25").param("indexFieldName", "text")
    }

    fn embed_setup(dir: &Path) -> ExtractorConfig {
        let mut t = EmbeddingTable::new(3);
        t.insert("cat", &[1.0, 0.0, 0.5]).unwrap();
        t.insert("run", &[0.0, 1.0, -0.5]).unwrap();
        t.insert("dog", &[0.3, -0.2, 1.0]).unwrap();
        t.save(dir.join("e.txt")).unwrap();
        ExtractorConfig::new("avgWordEmbed")
            .param("indexFieldName", "text")
            .param("queryEmbedFile", "e.txt")
            .param("docEmbedFile", "e.txt")
            .param("distType", "cosine")
    }

    fn corpus() -> Resources {
        toy_resources(&[("d1", "cat cat run"), ("d2", "cat sat"), ("d3", "dog")])
    }

    #[test]
    fn toy_bm25_dot() {
        let ex = Exporter::new(&[bm25_cfg()], &corpus()).unwrap();
        let (m, docs) = ex.export_composite(&[1.0], Exec::Sequential).unwrap();
        let Vector::Sparse(q) = ex.query_vector(&m, &DocumentEntry::new("q", "cat zebra")).unwrap() else { panic!() };
        assert_eq!(q.len(), 1);
        let s = dot_sparse(&q, &docs[0]);
        assert!((s - 0.5666).abs() < 1e-3, "{s}");
    }

    #[test]
    fn non_vectorizable_rejected() {
        let res = corpus();
        let cfg = ExtractorConfig::new("proximity").param("indexFieldName", "text");
        assert!(matches!(Exporter::new(&[cfg], &res), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let l2 = embed_setup(dir.path()).param("distType", "l2");
        assert!(matches!(Exporter::new(&[l2], &res.with_base_dir(dir.path())), Err(Error::Config(_))));
    }

    #[test]
    fn negative_composite_weight_rejected() {
        let ex = Exporter::new(&[bm25_cfg()], &corpus()).unwrap();
        assert!(ex.export_composite(&[-1.0], Exec::Sequential).is_err());
        assert!(ex.export_per_field(&[-1.0], Exec::Sequential).is_ok());
        assert!(ex.export_per_field(&[1.0, 2.0], Exec::Sequential).is_err());
    }

    #[test]
    fn weights_adjustable_after_export() {
        let dir = tempfile::tempdir().unwrap();
        let res = corpus().with_base_dir(dir.path());
        let ex = Exporter::new(&[bm25_cfg(), embed_setup(dir.path())], &res).unwrap();
        let (m, docs) = ex.export_per_field(&[1.0, 1.0], Exec::Sequential).unwrap();
        assert_eq!(m.fields[0].name, "bm25(text)");
        let Vector::Composite(mut q) = ex.query_vector(&m, &DocumentEntry::new("q", "cat run")).unwrap() else {
            panic!()
        };
        let per = |q: &CompositeVector, d: &CompositeVector, i: usize| {
            q.fields()[i].vector.inner_product(&d.fields()[i].vector).unwrap()
        };
        for w in [[0.3, 2.0], [1.0, 0.0], [-1.0, 4.0]] {
            q.set_weights(&w).unwrap();
            for d in &docs {
                let want = w[0] * per(&q, d, 0) + w[1] * per(&q, d, 1);
                assert!((composite_score(&q, d).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weight_field_contributes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let res = corpus().with_base_dir(dir.path());
        let ex = Exporter::new(&[bm25_cfg(), embed_setup(dir.path())], &res).unwrap();
        let (m, docs) = ex.export_composite(&[1.0, 0.0], Exec::Sequential).unwrap();
        let solo = Exporter::new(&[bm25_cfg()], &res).unwrap();
        let (m1, docs1) = solo.export_composite(&[1.0], Exec::Sequential).unwrap();
        let q = DocumentEntry::new("q", "cat dog");
        let (Vector::Sparse(a), Vector::Sparse(b)) =
            (ex.query_vector(&m, &q).unwrap(), solo.query_vector(&m1, &q).unwrap())
        else {
            panic!()
        };
        for (x, y) in docs.iter().zip(&docs1) {
            assert_eq!(dot_sparse(&a, x), dot_sparse(&b, y));
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ex = Exporter::new(&[bm25_cfg()], &corpus()).unwrap();
        let (m, store) = ex.export(Scenario::PerField, &[0.5], Exec::Parallel).unwrap();
        write_export(dir.path(), &m, &store).unwrap();
        let (m2, store2) = read_export(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(store.vectors(), store2.vectors());
        let again = Exporter::from_manifest(&m2, &corpus()).unwrap();
        assert_eq!(again.field_count(), 1);
    }

    #[test]
    fn flagged_docs_listed() {
        let dir = tempfile::tempdir().unwrap();
        let res = toy_resources(&[("d1", "cat"), ("d2", "sat")]).with_base_dir(dir.path());
        let ex = Exporter::new(&[embed_setup(dir.path())], &res).unwrap();
        let (m, _) = ex.export(Scenario::Composite, &[1.0], Exec::Sequential).unwrap();
        assert_eq!(m.flagged_docs, vec!["d2"]);
    }
}
