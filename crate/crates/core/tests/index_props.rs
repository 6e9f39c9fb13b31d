use std::collections::HashSet;

use hybrid_core::ann::{recall, BruteForceIndex, HnswBuilder, HnswIndex, HnswParams, SearchHit};
use hybrid_core::bm25::Bm25Params;
use hybrid_core::forward::{build_forward, DocumentEntry, FieldSpec};
use hybrid_core::inverted::InvertedIndex;
use hybrid_core::vectors::{DenseVector, Space, SpaceKind, SparseVector, Vector};
use hybrid_core::Exec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn int_points(dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec((-3i8..=3).prop_map(f32::from), dim), 1..60)
}

fn to_vectors(points: &[Vec<f32>]) -> Vec<Vector> {
    points.iter().map(|p| Vector::Dense(DenseVector::new(p.clone()).unwrap())).collect()
}

/// Every distance computed, then sorted by (distance, id).
fn full_sort(space: Space, data: &[Vector], q: &Vector, k: usize) -> Vec<SearchHit> {
    let mut all: Vec<(f64, u32)> = data.iter().enumerate().map(|(i, v)| (space.distance(q, v), i as u32)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, id)| SearchHit { id, score: space.score_from_distance(d) }).collect()
}

fn gaussian_points(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vector> {
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            Vector::Dense(DenseVector::new(v).unwrap())
        })
        .collect()
}

fn corpus() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(0u32..25, 0..30), 1..40)
}

fn bags(docs: &[Vec<u32>]) -> Vec<Vec<(u32, u32)>> {
    docs.iter()
        .map(|d| {
            let mut bag: Vec<(u32, u32)> = Vec::new();
            let mut sorted = d.clone();
            sorted.sort_unstable();
            for t in sorted {
                match bag.last_mut() {
                    Some(b) if b.0 == t => b.1 += 1,
                    _ => bag.push((t, 1)),
                }
            }
            bag
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn brute_force_matches_full_sort(points in int_points(3), q in prop::collection::vec((-3i8..=3).prop_map(f32::from), 3), k in 1usize..12) {
        let data = to_vectors(&points);
        let q = Vector::Dense(DenseVector::new(q).unwrap());
        for kind in [SpaceKind::L2Dense, SpaceKind::InnerProductDense, SpaceKind::CosineDense] {
            let space = Space::new(kind);
            let bf = BruteForceIndex::build(space, data.clone()).unwrap();
            prop_assert_eq!(bf.search(&q, k).unwrap(), full_sort(space, &data, &q, k));
            prop_assert_eq!(bf.search_with(&q, k, Exec::Parallel).unwrap(), full_sort(space, &data, &q, k));
        }
    }

    #[test]
    fn hnsw_results_are_valid_and_structure_holds(points in int_points(4), seed in any::<u64>(), m in 2usize..6) {
        let space = Space::new(SpaceKind::L2Dense);
        let params = HnswParams { seed, ef_construction: 20, ..HnswParams::with_m(m) };
        let mut b = HnswBuilder::new(space, params).unwrap();
        for v in to_vectors(&points) {
            b.insert(v).unwrap();
            let snapshot = b.clone().freeze();
            prop_assert_eq!(snapshot.check_structure(), Ok(()));
            for id in 0..snapshot.len() as u32 {
                prop_assert!(snapshot.neighbors(id, 0).len() <= params.m_max0);
            }
        }
        let index = b.freeze();
        let q = Vector::Dense(DenseVector::new(vec![0.5, -0.5, 1.0, 0.0]).unwrap());
        let hits = index.search(&q, 10, 16).unwrap();
        let ids: HashSet<u32> = hits.iter().map(|h| h.id).collect();
        prop_assert_eq!(ids.len(), hits.len());
        prop_assert!(hits.iter().all(|h| (h.id as usize) < points.len()));
        prop_assert!(hits.windows(2).all(|w| w[0].score <= w[1].score));
    }

    #[test]
    fn daat_mips_matches_brute_force(docs in prop::collection::vec(prop::collection::btree_map(0u32..30, 1i32..6, 0..12), 1..80),
                                      query in prop::collection::btree_map(0u32..30, 1i32..6, 0..6),
                                      k in 1usize..15) {
        let vecs: Vec<SparseVector> = docs
            .iter()
            .map(|d| SparseVector::from_pairs(d.iter().map(|(&t, &v)| (t, v as f32))).unwrap())
            .collect();
        let q = SparseVector::from_pairs(query.iter().map(|(&t, &v)| (t, v as f32))).unwrap();
        let index = InvertedIndex::build_from_sparse(&vecs);
        // Oracle: integer dot products over documents sharing a term, sorted by (-score, id).
        let mut all: Vec<(i64, u32)> = docs
            .iter()
            .enumerate()
            .filter(|(_, d)| d.keys().any(|t| query.contains_key(t)))
            .map(|(i, d)| (d.iter().map(|(t, &v)| i64::from(v) * i64::from(*query.get(t).unwrap_or(&0))).sum(), i as u32))
            .collect();
        all.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<(u32, f64)> = all.into_iter().take(k).map(|(s, id)| (id, s as f64)).collect();
        let got: Vec<(u32, f64)> = index.daat_mips(&q, k).into_iter().map(|h| (h.id, h.score)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn bm25_retrieve_matches_exhaustive_scoring(docs in corpus(), query in prop::collection::vec(0u32..30, 1..6), k in 1usize..15) {
        let bags = bags(&docs);
        let index = InvertedIndex::build_from_bags(bags.iter().map(Vec::as_slice));
        let params = Bm25Params::default();
        let qbag = bags_of_query(&query);
        let mut all: Vec<(f64, u32)> = (0..docs.len() as u32)
            .filter(|&d| bags[d as usize].iter().any(|(t, _)| query.contains(t)))
            .map(|d| (index.bm25_score(&qbag, d, &params).unwrap(), d))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<(u32, f64)> = all.iter().take(k).map(|&(s, id)| (id, s)).collect();
        let got: Vec<(u32, f64)> = index.bm25_retrieve(&qbag, k, &params).unwrap().into_iter().map(|h| (h.id, h.score)).collect();
        prop_assert_eq!(got, want);
        prop_assert!(all.iter().all(|&(s, _)| s >= 0.0));
    }

    #[test]
    fn sparse_build_reconstructs(docs in prop::collection::vec(prop::collection::btree_map(0u32..50, -5.0f32..5.0, 0..10), 0..40)) {
        let vecs: Vec<SparseVector> =
            docs.iter().map(|d| SparseVector::from_pairs(d.iter().map(|(&t, &v)| (t, v)).filter(|p| p.1 != 0.0)).unwrap()).collect();
        let index = InvertedIndex::build_from_sparse(&vecs);
        let back = index.reconstruct();
        prop_assert_eq!(back.len(), vecs.len());
        for (r, v) in back.iter().zip(&vecs) {
            prop_assert_eq!(r.clone(), v.iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn forward_index_invariants(docs in corpus()) {
        let entries: Vec<DocumentEntry> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| DocumentEntry::new(format!("d{i}"), d.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ")))
            .collect();
        let fwd = build_forward(&entries, &[FieldSpec::parsed("text")], true).unwrap();
        let f = &fwd["text"];
        let mut total = 0u64;
        let mut df = vec![0u32; f.vocab_size()];
        for d in 0..f.doc_count() as u32 {
            let doc = f.doc(d);
            let seq = doc.sequence.as_ref().unwrap();
            let mut from_seq: Vec<(u32, u32)> = Vec::new();
            let mut sorted = seq.clone();
            sorted.sort_unstable();
            for t in sorted {
                match from_seq.last_mut() {
                    Some(b) if b.0 == t => b.1 += 1,
                    _ => from_seq.push((t, 1)),
                }
            }
            prop_assert_eq!(&from_seq, &doc.bag);
            total += doc.len();
            for &(t, _) in &doc.bag {
                df[t as usize] += 1;
            }
        }
        prop_assert_eq!(total, f.total_tokens());
        for t in 0..f.vocab_size() as u32 {
            prop_assert_eq!(df[t as usize], f.doc_freq(t));
        }
        // Same input bytes, same term ids and same file.
        let again = build_forward(&entries, &[FieldSpec::parsed("text")], true).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        f.write_to(&mut a).unwrap();
        again["text"].write_to(&mut b).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn bags_of_query(q: &[u32]) -> Vec<(u32, u32)> {
    bags(&[q.to_vec()]).remove(0)
}

#[test]
fn hnsw_is_deterministic_for_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = gaussian_points(800, 16, &mut rng);
    let space = Space::new(SpaceKind::L2Dense);
    let params = HnswParams { ef_construction: 64, ..HnswParams::default() };
    let a = HnswIndex::build(space, params, data.clone()).unwrap();
    let b = HnswIndex::build(space, params, data.clone()).unwrap();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_to(&mut x).unwrap();
    b.write_to(&mut y).unwrap();
    assert!(x == y);
    for q in &data[..20] {
        assert_eq!(a.search(q, 10, 50).unwrap(), b.search(q, 10, 50).unwrap());
    }
}

#[test]
fn recall_grows_with_ef_on_bundled_seeds() {
    let space = Space::new(SpaceKind::L2Dense);
    let (mut low, mut high) = (0.0, 0.0);
    let seeds = [11u64, 12, 13];
    for &seed in &seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = gaussian_points(2000, 32, &mut rng);
        let queries = gaussian_points(50, 32, &mut rng);
        let index = HnswIndex::build(space, HnswParams { seed, ..HnswParams::default() }, data.clone()).unwrap();
        let bf = BruteForceIndex::build(space, data).unwrap();
        for q in &queries {
            let truth = bf.search(q, 10).unwrap();
            low += recall(&index.search(q, 10, 10).unwrap(), &truth);
            high += recall(&index.search(q, 10, 100).unwrap(), &truth);
        }
    }
    let n = (seeds.len() * 50) as f64;
    assert!(high / n >= low / n, "ef=100 recall {} < ef=10 recall {}", high / n, low / n);
}
