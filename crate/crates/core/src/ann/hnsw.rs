//! Hierarchical navigable small world graph.
//!
//! Construction goes through [`HnswBuilder`]; [`HnswBuilder::freeze`] yields an
//! immutable [`HnswIndex`] that can be searched from many threads at once.
//! Neighbor lists are chosen with the pruning heuristic (no candidate-set
//! extension, pruned candidates kept as fill).
//!
//! File layout (little-endian): magic `HRHN`, u32 version, u32 M, u32 Mmax0,
//! u32 efConstruction, f64 levelMult, u64 seed, u32 entry point
//! (`u32::MAX` when empty), u32 max level, u64 N, then per node a u32 level
//! followed by `level + 1` neighbor lists (u64 count + u32 ids, level 0 first),
//! then the vector store payload (u8 space kind, u64 N, vectors).

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{SearchHit, VectorStore};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::exec::{map_ordered, map_range, Exec};
use crate::topk::Keyed;
use crate::vectors::{Space, Vector};

const MAGIC: &[u8; 4] = b"HRHN";
const VERSION: u32 = 1;
const MAX_LEVEL: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Neighbors per node on levels above 0.
    pub m: usize,
    /// Neighbors per node on level 0.
    pub m_max0: usize,
    pub ef_construction: usize,
    pub level_mult: f64,
    pub seed: u64,
}

impl HnswParams {
    pub fn with_m(m: usize) -> Self {
        HnswParams { m, m_max0: 2 * m, level_mult: 1.0 / (m.max(2) as f64).ln(), ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m_max0 < self.m || self.ef_construction == 0 {
            return Err(Error::invalid("HNSW requires M >= 1, Mmax0 >= M and efConstruction >= 1"));
        }
        if !(self.level_mult.is_finite() && self.level_mult > 0.0) {
            return Err(Error::invalid("HNSW levelMult must be positive"));
        }
        Ok(())
    }
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams { m: 16, m_max0: 32, ef_construction: 200, level_mult: 1.0 / 16f64.ln(), seed: 42 }
    }
}

/// Level for a uniform draw `u` in (0, 1]: `floor(-ln(u) * level_mult)`.
pub fn assign_level(u: f64, level_mult: f64) -> usize {
    // The epsilon keeps exact powers (u = e^-3, u = 1/16 with 1/ln 16) from
    // rounding down a level.
    let x = -u.ln() * level_mult;
    ((x + 1e-9).floor().max(0.0) as usize).min(MAX_LEVEL)
}

#[derive(Clone)]
struct Visited {
    marks: Vec<u32>,
    generation: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited { marks: vec![0; n], generation: 0 }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.generation = 1;
        }
    }

    /// True if `id` was not yet visited.
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.marks[id as usize];
        if *slot == self.generation {
            false
        } else {
            *slot = self.generation;
            true
        }
    }
}

/// Adjacency: `links[node][level]`.
type Links = Vec<Vec<Vec<u32>>>;

struct GraphRef<'a> {
    space: Space,
    vectors: &'a [Vector],
    links: &'a Links,
}

impl GraphRef<'_> {
    fn dist(&self, q: &Vector, id: u32) -> Keyed {
        Keyed { key: self.space.distance(q, &self.vectors[id as usize]), id }
    }

    fn greedy(&self, q: &Vector, mut cur: Keyed, level: usize) -> Keyed {
        loop {
            let mut best = cur;
            for &n in &self.links[cur.id as usize][level] {
                let d = self.dist(q, n);
                if d < best {
                    best = d;
                }
            }
            if best == cur {
                return cur;
            }
            cur = best;
        }
    }

    /// Beam search on one level; returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        q: &Vector,
        entries: &[Keyed],
        ef: usize,
        level: usize,
        visited: &mut Visited,
    ) -> Vec<Keyed> {
        visited.reset(self.vectors.len());
        let mut frontier: BinaryHeap<Reverse<Keyed>> = BinaryHeap::new();
        let mut found: BinaryHeap<Keyed> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e.id) {
                frontier.push(Reverse(e));
                found.push(e);
                if found.len() > ef {
                    found.pop();
                }
            }
        }
        while let Some(Reverse(c)) = frontier.pop() {
            if found.len() >= ef && c > *found.peek().unwrap() {
                break;
            }
            for &n in &self.links[c.id as usize][level] {
                if !visited.insert(n) {
                    continue;
                }
                let d = self.dist(q, n);
                if found.len() < ef || d < *found.peek().unwrap() {
                    frontier.push(Reverse(d));
                    found.push(d);
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        found.into_sorted_vec()
    }

    /// Heuristic selection. `candidates` are sorted by distance to the base.
    fn select(&self, candidates: &[Keyed], m: usize) -> Vec<Keyed> {
        let mut kept: Vec<Keyed> = Vec::with_capacity(m);
        let mut pruned: Vec<Keyed> = Vec::new();
        for &c in candidates {
            if kept.len() >= m {
                break;
            }
            let cv = &self.vectors[c.id as usize];
            let diverse = kept.iter().all(|k| c.key < self.space.distance(cv, &self.vectors[k.id as usize]));
            if diverse {
                kept.push(c);
            } else {
                pruned.push(c);
            }
        }
        let room = m - kept.len();
        kept.extend(pruned.into_iter().take(room));
        kept
    }

    /// Per-level candidate lists for a new point, index = level.
    fn candidates(
        &self,
        q: &Vector,
        level: usize,
        entry: u32,
        max_level: usize,
        ef: usize,
        visited: &mut Visited,
    ) -> Vec<Vec<Keyed>> {
        let mut ep = self.dist(q, entry);
        for l in (level + 1..=max_level).rev() {
            ep = self.greedy(q, ep, l);
        }
        let top = level.min(max_level);
        let mut per_level = vec![Vec::new(); top + 1];
        let mut entries = vec![ep];
        for l in (0..=top).rev() {
            let found = self.search_layer(q, &entries, ef, l, visited);
            entries.clone_from(&found);
            per_level[l] = found;
        }
        per_level
    }
}

/// Heuristic neighbor selection over `candidates` (sorted best first, scores
/// in the space orientation relative to the base point). A candidate is kept
/// only if it is closer to the base than to every neighbor kept so far;
/// pruned candidates fill any remaining slots nearest first.
pub fn select_neighbors(space: &Space, vectors: &[Vector], candidates: &[SearchHit], m: usize) -> Vec<SearchHit> {
    let keyed: Vec<Keyed> =
        candidates.iter().map(|h| Keyed { key: space.score_from_distance(h.score), id: h.id }).collect();
    let links = Links::new();
    let g = GraphRef { space: *space, vectors, links: &links };
    g.select(&keyed, m).into_iter().map(|k| SearchHit { id: k.id, score: space.score_from_distance(k.key) }).collect()
}

/// Mutable HNSW under construction.
#[derive(Clone)]
pub struct HnswBuilder {
    params: HnswParams,
    store: VectorStore,
    links: Links,
    entry: Option<u32>,
    max_level: usize,
    rng: ChaCha8Rng,
    visited: Visited,
}

impl HnswBuilder {
    pub fn new(space: Space, params: HnswParams) -> Result<Self> {
        params.validate()?;
        Ok(HnswBuilder {
            params,
            store: VectorStore::new(space),
            links: Vec::new(),
            entry: None,
            max_level: 0,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            visited: Visited::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    fn draw_level(&mut self) -> usize {
        let u = 1.0 - self.rng.random::<f64>();
        assign_level(u, self.params.level_mult)
    }

    fn graph(&self) -> GraphRef<'_> {
        GraphRef { space: self.store.space(), vectors: self.store.vectors(), links: &self.links }
    }

    fn push_node(&mut self, v: Vector) -> Result<(u32, usize)> {
        let id = self.store.push(v)?;
        let level = self.draw_level();
        self.links.push(vec![Vec::new(); level + 1]);
        Ok((id, level))
    }

    fn cap(&self, level: usize) -> usize {
        if level == 0 {
            self.params.m_max0
        } else {
            self.params.m
        }
    }

    fn link(&mut self, id: u32, per_level: Vec<Vec<Keyed>>) {
        for (level, cands) in per_level.into_iter().enumerate() {
            let chosen = self.graph().select(&cands, self.params.m);
            self.links[id as usize][level] = chosen.iter().map(|k| k.id).collect();
            let cap = self.cap(level);
            for k in chosen {
                let n = k.id as usize;
                self.links[n][level].push(id);
                if self.links[n][level].len() > cap {
                    let g = self.graph();
                    let base = &g.vectors[n];
                    let mut cands: Vec<Keyed> = g.links[n][level].iter().map(|&x| g.dist(base, x)).collect();
                    cands.sort();
                    let kept: Vec<u32> = g.select(&cands, cap).iter().map(|k| k.id).collect();
                    self.links[n][level] = kept;
                }
            }
        }
    }

    fn promote(&mut self, id: u32, level: usize) {
        if self.entry.is_none() || level > self.max_level {
            self.entry = Some(id);
            self.max_level = level;
        }
    }

    pub fn insert(&mut self, v: Vector) -> Result<u32> {
        let (id, level) = self.push_node(v)?;
        if let Some(entry) = self.entry {
            let mut visited = std::mem::replace(&mut self.visited, Visited::new(0));
            let per_level = self.graph().candidates(
                self.store.get(id),
                level,
                entry,
                self.max_level,
                self.params.ef_construction,
                &mut visited,
            );
            self.visited = visited;
            self.link(id, per_level);
        }
        self.promote(id, level);
        Ok(id)
    }

    /// Inserts `vectors` in fixed batches of `batch_len`. Within a batch the
    /// neighbor searches run against the graph as it stood before the batch
    /// (in parallel under [`Exec::Parallel`]), then links are applied in id
    /// order. The graph depends on `batch_len` but not on the thread count,
    /// and it differs from the one plain [`HnswBuilder::insert`] would build.
    pub fn insert_batched(&mut self, vectors: Vec<Vector>, batch_len: usize, exec: Exec) -> Result<Vec<u32>> {
        let batch_len = batch_len.max(1);
        let mut ids = Vec::with_capacity(vectors.len());
        let mut rest = vectors.into_iter();
        // Seed the graph sequentially so early batches have something to search.
        while self.len() < batch_len {
            match rest.next() {
                Some(v) => ids.push(self.insert(v)?),
                None => return Ok(ids),
            }
        }
        let rest: Vec<Vector> = rest.collect();
        for chunk in rest.chunks(batch_len) {
            let entry = self.entry.expect("graph is seeded");
            let max_level = self.max_level;
            let mut batch = Vec::with_capacity(chunk.len());
            for v in chunk {
                batch.push(self.push_node(v.clone())?);
            }
            let ef = self.params.ef_construction;
            let g = self.graph();
            let found = map_ordered(exec, &batch, |&(id, level)| {
                let mut visited = Visited::new(g.vectors.len());
                g.candidates(g.vectors.get(id as usize).unwrap(), level, entry, max_level, ef, &mut visited)
            });
            for ((id, level), per_level) in batch.into_iter().zip(found) {
                self.link(id, per_level);
                self.promote(id, level);
                ids.push(id);
            }
        }
        Ok(ids)
    }

    pub fn freeze(self) -> HnswIndex {
        HnswIndex {
            params: self.params,
            store: self.store,
            links: self.links,
            entry: self.entry,
            max_level: self.max_level,
        }
    }
}

/// Immutable HNSW graph.
#[derive(Clone, Debug)]
pub struct HnswIndex {
    params: HnswParams,
    store: VectorStore,
    links: Links,
    entry: Option<u32>,
    max_level: usize,
}

impl HnswIndex {
    /// Sequential, deterministic construction.
    pub fn build(space: Space, params: HnswParams, vectors: Vec<Vector>) -> Result<Self> {
        let mut b = HnswBuilder::new(space, params)?;
        for v in vectors {
            b.insert(v)?;
        }
        Ok(b.freeze())
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn entry_point(&self) -> Option<u32> {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn level_of(&self, id: u32) -> usize {
        self.links[id as usize].len() - 1
    }

    pub fn neighbors(&self, id: u32, level: usize) -> &[u32] {
        &self.links[id as usize][level]
    }

    fn graph(&self) -> GraphRef<'_> {
        GraphRef { space: self.store.space(), vectors: self.store.vectors(), links: &self.links }
    }

    /// Approximate top-k with a level-0 beam of width `max(ef, k)`.
    pub fn search(&self, q: &Vector, k: usize, ef: usize) -> Result<Vec<SearchHit>> {
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        self.store.check_query(q)?;
        let g = self.graph();
        let mut ep = g.dist(q, entry);
        for l in (1..=self.max_level).rev() {
            ep = g.greedy(q, ep, l);
        }
        let mut visited = Visited::new(self.len());
        let found = g.search_layer(q, &[ep], ef.max(k), 0, &mut visited);
        let space = self.store.space();
        Ok(found.into_iter().take(k).map(|c| SearchHit { id: c.id, score: space.score_from_distance(c.key) }).collect())
    }

    pub fn search_batch(&self, queries: &[Vector], k: usize, ef: usize, exec: Exec) -> Result<Vec<Vec<SearchHit>>> {
        map_range(exec, queries.len(), |i| self.search(&queries[i], k, ef)).into_iter().collect()
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation found.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        let n = self.len();
        if n == 0 {
            return if self.entry.is_none() { Ok(()) } else { Err("empty index with entry point".into()) };
        }
        let entry = self.entry.ok_or("nonempty index without entry point")?;
        if self.level_of(entry) != self.max_level {
            return Err(format!("entry point {entry} is not on the top level {}", self.max_level));
        }
        for (id, levels) in self.links.iter().enumerate() {
            if levels.len() > self.max_level + 1 {
                return Err(format!("node {id} is above the max level"));
            }
            for (l, ns) in levels.iter().enumerate() {
                let cap = if l == 0 { self.params.m_max0 } else { self.params.m };
                if ns.len() > cap {
                    return Err(format!("node {id} has {} neighbors on level {l} (cap {cap})", ns.len()));
                }
                let mut seen = ns.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != ns.len() {
                    return Err(format!("node {id} has duplicate neighbors on level {l}"));
                }
                for &x in ns {
                    if x as usize >= n || x as usize == id {
                        return Err(format!("node {id} has invalid neighbor {x} on level {l}"));
                    }
                    if self.level_of(x) < l {
                        return Err(format!("edge {id}->{x} on level {l} leaves the level"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of nodes reachable from the entry point over level-0 edges.
    pub fn reachable_at_level0(&self) -> usize {
        let Some(entry) = self.entry else { return 0 };
        let mut seen = vec![false; self.len()];
        let mut stack = vec![entry];
        seen[entry as usize] = true;
        let mut count = 0;
        while let Some(x) = stack.pop() {
            count += 1;
            for &y in &self.links[x as usize][0] {
                if !std::mem::replace(&mut seen[y as usize], true) {
                    stack.push(y);
                }
            }
        }
        count
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.header(MAGIC, VERSION)?;
        let p = &self.params;
        w.u32(p.m as u32)?;
        w.u32(p.m_max0 as u32)?;
        w.u32(p.ef_construction as u32)?;
        w.f64(p.level_mult)?;
        w.u64(p.seed)?;
        w.u32(self.entry.unwrap_or(u32::MAX))?;
        w.u32(self.max_level as u32)?;
        w.len(self.links.len())?;
        for levels in &self.links {
            w.u32((levels.len() - 1) as u32)?;
            for ns in levels {
                w.u32s(ns)?;
            }
        }
        self.store.write_payload(&mut w)?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.header(MAGIC, VERSION)?;
        let params = HnswParams {
            m: r.u32()? as usize,
            m_max0: r.u32()? as usize,
            ef_construction: r.u32()? as usize,
            level_mult: r.f64()?,
            seed: r.u64()?,
        };
        params.validate().map_err(|e| Error::Format(e.to_string()))?;
        let entry = match r.u32()? {
            u32::MAX => None,
            e => Some(e),
        };
        let max_level = r.u32()? as usize;
        let n = r.len(u32::MAX as usize)?;
        let mut links = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let level = r.u32()? as usize;
            if level > MAX_LEVEL {
                return Err(Error::Format(format!("node level {level} out of range")));
            }
            links.push((0..=level).map(|_| r.u32s()).collect::<Result<Vec<_>>>()?);
        }
        let store = VectorStore::read_payload(&mut r)?;
        r.expect_end()?;
        if store.len() != n || entry.is_some_and(|e| e as usize >= n) || (n > 0) != entry.is_some() {
            return Err(Error::Format("graph and vector payload disagree".into()));
        }
        let index = HnswIndex { params, store, links, entry, max_level };
        index.check_structure().map_err(Error::Format)?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
