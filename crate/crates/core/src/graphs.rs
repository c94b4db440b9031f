//! Frozen graphs built once before training.
//!
//! Item indices are global throughout: a graph restricted to warm items keeps
//! the full `item_count × item_count` shape with cold rows and columns empty.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rayon::prelude::*;

use crate::dataset::{FeatureMatrix, KnowledgeGraph, Modality, SplitSpec, Triple};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Collaborative knowledge graph over a unified node space: users occupy
/// `[0, U)`, items `[U, U + I)`, other entities follow in entity order.
/// Relation `interact_relation` (the last one) links users to items.
#[derive(Clone, Debug, PartialEq)]
pub struct Ckg {
    pub user_count: usize,
    pub item_count: usize,
    pub node_count: usize,
    pub relation_count: usize,
    pub interact_relation: usize,
    /// Node id of every knowledge-graph entity.
    pub entity_nodes: Vec<usize>,
    /// Entity type group of each non-user node, used for negative sampling
    /// (users get `usize::MAX`).
    pub node_groups: Vec<usize>,
    pub triples: Vec<Triple>,
    /// How many leading triples come from the knowledge graph.
    pub kg_triple_count: usize,
}

fn type_group(ty: crate::dataset::EntityType) -> usize {
    use crate::dataset::EntityType::*;
    match ty {
        Item => 0,
        Brand => 1,
        Category => 2,
        Word => 3,
        External => 4,
    }
}

/// Merges the knowledge graph with `(u, Interact, i)` triples for every
/// training interaction.
pub fn build_ckg(train: &[(usize, usize)], user_count: usize, kg: &KnowledgeGraph) -> Result<Ckg> {
    kg.validate()?;
    let item_count = kg.item_count();
    let mut entity_nodes = vec![usize::MAX; kg.entity_count()];
    for (i, &e) in kg.item_alignment.iter().enumerate() {
        entity_nodes[e] = user_count + i;
    }
    let mut next = user_count + item_count;
    for node in entity_nodes.iter_mut().filter(|n| **n == usize::MAX) {
        *node = next;
        next += 1;
    }
    let mut node_groups = vec![usize::MAX; next];
    for (e, &node) in entity_nodes.iter().enumerate() {
        node_groups[node] = type_group(kg.entity_types[e]);
    }
    let interact_relation = kg.relation_count();
    let mut triples: Vec<Triple> = kg
        .triples
        .iter()
        .map(|t| Triple::new(entity_nodes[t.head], t.relation, entity_nodes[t.tail]))
        .collect();
    for &(u, i) in train {
        if u >= user_count || i >= item_count {
            return Err(Error::Alignment(format!(
                "interaction ({u}, {i}) has no aligned node ({user_count} users, {item_count} aligned items)"
            )));
        }
        triples.push(Triple::new(u, interact_relation, user_count + i));
    }
    Ok(Ckg {
        user_count,
        item_count,
        node_count: next,
        relation_count: interact_relation + 1,
        interact_relation,
        entity_nodes,
        node_groups,
        triples,
        kg_triple_count: kg.triples.len(),
    })
}

fn seq_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

fn row_norms(f: &Array2<f64>) -> Vec<f64> {
    f.rows()
        .into_iter()
        .map(|r| {
            let r = r.to_vec();
            seq_dot(&r, &r).sqrt()
        })
        .collect()
}

fn cosine_with(rows: &[Vec<f64>], norms: &[f64], a: usize, b: usize) -> f64 {
    if norms[a] == 0.0 || norms[b] == 0.0 {
        0.0
    } else {
        seq_dot(&rows[a], &rows[b]) / (norms[a] * norms[b])
    }
}

fn owned_rows(f: &Array2<f64>) -> Vec<Vec<f64>> {
    f.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Dense pairwise cosine similarity of feature rows. Rows with zero norm
/// have similarity 0 to everything, themselves included.
pub fn modality_similarity(features: &Array2<f64>) -> Array2<f64> {
    let rows = owned_rows(features);
    let norms = row_norms(features);
    let zero = norms.iter().filter(|&&n| n == 0.0).count();
    if zero > 0 {
        log::warn!("{zero} feature rows have zero norm; their similarities are 0");
    }
    let n = rows.len();
    Array2::from_shape_fn((n, n), |(a, b)| cosine_with(&rows, &norms, a, b))
}

/// Indices of the `k` largest `score(b)` over `candidates`, ties by smaller
/// index. `candidates` must be ascending.
fn top_k(candidates: impl Iterator<Item = usize>, k: usize, score: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.map(|b| (score(b), b)).collect();
    let cmp = |x: &(f64, usize), y: &(f64, usize)| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    let mut picked: Vec<usize> = scored.into_iter().map(|(_, b)| b).collect();
    picked.sort_unstable();
    picked
}

/// Row-wise top-`k` binarization of a similarity matrix, excluding the
/// diagonal. The result is not symmetrized.
pub fn knn_sparsify(sim: &Array2<f64>, k: usize) -> Result<CsrMatrix> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let n = sim.nrows();
    let rows = (0..n)
        .map(|a| {
            top_k((0..n).filter(|&b| b != a), k, |b| sim[[a, b]])
                .into_iter()
                .map(|b| (b, 1.0))
                .collect()
        })
        .collect();
    Ok(CsrMatrix::from_rows(n, n, rows))
}

/// Which rows of a kNN item graph to populate and what they may link to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnScope {
    /// Warm rows over warm candidates; cold rows empty.
    Training,
    /// Warm rows over warm candidates; cold rows over every other item.
    Inference,
}

/// kNN graph computed directly from features without materializing the
/// dense similarity matrix.
///
/// Warm rows only ever consider warm candidates, so the inference graph
/// restricted to warm rows equals the training graph and the inference mask
/// never has to remove a warm row's neighbor.
pub fn knn_item_graph(features: &Array2<f64>, k: usize, warm: &[bool], scope: KnnScope) -> Result<CsrMatrix> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let n = features.nrows();
    if warm.len() != n {
        return Err(Error::Alignment(format!("{} warm flags for {n} feature rows", warm.len())));
    }
    let rows = owned_rows(features);
    let norms = row_norms(features);
    let per_row: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|a| {
            if !warm[a] && scope == KnnScope::Training {
                return Vec::new();
            }
            let candidates = (0..n).filter(|&b| b != a && (warm[b] || !warm[a]));
            top_k(candidates, k, |b| cosine_with(&rows, &norms, a, b))
                .into_iter()
                .map(|b| (b, 1.0))
                .collect()
        })
        .collect();
    Ok(CsrMatrix::from_rows(n, n, per_row))
}

/// `D^{-1/2} A D^{-1/2}` with `D` from row sums. Entries touching a
/// zero-degree row or column are dropped.
pub fn sym_normalize(adj: &CsrMatrix) -> CsrMatrix {
    assert_eq!(adj.rows(), adj.cols(), "sym_normalize expects a square matrix");
    let deg = adj.row_sums();
    adj.map(|a, b, v| {
        if deg[a] > 0.0 && deg[b] > 0.0 {
            v / (deg[a].sqrt() * deg[b].sqrt())
        } else {
            0.0
        }
    })
}

/// Co-occurrence counts between users, keeping each row's top `k` by count
/// (ties by smaller index). Users sharing no items get empty rows.
pub fn build_user_user_graph(train: &[(usize, usize)], user_count: usize, item_count: usize, k: usize) -> Result<CsrMatrix> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let mut user_items = vec![Vec::new(); user_count];
    let mut item_users = vec![Vec::new(); item_count];
    for &(u, i) in train {
        user_items[u].push(i);
        item_users[i].push(u);
    }
    let per_row: Vec<Vec<(usize, f64)>> = (0..user_count)
        .into_par_iter()
        .map(|a| {
            let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
            for &i in &user_items[a] {
                for &b in &item_users[i] {
                    if b != a {
                        *counts.entry(b).or_default() += 1;
                    }
                }
            }
            let picked = top_k(counts.keys().copied(), k, |b| counts[&b] as f64);
            picked.into_iter().map(|b| (b, counts[&b] as f64)).collect()
        })
        .collect();
    Ok(CsrMatrix::from_rows(user_count, user_count, per_row))
}

/// Inference mask: `M(a, b) = 0` exactly when `a` is warm and `b` is cold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceMask {
    cold: Vec<bool>,
}

impl InferenceMask {
    pub fn new(warm: &[usize], cold: &[usize], item_count: usize) -> Result<Self> {
        let mut seen = vec![0u8; item_count];
        let mut flags = vec![false; item_count];
        for (&i, is_cold) in warm.iter().map(|i| (i, false)).chain(cold.iter().map(|i| (i, true))) {
            if i >= item_count {
                return Err(Error::Argument(format!("item {i} out of range")));
            }
            seen[i] += 1;
            flags[i] = is_cold;
        }
        if let Some(i) = seen.iter().position(|&s| s != 1) {
            return Err(Error::Argument(format!(
                "warm and cold sets must partition the items (item {i} appears {} times)",
                seen[i]
            )));
        }
        Ok(Self { cold: flags })
    }

    pub fn from_warm_flags(warm: &[bool]) -> Self {
        Self {
            cold: warm.iter().map(|w| !w).collect(),
        }
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        if !self.cold[a] && self.cold[b] {
            0.0
        } else {
            1.0
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.cold.len();
        Array2::from_shape_fn((n, n), |(a, b)| self.get(a, b))
    }

    /// Elementwise product with a binary graph.
    pub fn rectify(&self, graph: &CsrMatrix) -> CsrMatrix {
        graph.map(|a, b, v| v * self.get(a, b))
    }
}

/// Per-modality item graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemGraphs {
    pub modality: Modality,
    /// Warm-only binary kNN graph used during training.
    pub train_binary: CsrMatrix,
    pub train_normalized: CsrMatrix,
    /// Expanded binary graph over all items.
    pub inference_binary: CsrMatrix,
    /// Expanded graph after masking and re-normalization.
    pub inference_normalized: CsrMatrix,
}

impl ItemGraphs {
    fn from_binaries(modality: Modality, train_binary: CsrMatrix, inference_binary: CsrMatrix, warm: &[bool]) -> Self {
        let mask = InferenceMask::from_warm_flags(warm);
        let train_normalized = sym_normalize(&train_binary);
        let inference_normalized = sym_normalize(&mask.rectify(&inference_binary));
        Self {
            modality,
            train_binary,
            train_normalized,
            inference_binary,
            inference_normalized,
        }
    }
}

/// Every frozen structure the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenGraphBundle {
    pub user_count: usize,
    pub item_count: usize,
    pub k_item: usize,
    pub k_user: usize,
    pub warm: Vec<bool>,
    /// Training interactions, `user × item` 0/1.
    pub interaction: CsrMatrix,
    pub ckg: Ckg,
    pub item_graphs: Vec<ItemGraphs>,
    pub user_user: CsrMatrix,
}

impl FrozenGraphBundle {
    pub fn build(
        split: &SplitSpec,
        kg: &KnowledgeGraph,
        features: &[FeatureMatrix],
        k_item: usize,
        k_user: usize,
    ) -> Result<Self> {
        let (u, n) = (split.user_count, split.item_count);
        if kg.item_count() != n {
            return Err(Error::Alignment(format!(
                "knowledge graph aligns {} items but the split has {n}",
                kg.item_count()
            )));
        }
        let warm = split.is_warm();
        let interaction = CsrMatrix::from_triplets(
            u,
            n,
            &split.train.iter().map(|&(a, b)| (a, b, 1.0)).collect::<Vec<_>>(),
        );
        let ckg = build_ckg(&split.train, u, kg)?;
        let mut item_graphs = Vec::new();
        for f in features {
            if f.item_count() != n {
                return Err(Error::Alignment(format!(
                    "{} features have {} rows for {n} items",
                    f.modality,
                    f.item_count()
                )));
            }
            let train = knn_item_graph(&f.values, k_item, &warm, KnnScope::Training)?;
            let inference = knn_item_graph(&f.values, k_item, &warm, KnnScope::Inference)?;
            item_graphs.push(ItemGraphs::from_binaries(f.modality, train, inference, &warm));
        }
        let user_user = build_user_user_graph(&split.train, u, n, k_user)?;
        Ok(Self {
            user_count: u,
            item_count: n,
            k_item,
            k_user,
            warm,
            interaction,
            ckg,
            item_graphs,
            user_user,
        })
    }

    pub fn item_graph(&self, m: Modality) -> Option<&ItemGraphs> {
        self.item_graphs.iter().find(|g| g.modality == m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut w = BufWriter::new(file);
        self.encode(&mut w).map_err(|e| Error::io(ctx(), e))?;
        w.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::decode(&mut BufReader::new(file)).map_err(|e| match e {
            DecodeError::Io(io) => Error::io(format!("reading {}", path.display()), io),
            DecodeError::Format(msg) => Error::parse(path, 0, msg),
        })
    }

    fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        w.write_u32::<LittleEndian>(BUNDLE_VERSION)?;
        for v in [self.user_count, self.item_count, self.k_item, self.k_user] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        w.write_u32::<LittleEndian>(self.item_graphs.len() as u32)?;
        for g in &self.item_graphs {
            w.write_u8(g.modality.index() as u8)?;
        }
        for &f in &self.warm {
            w.write_u8(f as u8)?;
        }
        let c = &self.ckg;
        for v in [c.node_count, c.relation_count, c.interact_relation, c.kg_triple_count] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        write_usizes(w, &c.entity_nodes)?;
        write_usizes(w, &c.node_groups)?;
        w.write_u64::<LittleEndian>(c.triples.len() as u64)?;
        for t in &c.triples {
            for v in [t.head, t.relation, t.tail] {
                w.write_u64::<LittleEndian>(v as u64)?;
            }
        }
        write_csr(w, &self.interaction)?;
        write_csr(w, &self.user_user)?;
        for g in &self.item_graphs {
            write_csr(w, &g.train_binary)?;
            write_csr(w, &g.inference_binary)?;
        }
        Ok(())
    }

    fn decode(r: &mut impl Read) -> std::result::Result<Self, DecodeError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(DecodeError::Format("not a graph bundle".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != BUNDLE_VERSION {
            return Err(DecodeError::Format(format!("unsupported bundle version {version}")));
        }
        let mut header = [0usize; 4];
        for h in &mut header {
            *h = r.read_u64::<LittleEndian>()? as usize;
        }
        let [user_count, item_count, k_item, k_user] = header;
        let n_graphs = r.read_u32::<LittleEndian>()? as usize;
        let mut modalities = Vec::with_capacity(n_graphs);
        for _ in 0..n_graphs {
            modalities.push(match r.read_u8()? {
                0 => Modality::Text,
                1 => Modality::Image,
                t => return Err(DecodeError::Format(format!("unknown modality tag {t}"))),
            });
        }
        let mut warm = Vec::with_capacity(item_count);
        for _ in 0..item_count {
            warm.push(r.read_u8()? != 0);
        }
        let mut ckg_header = [0usize; 4];
        for h in &mut ckg_header {
            *h = r.read_u64::<LittleEndian>()? as usize;
        }
        let [node_count, relation_count, interact_relation, kg_triple_count] = ckg_header;
        let entity_nodes = read_usizes(r)?;
        let node_groups = read_usizes(r)?;
        let n_triples = r.read_u64::<LittleEndian>()? as usize;
        let mut triples = Vec::with_capacity(n_triples);
        for _ in 0..n_triples {
            let h = r.read_u64::<LittleEndian>()? as usize;
            let rel = r.read_u64::<LittleEndian>()? as usize;
            let t = r.read_u64::<LittleEndian>()? as usize;
            if h >= node_count || t >= node_count || rel >= relation_count {
                return Err(DecodeError::Format("triple out of range".into()));
            }
            triples.push(Triple::new(h, rel, t));
        }
        let ckg = Ckg {
            user_count,
            item_count,
            node_count,
            relation_count,
            interact_relation,
            entity_nodes,
            node_groups,
            triples,
            kg_triple_count,
        };
        let interaction = read_csr(r)?;
        let user_user = read_csr(r)?;
        let mut item_graphs = Vec::with_capacity(n_graphs);
        for m in modalities {
            let train = read_csr(r)?;
            let inference = read_csr(r)?;
            if train.rows() != item_count || inference.rows() != item_count {
                return Err(DecodeError::Format("item graph shape mismatch".into()));
            }
            item_graphs.push(ItemGraphs::from_binaries(m, train, inference, &warm));
        }
        if interaction.rows() != user_count || interaction.cols() != item_count || user_user.rows() != user_count {
            return Err(DecodeError::Format("interaction or user graph shape mismatch".into()));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(DecodeError::Format("trailing bytes after bundle".into()));
        }
        Ok(Self {
            user_count,
            item_count,
            k_item,
            k_user,
            warm,
            interaction,
            ckg,
            item_graphs,
            user_user,
        })
    }
}

const BUNDLE_MAGIC: &[u8; 4] = b"CGFB";
const BUNDLE_VERSION: u32 = 1;

enum DecodeError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for DecodeError {
    fn from(e: std::io::Error) -> Self {
        DecodeError::Io(e)
    }
}

fn write_usizes(w: &mut impl Write, v: &[usize]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for &x in v {
        w.write_u64::<LittleEndian>(x as u64)?;
    }
    Ok(())
}

fn read_usizes(r: &mut impl Read) -> std::result::Result<Vec<usize>, DecodeError> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        out.push(r.read_u64::<LittleEndian>()? as usize);
    }
    Ok(out)
}

fn write_csr(w: &mut impl Write, m: &CsrMatrix) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(m.rows() as u64)?;
    w.write_u64::<LittleEndian>(m.cols() as u64)?;
    write_usizes(w, m.indptr())?;
    write_usizes(w, m.indices())?;
    for &v in m.values() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_csr(r: &mut impl Read) -> std::result::Result<CsrMatrix, DecodeError> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let indptr = read_usizes(r)?;
    let indices = read_usizes(r)?;
    let mut values = Vec::with_capacity(indices.len());
    for _ in 0..indices.len() {
        values.push(r.read_f64::<LittleEndian>()?);
    }
    CsrMatrix::from_raw(rows, cols, indptr, indices, values).map_err(DecodeError::Format)
}
