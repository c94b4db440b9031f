use std::rc::Rc;

use ndarray::Array2;

use crate::autograd::{Mat, RelationGroups};
use crate::dataset::{FeatureMatrix, Modality};
use crate::graphs::{Ckg, FrozenGraphBundle};
use crate::sparse::{CsrMatrix, SparseOperator};

/// Collaborative knowledge graph triples grouped by head node, as consumed
/// by the attention layer.
#[derive(Debug)]
pub struct KgIndex {
    pub node_count: usize,
    pub heads: Rc<[usize]>,
    pub relations: Rc<[usize]>,
    pub tails: Rc<[usize]>,
    /// Triples with head `h` occupy `offsets[h]..offsets[h + 1]`.
    pub offsets: Rc<[usize]>,
    pub groups: Rc<RelationGroups>,
}

impl KgIndex {
    pub fn new(ckg: &Ckg) -> Self {
        let mut triples = ckg.triples.clone();
        triples.sort_by_key(|t| t.head);
        let mut offsets = vec![0usize; ckg.node_count + 1];
        for t in &triples {
            offsets[t.head + 1] += 1;
        }
        for h in 0..ckg.node_count {
            offsets[h + 1] += offsets[h];
        }
        let relations: Vec<usize> = triples.iter().map(|t| t.relation).collect();
        Self {
            node_count: ckg.node_count,
            heads: triples.iter().map(|t| t.head).collect(),
            tails: triples.iter().map(|t| t.tail).collect(),
            groups: Rc::new(RelationGroups::from_relations(&relations, ckg.relation_count)),
            relations: relations.into(),
            offsets: offsets.into(),
        }
    }
}

/// Frozen operators for one forward pass. Training and inference differ in
/// the item-item graphs and possibly in the interaction edges.
pub struct GraphContext {
    pub user_count: usize,
    pub item_count: usize,
    /// `user × item`, aggregating item rows into users.
    pub ui: Rc<SparseOperator>,
    /// `item × user`, aggregating user rows into items.
    pub iu: Rc<SparseOperator>,
    pub item_item: Vec<(Modality, Rc<SparseOperator>)>,
    /// Row-softmax weights of the user co-occurrence graph; empty rows are
    /// replaced by the identity.
    pub user_user: Rc<SparseOperator>,
    pub kg: Rc<KgIndex>,
    /// `item × 1`, one for items with at least one training interaction.
    pub trained_items: Rc<Mat>,
    pub features: Vec<(Modality, Rc<Mat>)>,
}

/// Aggregation operators for a bipartite edge list. One-sided scaling uses
/// `1/sqrt(|N|)` of the receiving node; symmetric scaling uses both degrees.
pub fn bipartite_operators(
    edges: &[(usize, usize)],
    users: usize,
    items: usize,
    symmetric: bool,
) -> (SparseOperator, SparseOperator) {
    let mut du = vec![0usize; users];
    let mut di = vec![0usize; items];
    for &(u, i) in edges {
        du[u] += 1;
        di[i] += 1;
    }
    let weight = |recv: usize, send: usize| {
        if symmetric {
            1.0 / ((recv * send) as f64).sqrt()
        } else {
            1.0 / (recv as f64).sqrt()
        }
    };
    let ui: Vec<(usize, usize, f64)> = edges.iter().map(|&(u, i)| (u, i, weight(du[u], di[i]))).collect();
    let iu: Vec<(usize, usize, f64)> = edges.iter().map(|&(u, i)| (i, u, weight(di[i], du[u]))).collect();
    (
        SparseOperator::new(CsrMatrix::from_triplets(users, items, &ui)),
        SparseOperator::new(CsrMatrix::from_triplets(items, users, &iu)),
    )
}

/// Row softmax over the nonzero entries of a count graph; empty rows become
/// identity rows so those users keep their embedding.
pub fn user_attention_operator(counts: &CsrMatrix) -> CsrMatrix {
    let n = counts.rows();
    let rows = (0..n)
        .map(|a| {
            let (cols, vals) = counts.row(a);
            if cols.is_empty() {
                return vec![(a, 1.0)];
            }
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            cols.iter().zip(exps).map(|(&c, e)| (c, e / z)).collect()
        })
        .collect();
    CsrMatrix::from_rows(n, n, rows)
}

/// Which item-item graphs to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
}

impl GraphContext {
    /// Builds operators from a bundle. `extra_edges` are added to the
    /// interaction graph (known cold interactions in the normal cold setting).
    pub fn new(
        bundle: &FrozenGraphBundle,
        features: &[FeatureMatrix],
        phase: Phase,
        extra_edges: &[(usize, usize)],
        symmetric_norm: bool,
    ) -> Self {
        let (u, n) = (bundle.user_count, bundle.item_count);
        let mut edges: Vec<(usize, usize)> = bundle.interaction.iter().map(|(a, b, _)| (a, b)).collect();
        edges.extend_from_slice(extra_edges);
        edges.sort_unstable();
        edges.dedup();
        let (ui, iu) = bipartite_operators(&edges, u, n, symmetric_norm);
        let item_item = bundle
            .item_graphs
            .iter()
            .map(|g| {
                let m = match phase {
                    Phase::Training => g.train_normalized.clone(),
                    Phase::Inference => g.inference_normalized.clone(),
                };
                (g.modality, Rc::new(SparseOperator::new(m)))
            })
            .collect();
        // Only training edges count: warm items whose interactions all went
        // to validation or test have untrained ID embeddings too.
        let mut has_train = vec![false; n];
        for (_, i, _) in bundle.interaction.iter() {
            has_train[i] = true;
        }
        let trained = Array2::from_shape_fn((n, 1), |(i, _)| if has_train[i] { 1.0 } else { 0.0 });
        Self {
            user_count: u,
            item_count: n,
            ui: Rc::new(ui),
            iu: Rc::new(iu),
            item_item,
            user_user: Rc::new(SparseOperator::new(user_attention_operator(&bundle.user_user))),
            kg: Rc::new(KgIndex::new(&bundle.ckg)),
            trained_items: Rc::new(trained),
            features: features.iter().map(|f| (f.modality, Rc::new(f.values.clone()))).collect(),
        }
    }

    pub fn feature(&self, m: Modality) -> Option<&Rc<Mat>> {
        self.features.iter().find(|(fm, _)| *fm == m).map(|(_, f)| f)
    }

    pub fn item_graph(&self, m: Modality) -> Option<&Rc<SparseOperator>> {
        self.item_item.iter().find(|(gm, _)| *gm == m).map(|(_, g)| g)
    }
}
