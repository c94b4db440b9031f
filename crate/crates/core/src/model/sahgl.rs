//! Side-information-aware heterogeneous graph learning: behavior and modality
//! convolutions over the interaction graph, knowledge-graph attention, and
//! importance-weighted fusion.

use std::rc::Rc;

use crate::autograd::{Mat, Tape, Var};
use crate::sparse::SparseOperator;

use super::context::KgIndex;

/// Layer-wise propagation over the interaction graph. Layer-0 item rows are
/// multiplied by `item_mask`, so items without training edges come out as
/// exact zero vectors. Returns the pooled `(users, items)` embeddings,
/// `Σ_{l=0..L} e^l / L` (or `/(L + 1)` with `pool_mean`).
pub fn behavior_conv(
    tape: &mut Tape,
    ui: &Rc<SparseOperator>,
    iu: &Rc<SparseOperator>,
    users: Var,
    items: Var,
    item_mask: &Rc<Mat>,
    layers: usize,
    pool_mean: bool,
) -> (Var, Var) {
    let mut eu = users;
    let mut ei = tape.mul_const(items, item_mask.clone());
    let (mut su, mut si) = (eu, ei);
    for _ in 0..layers {
        let next_u = tape.spmm(ui.clone(), ei);
        let next_i = tape.spmm(iu.clone(), eu);
        eu = next_u;
        ei = next_i;
        su = tape.add(su, eu);
        si = tape.add(si, ei);
    }
    let div = if pool_mean { layers + 1 } else { layers } as f64;
    (tape.scale(su, 1.0 / div), tape.scale(si, 1.0 / div))
}

/// Projects raw item features, aggregates them into users, then back into
/// items. `dropout` is an optional inverted-dropout mask on the projection.
pub fn modality_conv(
    tape: &mut Tape,
    ui: &Rc<SparseOperator>,
    iu: &Rc<SparseOperator>,
    features: &Rc<Mat>,
    weight: Var,
    bias: Var,
    dropout: Option<Rc<Mat>>,
) -> (Var, Var) {
    let lin = tape.const_matmul(features.clone(), weight);
    let mut proj = tape.add_row(lin, bias);
    if let Some(mask) = dropout {
        proj = tape.mul_const(proj, mask);
    }
    let xu = tape.spmm(ui.clone(), proj);
    let xi = tape.spmm(iu.clone(), xu);
    (xu, xi)
}

/// Attention logits `π(h, r, t) = (W_r x_t)ᵀ tanh(W_r x_h + x_r)` for every
/// indexed triple, as a column.
pub fn attention_logits(tape: &mut Tape, kg: &KgIndex, x: Var, relation_emb: Var, relation_w: Var) -> Var {
    let xt = tape.gather(x, kg.tails.clone());
    let xh = tape.gather(x, kg.heads.clone());
    let wt = tape.relation_matvec(relation_w, kg.groups.clone(), xt);
    let wh = tape.relation_matvec(relation_w, kg.groups.clone(), xh);
    let xr = tape.gather(relation_emb, kg.relations.clone());
    let inner = tape.add(wh, xr);
    let act = tape.tanh(inner);
    tape.row_dot(wt, act)
}

/// One round of knowledge-aware attention with the bi-interaction
/// aggregator:
/// `LeakyReLU((x_h + x_N) W1) + LeakyReLU((x_h ⊙ x_N) W2)` where `x_N` is the
/// attention-weighted sum of tail embeddings. Nodes without outgoing triples
/// get `x_N = 0`.
pub fn kg_attention(
    tape: &mut Tape,
    kg: &KgIndex,
    x: Var,
    relation_emb: Var,
    relation_w: Var,
    w1: Var,
    w2: Var,
    slope: f64,
) -> Var {
    let logits = attention_logits(tape, kg, x, relation_emb, relation_w);
    let alpha = tape.segment_softmax(logits, kg.offsets.clone());
    let xt = tape.gather(x, kg.tails.clone());
    let msgs = tape.mul_col(xt, alpha);
    let neigh = tape.scatter_add(msgs, kg.heads.clone(), kg.node_count);
    let sum = tape.add(x, neigh);
    let prod = tape.mul(x, neigh);
    let a = tape.matmul(sum, w1);
    let b = tape.matmul(prod, w2);
    let a = tape.leaky_relu(a, slope);
    let b = tape.leaky_relu(b, slope);
    tape.add(a, b)
}

/// Weighted sum of optional branches; `None` branches are skipped.
pub fn fuse(tape: &mut Tape, branches: &[(Option<Var>, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in branches {
        let Some(v) = v else { continue };
        let term = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.expect("fusion needs at least one enabled branch")
}

/// Momentum update of the modality importance pair toward the softmax of
/// the mean discriminator scores. Non-finite scores leave `beta` unchanged.
pub fn update_modality_importance(beta: [f64; 2], d_text: f64, d_image: f64, eta: f64) -> [f64; 2] {
    if !d_text.is_finite() || !d_image.is_finite() {
        log::warn!("skipping modality importance update on non-finite discriminator output");
        return beta;
    }
    let m = d_text.max(d_image);
    let (et, ei) = ((d_text - m).exp(), (d_image - m).exp());
    let target = [et / (et + ei), ei / (et + ei)];
    [0, 1].map(|m| (eta * beta[m] + (1.0 - eta) * target[m]).clamp(0.0, 1.0))
}
