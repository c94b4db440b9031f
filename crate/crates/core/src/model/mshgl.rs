//! Modality-specific homogeneous graph learning: item-item propagation per
//! modality, user-user attention propagation and cross-modality
//! self-attention.

use std::rc::Rc;

use crate::autograd::{Tape, Var};
use crate::sparse::SparseOperator;

/// `layers` rounds of `h ← G h`; the last layer is returned unpooled.
pub fn item_item_propagate(tape: &mut Tape, graph: &Rc<SparseOperator>, items: Var, layers: usize) -> Var {
    let mut h = items;
    for _ in 0..layers {
        h = tape.spmm(graph.clone(), h);
    }
    h
}

/// `layers` rounds over the precomputed user attention operator (see
/// [`user_attention_operator`](super::context::user_attention_operator)).
pub fn user_user_propagate(tape: &mut Tape, weights: &Rc<SparseOperator>, users: Var, layers: usize) -> Var {
    let mut z = users;
    for _ in 0..layers {
        z = tape.spmm(weights.clone(), z);
    }
    z
}

/// Multi-head attention across modality representations of each item.
///
/// For source modality `m` and head `h`, the weights over `m'` are
/// `softmax((e^m W^Q_h) · (e^{m'} W^K_h) / sqrt(d/H))` and the head output is
/// the weighted sum of the `h`-th column block of `e^{m'}`. Heads are
/// concatenated back to width `d`, and the result is averaged over `m`.
pub fn modality_self_attention(tape: &mut Tape, reps: &[Var], wq: Var, wk: Var, heads: usize) -> Var {
    assert!(!reps.is_empty(), "self-attention needs at least one modality");
    if reps.len() == 1 {
        return reps[0];
    }
    let d = tape.value(reps[0]).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let queries: Vec<Var> = reps.iter().map(|&e| tape.matmul(e, wq)).collect();
    let keys: Vec<Var> = reps.iter().map(|&e| tape.matmul(e, wk)).collect();
    let mut fused = Vec::with_capacity(reps.len());
    for q_full in &queries {
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(*q_full, h * dh, dh);
            let logits: Vec<Var> = keys
                .iter()
                .map(|&k_full| {
                    let k = tape.slice_cols(k_full, h * dh, dh);
                    let s = tape.row_dot(q, k);
                    tape.scale(s, scale)
                })
                .collect();
            let logits = tape.concat_cols(&logits);
            let alpha = tape.row_softmax(logits);
            let mut out: Option<Var> = None;
            for (j, &e) in reps.iter().enumerate() {
                let a = tape.slice_cols(alpha, j, 1);
                let v = tape.slice_cols(e, h * dh, dh);
                let term = tape.mul_col(v, a);
                out = Some(match out {
                    Some(o) => tape.add(o, term),
                    None => term,
                });
            }
            head_outputs.push(out.expect("at least one modality"));
        }
        fused.push(tape.concat_cols(&head_outputs));
    }
    let mut acc = fused[0];
    for &f in &fused[1..] {
        acc = tape.add(acc, f);
    }
    tape.scale(acc, 1.0 / reps.len() as f64)
}
