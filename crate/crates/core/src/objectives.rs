//! Training objectives: BPR, TransR-style knowledge loss, the contrastive
//! term, and the adversarial game between modality-derived interaction
//! graphs and a Gumbel-augmented interaction graph.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Mat, RelationGroups, Tape, Var};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Cosine similarity between every selected user row and item row.
/// Zero-norm rows give zero entries.
pub fn virtual_interaction_graph(tape: &mut Tape, users: Var, items: Var, rows: &Rc<[usize]>, cols: &Rc<[usize]>) -> Var {
    let u = tape.gather(users, rows.clone());
    let i = tape.gather(items, cols.clone());
    let u = tape.row_normalize(u);
    let i = tape.row_normalize(i);
    tape.matmul_t(u, i)
}

/// Draws `Uniform(0,1)` values strictly inside the interval.
pub fn open_uniforms(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            break u;
        }
    })
}

/// Gumbel-softmax relaxation of `interactions` with the given uniforms, plus
/// `gamma` times the cosine similarity of the final embeddings.
pub fn augment_with_uniforms(interactions: &Mat, uniforms: &Mat, similarity: &Mat, tau: f64, gamma: f64) -> Mat {
    assert_eq!(interactions.dim(), uniforms.dim());
    assert_eq!(interactions.dim(), similarity.dim());
    let mut out = interactions.clone();
    for ((mut row, u), s) in out.rows_mut().into_iter().zip(uniforms.rows()).zip(similarity.rows()) {
        for (x, &p) in row.iter_mut().zip(u) {
            *x = (*x - (-p.ln()).ln()) / tau;
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row /= z;
        row.scaled_add(gamma, &s);
    }
    out
}

/// Cosine similarity matrix between two row sets.
pub fn cosine_matrix(a: &Mat, b: &Mat) -> Mat {
    let normalize = |m: &Mat| {
        let mut m = m.clone();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            } else {
                row.fill(0.0);
            }
        }
        m
    };
    normalize(a).dot(&normalize(b).t())
}

/// Augmented objective graph with fresh Gumbel noise.
pub fn augment_objective_graph(
    interactions: &Mat,
    user_emb: &Mat,
    item_emb: &Mat,
    tau: f64,
    gamma: f64,
    rng: &mut impl Rng,
) -> Mat {
    let (r, c) = interactions.dim();
    let uniforms = open_uniforms(rng, r, c);
    let sim = cosine_matrix(user_emb, item_emb);
    augment_with_uniforms(interactions, &uniforms, &sim, tau, gamma)
}

/// Discriminator parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Batch-norm behavior of the discriminator.
pub enum DiscMode {
    /// Batch statistics, plus an optional dropout keep-mask (`rows × 1`).
    Train { dropout: Option<Mat> },
    Eval { running_mean: f64, running_var: f64 },
}

impl DiscMode {
    pub fn eval(running_mean: f64, running_var: f64) -> Self {
        DiscMode::Eval {
            running_mean,
            running_var,
        }
    }
}

/// Scores plus the intermediate values needed for the gradient penalty.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub scores: Var,
    /// Pre-activation `x W + b`.
    pub pre_activation: Mat,
    pub batch_mean: f64,
    pub batch_var: f64,
    pub inv_std: f64,
    pub dropout: Option<Mat>,
}

/// `sigmoid(Drop(BN(LeakyReLU(x W + b))))` over the rows of `x`.
pub fn discriminator_forward(tape: &mut Tape, x: Var, p: &DiscVars, mode: DiscMode, slope: f64) -> Result<DiscOutput> {
    let (rows, cols) = tape.value(x).dim();
    let expected = tape.value(p.weight).nrows();
    if cols != expected {
        return Err(Error::Config(format!("discriminator expects {expected} input columns, got {cols}")));
    }
    let lin = tape.matmul(x, p.weight);
    let z = tape.add_row(lin, p.bias);
    let pre_activation = tape.value(z).clone();
    let a = tape.leaky_relu(z, slope);
    let av = tape.value(a);
    let batch_mean = av.mean().unwrap_or(0.0);
    let batch_var = av.mapv(|v| (v - batch_mean) * (v - batch_mean)).mean().unwrap_or(0.0);
    let (normalized, inv_std, dropout) = match mode {
        DiscMode::Train { dropout } => {
            let n = tape.batch_norm(a, p.gamma, p.beta, BN_EPS);
            (n, 1.0 / (batch_var + BN_EPS).sqrt(), dropout)
        }
        DiscMode::Eval {
            running_mean,
            running_var,
        } => {
            let inv = 1.0 / (running_var + BN_EPS).sqrt();
            let shift = tape.constant(Array2::from_elem((1, 1), -running_mean));
            let c = tape.add_row(a, shift);
            let c = tape.scale(c, inv);
            let g = tape.mul_scalar(c, p.gamma);
            (tape.add_row(g, p.beta), inv, None)
        }
    };
    let mut h = normalized;
    if let Some(mask) = &dropout {
        assert_eq!(mask.dim(), (rows, 1));
        h = tape.mul_const(h, Rc::new(mask.clone()));
    }
    let scores = tape.sigmoid(h);
    Ok(DiscOutput {
        scores,
        pre_activation,
        batch_mean,
        batch_var,
        inv_std,
        dropout,
    })
}

/// Inverted-dropout keep-mask for discriminator rows.
pub fn disc_dropout_mask(rng: &mut impl Rng, rows: usize, p: f64) -> Option<Mat> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn((rows, 1), |_| if rng.gen::<f64>() < p { 0.0 } else { keep }))
}

/// Exponential moving average of the batch statistics.
pub fn update_running_stats(mean: &mut f64, var: &mut f64, out: &DiscOutput) {
    *mean = (1.0 - BN_MOMENTUM) * *mean + BN_MOMENTUM * out.batch_mean;
    *var = (1.0 - BN_MOMENTUM) * *var + BN_MOMENTUM * out.batch_var;
}

/// Per-row interpolation `ε a + (1 − ε) b` with `ε ~ Uniform(0,1)`.
pub fn interpolate(a: &Mat, b: &Mat, eps: &[f64]) -> Mat {
    let mut out = b.clone();
    for ((mut o, ra), &e) in out.rows_mut().into_iter().zip(a.rows()).zip(eps) {
        o.zip_mut_with(&ra, |ob, &va| *ob = e * va + (1.0 - e) * *ob);
    }
    out
}

/// Input-gradient norm of each discriminator row, with batch statistics
/// treated as constants:
/// `‖∂D/∂x‖ = |s (1 − s) · m · γ · inv_std · leaky'(z)| · ‖W‖`.
/// Differentiable with respect to the discriminator parameters.
pub fn gradient_norms(tape: &mut Tape, out: &DiscOutput, p: &DiscVars, slope: f64) -> Var {
    let rows = out.pre_activation.nrows();
    let scale = Array2::from_shape_fn((rows, 1), |(r, _)| {
        let d = if out.pre_activation[[r, 0]] >= 0.0 { 1.0 } else { slope };
        let m = out.dropout.as_ref().map_or(1.0, |m| m[[r, 0]]);
        d * m * out.inv_std
    });
    let ones = tape.constant(Array2::ones((rows, 1)));
    let one_minus = tape.sub(ones, out.scores);
    let ds = tape.mul(out.scores, one_minus);
    let g = tape.mul_const(ds, Rc::new(scale));
    let g = tape.mul_scalar(g, p.gamma);
    let wn = tape.norm(p.weight);
    let g = tape.mul_scalar(g, wn);
    tape.abs(g)
}

/// `mean_rows (‖∇D‖ − 1)²`; rows with a non-finite norm are dropped.
pub fn gradient_penalty(tape: &mut Tape, norms: Var) -> Var {
    let values = tape.value(norms).clone();
    let finite: Vec<bool> = values.iter().map(|v| v.is_finite()).collect();
    let kept = finite.iter().filter(|&&f| f).count();
    if kept < finite.len() {
        log::warn!("gradient penalty: skipping {} non-finite rows", finite.len() - kept);
    }
    if kept == 0 {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let idx: Rc<[usize]> = (0..finite.len()).filter(|&r| finite[r]).collect();
    let n = tape.gather(norms, idx);
    let ones = tape.constant(Array2::ones((kept, 1)));
    let diff = tape.sub(n, ones);
    let sq = tape.mul(diff, diff);
    tape.mean(sq)
}

/// `−Σ_m Σ_u log[exp s(ĕ_u, x_u) / Σ_{u'} (exp s(ĕ_{u'}, x_u) + exp s(x_{u'}, x_u))]`
/// for one modality, with cosine `s` divided by `temperature`. `batch` holds
/// the anchor users; the negatives range over every user.
pub fn contrastive_loss(tape: &mut Tape, final_users: Var, modality_users: Var, batch: &Rc<[usize]>, temperature: f64) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Argument("contrastive loss over an empty batch".into()));
    }
    let ne = tape.row_normalize(final_users);
    let nx = tape.row_normalize(modality_users);
    let q = tape.gather(nx, batch.clone());
    let pos_e = tape.gather(ne, batch.clone());
    let pos = tape.row_dot(pos_e, q);
    let s1 = tape.matmul_t(q, ne);
    let s2 = tape.matmul_t(q, nx);
    let logits = tape.concat_cols(&[s1, s2]);
    // Cosines are at most 1, so shifting by 1/T keeps exp bounded.
    let inv_t = 1.0 / temperature;
    let l = tape.scale(logits, inv_t);
    let width = tape.value(l).ncols();
    let row = tape.constant(Array2::from_elem((1, width), -inv_t));
    let shifted = tape.add_row(l, row);
    let e = tape.exp(shifted);
    let z = tape.row_sum(e);
    let lse = tape.ln(z);
    let pos = tape.scale(pos, inv_t);
    let shift = tape.constant(Array2::from_elem((1, 1), -inv_t));
    let pos = tape.add_row(pos, shift);
    let per_user = tape.sub(lse, pos);
    Ok(tape.sum(per_user))
}

/// Knowledge quadruple `(head, relation, positive tail, negative tail)` in
/// collaborative-graph node ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KgQuad {
    pub head: usize,
    pub relation: usize,
    pub pos_tail: usize,
    pub neg_tail: usize,
}

/// `Σ −ln σ(sc(h,r,t_p) − sc(h,r,t_n))` with
/// `sc(h,r,t) = −‖W_r e_h + e_r − W_r e_t‖²`.
pub fn kg_triplet_loss(tape: &mut Tape, nodes: Var, relation_emb: Var, relation_w: Var, quads: &[KgQuad]) -> Var {
    if quads.is_empty() {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let relation_count = tape.value(relation_emb).nrows();
    let rels: Vec<usize> = quads.iter().map(|q| q.relation).collect();
    let groups = Rc::new(RelationGroups::from_relations(&rels, relation_count));
    let idx = |f: fn(&KgQuad) -> usize| -> Rc<[usize]> { quads.iter().map(f).collect() };
    let h = tape.gather(nodes, idx(|q| q.head));
    let tp = tape.gather(nodes, idx(|q| q.pos_tail));
    let tn = tape.gather(nodes, idx(|q| q.neg_tail));
    let r = tape.gather(relation_emb, rels.into());
    let wh = tape.relation_matvec(relation_w, groups.clone(), h);
    let wtp = tape.relation_matvec(relation_w, groups.clone(), tp);
    let wtn = tape.relation_matvec(relation_w, groups, tn);
    let base = tape.add(wh, r);
    let dp = tape.sub(base, wtp);
    let dn = tape.sub(base, wtn);
    let sp = tape.row_dot(dp, dp);
    let sn = tape.row_dot(dn, dn);
    // sc_p − sc_n = ‖d_n‖² − ‖d_p‖²
    let margin = tape.sub(sn, sp);
    let ls = tape.log_sigmoid(margin);
    let total = tape.sum(ls);
    tape.scale(total, -1.0)
}

/// Inner-product scores for `(user, item)` pairs.
pub fn pair_scores(tape: &mut Tape, users: Var, items: Var, user_idx: Rc<[usize]>, item_idx: Rc<[usize]>) -> Var {
    let u = tape.gather(users, user_idx);
    let i = tape.gather(items, item_idx);
    tape.row_dot(u, i)
}

/// `Σ −ln σ(ŷ_p − ŷ_n)`.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var) -> Var {
    let diff = tape.sub(pos, neg);
    let ls = tape.log_sigmoid(diff);
    let total = tape.sum(ls);
    tape.scale(total, -1.0)
}

/// Sum of squared entries over the given parameters.
pub fn l2_penalty(tape: &mut Tape, params: &[Var]) -> Var {
    let mut acc = tape.constant(Array2::zeros((1, 1)));
    for &p in params {
        if tape.value(p).is_empty() {
            continue;
        }
        let s = tape.sum_squares(p);
        acc = tape.add(acc, s);
    }
    acc
}

/// Component losses of one recommendation step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RecComponents {
    pub bpr: f64,
    pub adversarial: f64,
    pub contrastive: f64,
    pub regularization: f64,
}

/// `L_BPR + λ_adv L_adv + λ_contr L_contr + λ_reg ‖θ‖²` on the tape.
pub fn rec_loss(tape: &mut Tape, bpr: Var, adv: Option<Var>, contr: Option<Var>, reg: Var, weights: [f64; 3]) -> Var {
    let [l_adv, l_contr, l_reg] = weights;
    let mut total = bpr;
    for (term, w) in [(adv, l_adv), (contr, l_contr), (Some(reg), l_reg)] {
        if let Some(t) = term {
            if w != 0.0 {
                let s = tape.scale(t, w);
                total = tape.add(total, s);
            }
        }
    }
    total
}
