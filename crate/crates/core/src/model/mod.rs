//! The recommendation model: a heterogeneous encoder over interactions,
//! knowledge and modality features, followed by homogeneous propagation over
//! the frozen item-item and user-user graphs.

pub mod context;
pub mod mshgl;
pub mod params;
pub mod sahgl;

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Mat, Tape, Var};
use crate::config::TrainingConfig;
use crate::dataset::Modality;

pub use context::{GraphContext, KgIndex, Phase};
pub use params::{ModelDims, ModelParams, ParamId};

/// Parameters placed on a tape, either as trainable inputs or constants.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: impl Fn(ParamId) -> bool) -> Self {
        let vars = ParamId::ALL
            .iter()
            .map(|&p| {
                let v = params.get(p).clone();
                if trainable(p) {
                    tape.input(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        Self { vars }
    }

    pub fn constants(tape: &mut Tape, params: &ModelParams) -> Self {
        Self::bind(tape, params, |_| false)
    }

    pub fn get(&self, p: ParamId) -> Var {
        self.vars[p.index()]
    }
}

/// Per-modality user and item embeddings from the modality convolution.
#[derive(Clone, Copy, Debug)]
pub struct ModalityOutput {
    pub modality: Modality,
    pub users: Var,
    pub items: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Fused heterogeneous embeddings `e_u`, `e_i`.
    pub fused_users: Var,
    pub fused_items: Var,
    /// Final embeddings used for scoring.
    pub users: Var,
    pub items: Var,
    pub modalities: Vec<ModalityOutput>,
}

fn dropout_mask(rng: &mut dyn rand::RngCore, rows: usize, cols: usize, p: f64) -> Rc<Mat> {
    let keep = 1.0 / (1.0 - p);
    Rc::new(Array2::from_shape_fn((rows, cols), |_| if rng.gen::<f64>() < p { 0.0 } else { keep }))
}

/// Knowledge-branch node table: projected user and item ID embeddings
/// followed by the entity table.
pub fn knowledge_nodes(tape: &mut Tape, vars: &ParamVars, params: &ModelParams) -> Var {
    let (u, i) = (vars.get(ParamId::User), vars.get(ParamId::Item));
    let (u, i) = if params.dims.d != params.dims.d_know {
        let w = vars.get(ParamId::KnowIn);
        (tape.matmul(u, w), tape.matmul(i, w))
    } else {
        (u, i)
    };
    tape.concat_rows(&[u, i, vars.get(ParamId::Entity)])
}

/// Full forward pass. Dropout is applied only when `rng` is given.
pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    params: &ModelParams,
    ctx: &GraphContext,
    cfg: &TrainingConfig,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> ForwardOutput {
    let ab = cfg.ablation;
    let (nu, ni) = (ctx.user_count, ctx.item_count);
    let mut user_branches: Vec<(Option<Var>, f64)> = Vec::new();
    let mut item_branches: Vec<(Option<Var>, f64)> = Vec::new();

    if ab.ba {
        let (eu, ei) = sahgl::behavior_conv(
            tape,
            &ctx.ui,
            &ctx.iu,
            vars.get(ParamId::User),
            vars.get(ParamId::Item),
            &ctx.trained_items,
            cfg.layers,
            cfg.pool_mean,
        );
        user_branches.push((Some(eu), 1.0));
        item_branches.push((Some(ei), 1.0));
    }

    if ab.ka {
        let mut x = knowledge_nodes(tape, vars, params);
        for _ in 0..cfg.kg_layers {
            x = sahgl::kg_attention(
                tape,
                &ctx.kg,
                x,
                vars.get(ParamId::RelationEmb),
                vars.get(ParamId::RelationW),
                vars.get(ParamId::AggW1),
                vars.get(ParamId::AggW2),
                cfg.leaky_slope,
            );
        }
        if params.dims.d != params.dims.d_know {
            x = tape.matmul(x, vars.get(ParamId::KnowOut));
        }
        let users: Rc<[usize]> = (0..nu).collect();
        let items: Rc<[usize]> = (nu..nu + ni).collect();
        let xu = tape.gather(x, users);
        let xi = tape.gather(x, items);
        user_branches.push((Some(xu), cfg.lambda_k));
        item_branches.push((Some(xi), cfg.lambda_k));
    }

    let mut modalities = Vec::new();
    for m in Modality::ALL {
        if !ab.modality(m) {
            continue;
        }
        let Some(feat) = ctx.feature(m) else { continue };
        let (w, b) = ParamId::projection(m);
        let mask = match rng.as_deref_mut() {
            Some(r) if cfg.dropout > 0.0 => Some(dropout_mask(r, ni, params.dims.d, cfg.dropout)),
            _ => None,
        };
        let (xu, xi) = sahgl::modality_conv(tape, &ctx.ui, &ctx.iu, feat, vars.get(w), vars.get(b), mask);
        let weight = cfg.lambda_m * params.beta[m.index()];
        user_branches.push((Some(xu), weight));
        item_branches.push((Some(xi), weight));
        modalities.push(ModalityOutput {
            modality: m,
            users: xu,
            items: xi,
        });
    }

    let eu = sahgl::fuse(tape, &user_branches);
    let ei = sahgl::fuse(tape, &item_branches);

    let (users, items) = if ab.ms && !ctx.item_item.is_empty() {
        let reps: Vec<Var> = ctx
            .item_item
            .iter()
            .map(|(_, g)| mshgl::item_item_propagate(tape, g, ei, cfg.layers_ii))
            .collect();
        let items = mshgl::modality_self_attention(
            tape,
            &reps,
            vars.get(ParamId::AttnQ),
            vars.get(ParamId::AttnK),
            cfg.heads,
        );
        let users = mshgl::user_user_propagate(tape, &ctx.user_user, eu, cfg.layers_uu);
        (users, items)
    } else {
        (eu, ei)
    };

    ForwardOutput {
        fused_users: eu,
        fused_items: ei,
        users,
        items,
        modalities,
    }
}

/// Final user and item embeddings without dropout.
pub fn embeddings(params: &ModelParams, ctx: &GraphContext, cfg: &TrainingConfig) -> (Mat, Mat) {
    let mut tape = Tape::new();
    let vars = ParamVars::constants(&mut tape, params);
    let out = forward(&mut tape, &vars, params, ctx, cfg, None);
    (tape.value(out.users).clone(), tape.value(out.items).clone())
}
