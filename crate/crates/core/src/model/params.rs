use ndarray::Array2;
use rand::Rng;

use crate::autograd::Mat;
use crate::config::TrainingConfig;
use crate::dataset::Modality;
use crate::error::{Error, Result};

/// Every trainable tensor of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    User,
    Item,
    Entity,
    RelationEmb,
    RelationW,
    AggW1,
    AggW2,
    KnowIn,
    KnowOut,
    TextW,
    TextB,
    ImageW,
    ImageB,
    AttnQ,
    AttnK,
    DiscW,
    DiscB,
    DiscGamma,
    DiscBeta,
}

impl ParamId {
    pub const ALL: [ParamId; 19] = [
        ParamId::User,
        ParamId::Item,
        ParamId::Entity,
        ParamId::RelationEmb,
        ParamId::RelationW,
        ParamId::AggW1,
        ParamId::AggW2,
        ParamId::KnowIn,
        ParamId::KnowOut,
        ParamId::TextW,
        ParamId::TextB,
        ParamId::ImageW,
        ParamId::ImageB,
        ParamId::AttnQ,
        ParamId::AttnK,
        ParamId::DiscW,
        ParamId::DiscB,
        ParamId::DiscGamma,
        ParamId::DiscBeta,
    ];

    /// Parameters touched by the knowledge-graph embedding step.
    pub const KG: [ParamId; 5] = [
        ParamId::Item,
        ParamId::Entity,
        ParamId::RelationEmb,
        ParamId::RelationW,
        ParamId::KnowIn,
    ];

    pub const DISCRIMINATOR: [ParamId; 4] = [ParamId::DiscW, ParamId::DiscB, ParamId::DiscGamma, ParamId::DiscBeta];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamId::User => "user_table",
            ParamId::Item => "item_table",
            ParamId::Entity => "entity_table",
            ParamId::RelationEmb => "relation_table",
            ParamId::RelationW => "relation_transforms",
            ParamId::AggW1 => "agg_w1",
            ParamId::AggW2 => "agg_w2",
            ParamId::KnowIn => "know_in",
            ParamId::KnowOut => "know_out",
            ParamId::TextW => "text_projection",
            ParamId::TextB => "text_bias",
            ParamId::ImageW => "image_projection",
            ParamId::ImageB => "image_bias",
            ParamId::AttnQ => "selfattn_wq",
            ParamId::AttnK => "selfattn_wk",
            ParamId::DiscW => "disc_weight",
            ParamId::DiscB => "disc_bias",
            ParamId::DiscGamma => "disc_bn_gamma",
            ParamId::DiscBeta => "disc_bn_beta",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_discriminator(self) -> bool {
        Self::DISCRIMINATOR.contains(&self)
    }

    pub fn projection(m: Modality) -> (ParamId, ParamId) {
        match m {
            Modality::Text => (ParamId::TextW, ParamId::TextB),
            Modality::Image => (ParamId::ImageW, ParamId::ImageB),
        }
    }
}

/// Sizes that fix every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub users: usize,
    pub items: usize,
    /// Knowledge entities that are not items.
    pub entities: usize,
    /// Relations including the interaction relation.
    pub relations: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Input width of the discriminator (number of item columns).
    pub disc_cols: usize,
    pub d: usize,
    pub d_know: usize,
}

impl ModelDims {
    pub fn shape(&self, p: ParamId) -> (usize, usize) {
        let (d, k) = (self.d, self.d_know);
        let proj = d != k;
        match p {
            ParamId::User => (self.users, d),
            ParamId::Item => (self.items, d),
            ParamId::Entity => (self.entities, k),
            ParamId::RelationEmb => (self.relations, k),
            ParamId::RelationW => (self.relations * k, k),
            ParamId::AggW1 | ParamId::AggW2 => (k, k),
            ParamId::KnowIn => {
                if proj {
                    (d, k)
                } else {
                    (0, 0)
                }
            }
            ParamId::KnowOut => {
                if proj {
                    (k, d)
                } else {
                    (0, 0)
                }
            }
            ParamId::TextW => (self.text_dim, d),
            ParamId::ImageW => (self.image_dim, d),
            ParamId::TextB | ParamId::ImageB => (1, d),
            ParamId::AttnQ | ParamId::AttnK => (d, d),
            ParamId::DiscW => (self.disc_cols, 1),
            ParamId::DiscB | ParamId::DiscGamma | ParamId::DiscBeta => (1, 1),
        }
    }
}

/// Trainable tensors plus the non-gradient state that travels with them:
/// the modality importance pair and the discriminator's running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    mats: Vec<Mat>,
    /// `(β_text, β_image)`, always summing to one.
    pub beta: [f64; 2],
    pub bn_running_mean: f64,
    pub bn_running_var: f64,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    if rows == 0 || cols == 0 {
        return Array2::zeros((rows, cols));
    }
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

impl ModelParams {
    /// Xavier-uniform matrices, zero biases, identity batch-norm affine and
    /// `β = (0.5, 0.5)`. Relation transforms start at identity plus noise.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Self {
        let mats = ParamId::ALL
            .iter()
            .map(|&p| {
                let (r, c) = dims.shape(p);
                match p {
                    ParamId::TextB | ParamId::ImageB | ParamId::DiscB | ParamId::DiscBeta => Array2::zeros((r, c)),
                    ParamId::DiscGamma => Array2::ones((r, c)),
                    ParamId::RelationW => {
                        let k = dims.d_know;
                        let mut w = xavier(rng, r, c);
                        w.mapv_inplace(|v| v * 0.1);
                        for rel in 0..dims.relations {
                            for j in 0..k {
                                w[[rel * k + j, j]] += 1.0;
                            }
                        }
                        w
                    }
                    _ => xavier(rng, r, c),
                }
            })
            .collect();
        Self {
            dims,
            mats,
            beta: [0.5, 0.5],
            bn_running_mean: 0.0,
            bn_running_var: 1.0,
        }
    }

    /// All-zero tensors with the right shapes, to be filled by a loader.
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            mats: ParamId::ALL.iter().map(|&p| Array2::zeros(dims.shape(p))).collect(),
            beta: [0.5, 0.5],
            bn_running_mean: 0.0,
            bn_running_var: 1.0,
        }
    }

    pub fn dims_for(cfg: &TrainingConfig, base: ModelDims) -> ModelDims {
        ModelDims {
            d: cfg.d,
            d_know: cfg.d_know,
            ..base
        }
    }

    pub fn get(&self, p: ParamId) -> &Mat {
        &self.mats[p.index()]
    }

    pub fn get_mut(&mut self, p: ParamId) -> &mut Mat {
        &mut self.mats[p.index()]
    }

    /// Replaces a tensor, checking its shape.
    pub fn set(&mut self, p: ParamId, value: Mat) -> Result<()> {
        if value.dim() != self.dims.shape(p) {
            return Err(Error::Checkpoint(format!(
                "{} has shape {:?}, expected {:?}",
                p.name(),
                value.dim(),
                self.dims.shape(p)
            )));
        }
        self.mats[p.index()] = value;
        Ok(())
    }

    /// Parameters that exist (non-empty) in this configuration.
    pub fn present(&self) -> impl Iterator<Item = ParamId> + '_ {
        ParamId::ALL.into_iter().filter(|&p| !self.get(p).is_empty())
    }

    pub fn is_finite(&self) -> bool {
        self.mats.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.mats.iter().map(|m| m.len()).sum()
    }
}
