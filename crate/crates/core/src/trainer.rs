//! Alternating optimization: a knowledge-embedding step, a recommendation
//! step, a critic step and the modality-importance update per batch, with
//! early stopping on warm validation recall.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Tape};
use crate::config::{ColdPool, TrainingConfig};
use crate::dataset::{FeatureMatrix, Modality, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{RankingTask, Setting};
use crate::graphs::FrozenGraphBundle;
use crate::model::{self, GraphContext, ModelDims, ModelParams, ParamId, ParamVars, Phase};
use crate::objectives::{self, DiscMode, DiscVars, KgQuad};
use crate::optim::Adam;

/// Cutoff of the early-stopping metric.
pub const VALIDATION_K: usize = 20;

/// Loss terms of one step (zero when a term is disabled or skipped).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub kg: f64,
    pub bpr: f64,
    pub adversarial: f64,
    pub contrastive: f64,
    pub regularization: f64,
    pub total: f64,
    pub critic: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub aborted: usize,
    /// Mean over the epoch's completed steps.
    pub losses: StepLosses,
    pub val_recall: f64,
    pub beta: [f64; 2],
    pub seconds: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str =
        "epoch\tsteps\taborted\tkg\tbpr\tadv\tcontr\treg\ttotal\tcritic\tval_recall@20\tbeta_text\tbeta_image\tseconds";

    pub fn to_line(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch,
            self.steps,
            self.aborted,
            l.kg,
            l.bpr,
            l.adversarial,
            l.contrastive,
            l.regularization,
            l.total,
            l.critic,
            self.val_recall,
            self.beta[0],
            self.beta[1],
            self.seconds
        )
    }
}

/// Mutable optimization state, everything needed to resume exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam_kg: Adam,
    pub adam_rec: Adam,
    pub adam_disc: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_params: ModelParams,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
    pub bad_steps: usize,
    pub history: Vec<EpochRecord>,
}

/// Inputs of a training batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub triplets: Vec<(usize, usize, usize)>,
    pub kg_quads: Vec<KgQuad>,
    /// Distinct users of the batch, ascending.
    pub user_rows: Vec<usize>,
}

/// Model dimensions implied by a graph bundle and feature set.
pub fn model_dims(bundle: &FrozenGraphBundle, features: &[FeatureMatrix], cfg: &TrainingConfig) -> ModelDims {
    let dim = |m: Modality| features.iter().find(|f| f.modality == m).map_or(0, |f| f.dim());
    ModelDims {
        users: bundle.user_count,
        items: bundle.item_count,
        entities: bundle.ckg.node_count - bundle.user_count - bundle.item_count,
        relations: bundle.ckg.relation_count,
        text_dim: dim(Modality::Text),
        image_dim: dim(Modality::Image),
        disc_cols: bundle.warm.iter().filter(|&&w| w).count(),
        d: cfg.d,
        d_know: cfg.d_know,
    }
}

struct Sampler {
    train: Vec<(usize, usize)>,
    user_items: Vec<Vec<usize>>,
    warm_items: Vec<usize>,
    kg_triples: Vec<(usize, usize, usize)>,
    kg_set: HashSet<(usize, usize, usize)>,
    group_members: HashMap<usize, Vec<usize>>,
    node_groups: Vec<usize>,
}

impl Sampler {
    fn new(split: &SplitSpec, bundle: &FrozenGraphBundle) -> Self {
        let mut user_items = vec![Vec::new(); split.user_count];
        for &(u, i) in &split.train {
            user_items[u].push(i);
        }
        for v in &mut user_items {
            v.sort_unstable();
            v.dedup();
        }
        let mut warm_items: Vec<usize> = (0..bundle.item_count).filter(|&i| bundle.warm[i]).collect();
        warm_items.sort_unstable();
        let ckg = &bundle.ckg;
        let kg_triples: Vec<(usize, usize, usize)> = ckg.triples[..ckg.kg_triple_count]
            .iter()
            .map(|t| (t.head, t.relation, t.tail))
            .collect();
        let mut group_members: HashMap<usize, Vec<usize>> = HashMap::new();
        for (node, &g) in ckg.node_groups.iter().enumerate() {
            if g != usize::MAX {
                group_members.entry(g).or_default().push(node);
            }
        }
        Self {
            train: split.train.clone(),
            kg_set: kg_triples.iter().copied().collect(),
            kg_triples,
            user_items,
            warm_items,
            group_members,
            node_groups: ckg.node_groups.clone(),
        }
    }

    fn negative_item(&self, rng: &mut impl Rng, user: usize) -> Option<usize> {
        let seen = &self.user_items[user];
        for _ in 0..100 {
            let i = self.warm_items[rng.gen_range(0..self.warm_items.len())];
            if seen.binary_search(&i).is_err() {
                return Some(i);
            }
        }
        None
    }

    fn kg_quads(&self, rng: &mut impl Rng, count: usize) -> Vec<KgQuad> {
        if self.kg_triples.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let (h, r, t) = self.kg_triples[rng.gen_range(0..self.kg_triples.len())];
            let members = &self.group_members[&self.node_groups[t]];
            for _ in 0..20 {
                let tn = members[rng.gen_range(0..members.len())];
                if !self.kg_set.contains(&(h, r, tn)) {
                    out.push(KgQuad {
                        head: h,
                        relation: r,
                        pos_tail: t,
                        neg_tail: tn,
                    });
                    break;
                }
            }
        }
        out
    }

    fn batch(&self, rng: &mut impl Rng, pairs: &[(usize, usize)], kg_count: usize, with_kg: bool) -> TrainBatch {
        let mut triplets = Vec::with_capacity(pairs.len());
        for &(u, i) in pairs {
            if let Some(n) = self.negative_item(rng, u) {
                triplets.push((u, i, n));
            }
        }
        let mut user_rows: Vec<usize> = triplets.iter().map(|t| t.0).collect();
        user_rows.sort_unstable();
        user_rows.dedup();
        let kg_quads = if with_kg { self.kg_quads(rng, kg_count) } else { Vec::new() };
        TrainBatch {
            triplets,
            kg_quads,
            user_rows,
        }
    }

    /// Binary interaction submatrix over `rows × warm items`.
    fn interaction_rows(&self, rows: &[usize]) -> Mat {
        let mut g = Array2::zeros((rows.len(), self.warm_items.len()));
        for (r, &u) in rows.iter().enumerate() {
            for i in &self.user_items[u] {
                if let Ok(c) = self.warm_items.binary_search(i) {
                    g[[r, c]] = 1.0;
                }
            }
        }
        g
    }
}

/// Outputs of the recommendation step reused by the critic.
struct AdversarialInputs {
    augmented: Mat,
    fakes: Vec<(Modality, Mat)>,
}

pub struct Trainer {
    pub cfg: TrainingConfig,
    pub state: TrainState,
    train_ctx: GraphContext,
    eval_ctx: GraphContext,
    sampler: Sampler,
    val_task: RankingTask,
    disc_cols: Rc<[usize]>,
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

impl Trainer {
    pub fn new(cfg: TrainingConfig, split: &SplitSpec, bundle: &FrozenGraphBundle, features: &[FeatureMatrix]) -> Result<Self> {
        cfg.validate()?;
        if split.train.is_empty() {
            return Err(Error::EmptyDataset("no training interactions".into()));
        }
        let dims = model_dims(bundle, features, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(dims, &mut rng);
        let state = TrainState {
            best_params: params.clone(),
            params,
            adam_kg: Adam::new(cfg.learning_rate),
            adam_rec: Adam::new(cfg.learning_rate),
            adam_disc: Adam::new(cfg.learning_rate),
            rng,
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            stale_epochs: 0,
            bad_steps: 0,
            history: Vec::new(),
        };
        Self::with_state(cfg, state, split, bundle, features)
    }

    /// Resumes from a saved state.
    pub fn with_state(
        cfg: TrainingConfig,
        state: TrainState,
        split: &SplitSpec,
        bundle: &FrozenGraphBundle,
        features: &[FeatureMatrix],
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = model_dims(bundle, features, &cfg);
        if state.params.dims != dims {
            return Err(Error::Checkpoint(format!(
                "parameter dimensions {:?} do not match the artifacts {:?}",
                state.params.dims, dims
            )));
        }
        let sampler = Sampler::new(split, bundle);
        let disc_cols: Rc<[usize]> = sampler.warm_items.clone().into();
        Ok(Self {
            train_ctx: GraphContext::new(bundle, features, Phase::Training, &[], cfg.symmetric_norm),
            eval_ctx: GraphContext::new(bundle, features, Phase::Inference, &[], cfg.symmetric_norm),
            val_task: RankingTask::new(split, Setting::Warm, ColdPool::ColdTest, true)?,
            sampler,
            disc_cols,
            cfg,
            state,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.state.params
    }

    fn kg_step(&mut self, quads: &[KgQuad]) -> Option<f64> {
        if quads.is_empty() {
            return Some(0.0);
        }
        let params = &self.state.params;
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, params, |p| ParamId::KG.contains(&p));
        let nodes = model::knowledge_nodes(&mut tape, &vars, params);
        let loss = objectives::kg_triplet_loss(
            &mut tape,
            nodes,
            vars.get(ParamId::RelationEmb),
            vars.get(ParamId::RelationW),
            quads,
        );
        let value = tape.scalar(loss);
        if !finite(value) {
            return None;
        }
        let mut grads = tape.backward(loss);
        let updates = collect(&mut grads, &vars, params, &ParamId::KG);
        self.state.adam_kg.apply(&mut self.state.params, updates);
        Some(value)
    }

    fn disc_vars(vars: &ParamVars) -> DiscVars {
        DiscVars {
            weight: vars.get(ParamId::DiscW),
            bias: vars.get(ParamId::DiscB),
            gamma: vars.get(ParamId::DiscGamma),
            beta: vars.get(ParamId::DiscBeta),
        }
    }

    fn rec_step(&mut self, batch: &TrainBatch, losses: &mut StepLosses) -> Result<Option<Option<AdversarialInputs>>> {
        let cfg = &self.cfg;
        let params = &self.state.params;
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, params, |p| !p.is_discriminator());
        let out = model::forward(&mut tape, &vars, params, &self.train_ctx, cfg, Some(&mut self.state.rng));

        let us: Rc<[usize]> = batch.triplets.iter().map(|t| t.0).collect();
        let ps: Rc<[usize]> = batch.triplets.iter().map(|t| t.1).collect();
        let ns: Rc<[usize]> = batch.triplets.iter().map(|t| t.2).collect();
        let pos = objectives::pair_scores(&mut tape, out.users, out.items, us.clone(), ps);
        let neg = objectives::pair_scores(&mut tape, out.users, out.items, us, ns);
        let bpr = objectives::bpr_loss(&mut tape, pos, neg);

        let rows: Rc<[usize]> = batch.user_rows.clone().into();
        let mut adv = None;
        let mut contr = None;
        let mut adversarial = None;
        if !out.modalities.is_empty() && !rows.is_empty() {
            let interactions = self.sampler.interaction_rows(&rows);
            let final_u = tape.value(out.users).select(ndarray::Axis(0), &rows);
            let final_i = tape.value(out.items).select(ndarray::Axis(0), &self.disc_cols);
            let augmented =
                objectives::augment_objective_graph(&interactions, &final_u, &final_i, cfg.tau, cfg.gamma, &mut self.state.rng);
            let dv = Self::disc_vars(&vars);
            let aug_var = tape.constant(augmented.clone());
            let mut fakes = Vec::new();
            let mut adv_sum: Option<crate::autograd::Var> = None;
            let mut contr_sum: Option<crate::autograd::Var> = None;
            for m in &out.modalities {
                let fake = objectives::virtual_interaction_graph(&mut tape, m.users, m.items, &rows, &self.disc_cols);
                fakes.push((m.modality, tape.value(fake).clone()));
                let drop_real = objectives::disc_dropout_mask(&mut self.state.rng, rows.len(), cfg.disc_dropout);
                let drop_fake = objectives::disc_dropout_mask(&mut self.state.rng, rows.len(), cfg.disc_dropout);
                let d_real =
                    objectives::discriminator_forward(&mut tape, aug_var, &dv, DiscMode::Train { dropout: drop_real }, cfg.leaky_slope)?;
                let d_fake =
                    objectives::discriminator_forward(&mut tape, fake, &dv, DiscMode::Train { dropout: drop_fake }, cfg.leaky_slope)?;
                let mr = tape.mean(d_real.scores);
                let mf = tape.mean(d_fake.scores);
                let term = tape.sub(mr, mf);
                adv_sum = Some(match adv_sum {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
                let c = objectives::contrastive_loss(&mut tape, out.users, m.users, &rows, cfg.contrastive_temperature)?;
                contr_sum = Some(match contr_sum {
                    Some(a) => tape.add(a, c),
                    None => c,
                });
            }
            adv = adv_sum;
            contr = contr_sum;
            adversarial = Some(AdversarialInputs { augmented, fakes });
        }

        let trainable: Vec<_> = self
            .state
            .params
            .present()
            .filter(|p| !p.is_discriminator())
            .map(|p| vars.get(p))
            .collect();
        let reg = objectives::l2_penalty(&mut tape, &trainable);
        let total = objectives::rec_loss(&mut tape, bpr, adv, contr, reg, [cfg.lambda_adv, cfg.lambda_contr, cfg.lambda_reg]);
        let value = tape.scalar(total);
        losses.bpr = tape.scalar(bpr);
        losses.adversarial = adv.map_or(0.0, |v| tape.scalar(v));
        losses.contrastive = contr.map_or(0.0, |v| tape.scalar(v));
        losses.regularization = tape.scalar(reg);
        losses.total = value;
        if !finite(value) {
            return Ok(None);
        }
        let mut grads = tape.backward(total);
        let ids: Vec<ParamId> = ParamId::ALL.into_iter().filter(|p| !p.is_discriminator()).collect();
        let updates = collect(&mut grads, &vars, &self.state.params, &ids);
        self.state.adam_rec.apply(&mut self.state.params, updates);
        Ok(Some(adversarial))
    }

    /// Returns the critic loss and the mean critic score of each modality
    /// graph, or `None` on a non-finite loss.
    fn critic_step(&mut self, inputs: &AdversarialInputs) -> Result<Option<(f64, Vec<(Modality, f64)>)>> {
        let cfg = &self.cfg;
        let params = &self.state.params;
        let mut tape = Tape::new();
        let vars = ParamVars::bind(&mut tape, params, |p| p.is_discriminator());
        let dv = Self::disc_vars(&vars);
        let rows = inputs.augmented.nrows();
        let real = tape.constant(inputs.augmented.clone());
        let mut total: Option<crate::autograd::Var> = None;
        let mut means = Vec::new();
        let (mut rm, mut rv) = (params.bn_running_mean, params.bn_running_var);
        for (m, fake_m) in &inputs.fakes {
            let fake = tape.constant(fake_m.clone());
            let drop_r = objectives::disc_dropout_mask(&mut self.state.rng, rows, cfg.disc_dropout);
            let drop_f = objectives::disc_dropout_mask(&mut self.state.rng, rows, cfg.disc_dropout);
            let d_real = objectives::discriminator_forward(&mut tape, real, &dv, DiscMode::Train { dropout: drop_r }, cfg.leaky_slope)?;
            let d_fake = objectives::discriminator_forward(&mut tape, fake, &dv, DiscMode::Train { dropout: drop_f }, cfg.leaky_slope)?;
            objectives::update_running_stats(&mut rm, &mut rv, &d_real);
            objectives::update_running_stats(&mut rm, &mut rv, &d_fake);
            let eps: Vec<f64> = (0..rows).map(|_| self.state.rng.gen::<f64>()).collect();
            let mixed = objectives::interpolate(&inputs.augmented, fake_m, &eps);
            let mixed = tape.constant(mixed);
            let drop_m = objectives::disc_dropout_mask(&mut self.state.rng, rows, cfg.disc_dropout);
            let d_mix = objectives::discriminator_forward(&mut tape, mixed, &dv, DiscMode::Train { dropout: drop_m }, cfg.leaky_slope)?;
            let norms = objectives::gradient_norms(&mut tape, &d_mix, &dv, cfg.leaky_slope);
            let gp = objectives::gradient_penalty(&mut tape, norms);
            let mf = tape.mean(d_fake.scores);
            let mr = tape.mean(d_real.scores);
            means.push((*m, tape.scalar(mf)));
            let diff = tape.sub(mf, mr);
            let gp = tape.scale(gp, cfg.xi);
            let term = tape.add(diff, gp);
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        let Some(total) = total else { return Ok(Some((0.0, means))) };
        let value = tape.scalar(total);
        if !finite(value) {
            return Ok(None);
        }
        let mut grads = tape.backward(total);
        let updates = collect(&mut grads, &vars, &self.state.params, &ParamId::DISCRIMINATOR);
        self.state.adam_disc.apply(&mut self.state.params, updates);
        self.state.params.bn_running_mean = rm;
        self.state.params.bn_running_var = rv;
        Ok(Some((value, means)))
    }

    /// One alternating step. Returns `None` when the step was aborted.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<Option<StepLosses>> {
        let mut losses = StepLosses::default();
        let outcome = self.step_inner(batch, &mut losses)?;
        if outcome {
            self.state.bad_steps = 0;
            Ok(Some(losses))
        } else {
            self.state.bad_steps += 1;
            log::warn!("aborted step with non-finite loss ({:?})", losses);
            if self.state.bad_steps >= self.cfg.max_bad_steps {
                return Err(Error::Divergence(format!(
                    "{} consecutive steps produced non-finite losses; last {:?}",
                    self.state.bad_steps, losses
                )));
            }
            Ok(None)
        }
    }

    fn step_inner(&mut self, batch: &TrainBatch, losses: &mut StepLosses) -> Result<bool> {
        if self.cfg.ablation.ka {
            match self.kg_step(&batch.kg_quads) {
                Some(v) => losses.kg = v,
                None => {
                    losses.kg = f64::NAN;
                    return Ok(false);
                }
            }
        }
        let adversarial = match self.rec_step(batch, losses)? {
            Some(a) => a,
            None => return Ok(false),
        };
        if let Some(inputs) = adversarial {
            let Some((critic, means)) = self.critic_step(&inputs)? else {
                losses.critic = f64::NAN;
                return Ok(false);
            };
            losses.critic = critic;
            let get = |m: Modality| means.iter().find(|(x, _)| *x == m).map(|(_, v)| *v);
            if let (Some(t), Some(i)) = (get(Modality::Text), get(Modality::Image)) {
                self.state.params.beta = crate::model::sahgl::update_modality_importance(self.state.params.beta, t, i, self.cfg.eta);
            }
        }
        Ok(true)
    }

    /// Samples the batches of one epoch.
    pub fn epoch_batches(&mut self) -> Vec<TrainBatch> {
        let mut order = self.sampler.train.clone();
        order.shuffle(&mut self.state.rng);
        let with_kg = self.cfg.ablation.ka;
        let kg = self.cfg.kg_batch();
        order
            .chunks(self.cfg.batch_size)
            .map(|chunk| self.sampler.batch(&mut self.state.rng, chunk, kg, with_kg))
            .collect()
    }

    /// A single batch of the given size, for timing and tests.
    pub fn sample_batch(&mut self, size: usize) -> TrainBatch {
        let n = self.sampler.train.len();
        let pairs: Vec<(usize, usize)> = (0..size).map(|_| self.sampler.train[self.state.rng.gen_range(0..n)]).collect();
        let with_kg = self.cfg.ablation.ka;
        self.sampler.batch(&mut self.state.rng, &pairs, size, with_kg)
    }

    /// Warm validation recall at [`VALIDATION_K`].
    pub fn validation_recall(&self) -> f64 {
        let (u, i) = model::embeddings(&self.state.params, &self.eval_ctx, &self.cfg);
        self.val_task
            .evaluate(&u, &i, &[VALIDATION_K], false)
            .first()
            .map_or(0.0, |r| r.metrics.recall)
    }

    /// Runs one epoch and updates early-stopping bookkeeping. Returns
    /// `true` when training should stop.
    pub fn run_epoch(&mut self) -> Result<bool> {
        let start = Instant::now();
        let batches = self.epoch_batches();
        let mut sum = StepLosses::default();
        let (mut done, mut aborted) = (0usize, 0usize);
        for b in &batches {
            match self.train_step(b)? {
                Some(l) => {
                    done += 1;
                    sum.kg += l.kg;
                    sum.bpr += l.bpr;
                    sum.adversarial += l.adversarial;
                    sum.contrastive += l.contrastive;
                    sum.regularization += l.regularization;
                    sum.total += l.total;
                    sum.critic += l.critic;
                }
                None => aborted += 1,
            }
        }
        let n = done.max(1) as f64;
        let mean = StepLosses {
            kg: sum.kg / n,
            bpr: sum.bpr / n,
            adversarial: sum.adversarial / n,
            contrastive: sum.contrastive / n,
            regularization: sum.regularization / n,
            total: sum.total / n,
            critic: sum.critic / n,
        };
        let val = self.validation_recall();
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch: self.state.epoch,
            steps: done,
            aborted,
            losses: mean,
            val_recall: val,
            beta: self.state.params.beta,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("{}", record.to_line());
        self.state.history.push(record);
        if val > self.state.best_metric {
            self.state.best_metric = val;
            self.state.best_epoch = self.state.epoch;
            self.state.best_params = self.state.params.clone();
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
        }
        Ok(self.state.stale_epochs >= self.cfg.patience || self.state.epoch >= self.cfg.epochs)
    }

    /// Trains until early stopping or the epoch budget; `on_epoch` runs
    /// after every epoch (for logging and checkpointing).
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.state.epoch < self.cfg.epochs {
            let stop = self.run_epoch()?;
            on_epoch(self)?;
            if stop {
                break;
            }
        }
        Ok(())
    }
}

fn collect(grads: &mut crate::autograd::Gradients, vars: &ParamVars, params: &ModelParams, ids: &[ParamId]) -> Vec<(ParamId, Mat)> {
    ids.iter()
        .filter(|&&p| !params.get(p).is_empty())
        .filter_map(|&p| grads.take(vars.get(p)).map(|g| (p, g)))
        .collect()
}
