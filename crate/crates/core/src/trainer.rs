//! Mini-batch training with Adam, validation-loss early stopping and best
//! checkpoint tracking.

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, InteractionLog};
use crate::error::{contract_err, Error, Result};
use crate::losses::{batch_loss, Loss, LossConfig};
use crate::model::{ArchConfig, Encoder, ModelParams, SeqBatch, Vocab};
use crate::negatives::{BatchPool, NegativeDraw, SamplerConfig};
use crate::objectives::{ObjectiveConfig, TrainingInstance};
use crate::rng::{derive_seed, rng_for, tag};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping and is written
    /// as `0` in config files.
    #[serde(with = "clip_serde")]
    pub grad_clip: Option<f64>,
}

mod clip_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 50,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0 || !c.is_finite()) {
            return bad("grad_clip must be positive (0 disables clipping)".into());
        }
        Ok(())
    }
}

/// Everything that defines what is trained and how.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recipe {
    pub model: ArchConfig,
    pub objective: ObjectiveConfig,
    pub negatives: SamplerConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        self.negatives.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.model.attention != self.objective.attention() {
            return Err(Error::Config(format!(
                "objective {:?} needs {:?} attention, model is configured with {:?}",
                self.objective.kind,
                self.objective.attention(),
                self.model.attention
            )));
        }
        Ok(())
    }

    pub fn vocab(&self, n_items: usize) -> Vocab {
        Vocab::new(n_items, self.objective.uses_mask())
    }

    pub fn resolved_loss(&self, n_items: usize) -> Result<Loss> {
        self.loss.resolve(self.negatives.k, n_items, self.negatives.logq)
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<f32> {
        &self.m[i]
    }
}

/// One bias-corrected Adam update. Tensors without a gradient are left
/// alone.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Option<Tensor<f32>>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return contract_err("parameter, gradient and optimizer state counts differ");
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_eps;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.shape() != p.shape() {
            return contract_err(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = f64::from(gi);
            let mn = b1 * f64::from(*mi) + (1.0 - b1) * gi;
            let vn = b2 * f64::from(*vi) + (1.0 - b2) * gi * gi;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *w = (f64::from(*w) - update) as f32;
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor<f32>>], max_norm: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = (max / norm) as f32;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the initialization when
    /// no epoch ran).
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
    /// Instances whose in-batch negatives fell back to uniform.
    pub fallback_draws: usize,
}

/// Training inputs derived once per run.
pub struct TrainingData<'a> {
    /// Per-user sequences of the reduced training log.
    pub sequences: Vec<Vec<(u32, i64)>>,
    pub holdout: &'a [Interaction],
    pub n_items: usize,
}

impl<'a> TrainingData<'a> {
    pub fn new(reduced_train: &InteractionLog, holdout: &'a [Interaction]) -> Self {
        Self {
            sequences: reduced_train.user_sequences(),
            holdout,
            n_items: reduced_train.n_items(),
        }
    }
}

fn draw_negatives(
    recipe: &Recipe,
    n_items: usize,
    instances: &[TrainingInstance],
    seeds: &[u64],
) -> Result<Vec<NegativeDraw>> {
    let pool = BatchPool::new(
        instances
            .iter()
            .flat_map(|i| i.targets.iter().flat_map(|t| t.positives.iter().copied()))
            .collect(),
    );
    instances
        .par_iter()
        .zip(seeds)
        .map(|(inst, &seed)| {
            let mut rng = rng_for(seed, &[]);
            recipe.negatives.draw(n_items, &pool, &inst.positives(), &mut rng)
        })
        .collect()
}

fn encode_batch<'p>(
    g: &mut Graph<f32>,
    params: &'p ModelParams<f32>,
    instances: &[TrainingInstance],
    dropout_seed: u64,
) -> Result<(Encoder<'p, f32>, crate::tensor::Var)> {
    let enc = Encoder::bind(g, params, dropout_seed);
    let batch = SeqBatch {
        tokens: instances.iter().flat_map(|i| i.input.iter().copied()).collect(),
        batch: instances.len(),
        len: params.config().max_len,
    };
    let out = enc.encode(g, &batch)?;
    Ok((enc, out.hidden))
}

/// Mean loss of predicting each held-out item at the last position of the
/// user's reduced training sequence. Negatives come from a fixed stream.
pub fn validation_loss(params: &ModelParams<f32>, data: &TrainingData<'_>, recipe: &Recipe) -> Result<f64> {
    let loss = recipe.resolved_loss(data.n_items)?;
    let vocab = params.vocab();
    let len = params.config().max_len;
    let base = derive_seed(recipe.train.seed, &[tag::VALIDATION]);
    let users: Vec<&Interaction> = data
        .holdout
        .iter()
        .filter(|h| !data.sequences[h.user as usize].is_empty())
        .collect();
    if users.is_empty() {
        return contract_err("validation fold is empty");
    }
    let mut total = 0.0;
    for chunk in users.chunks(recipe.train.batch_size) {
        let instances: Vec<TrainingInstance> = chunk
            .iter()
            .map(|h| {
                let items: Vec<u32> = data.sequences[h.user as usize].iter().map(|s| s.0).collect();
                recipe.objective.validation_instance(&items, h.item, len, vocab)
            })
            .collect();
        let seeds: Vec<u64> = chunk.iter().map(|h| derive_seed(base, &[u64::from(h.user)])).collect();
        let draws = draw_negatives(recipe, data.n_items, &instances, &seeds)?;
        let mut g = Graph::new(false);
        let (enc, hidden) = encode_batch(&mut g, params, &instances, 0)?;
        let (v, _) = batch_loss(&mut g, &enc, hidden, &instances, &draws, &loss)?;
        total += f64::from(g.value(v).item()) * chunk.len() as f64;
    }
    Ok(total / users.len() as f64)
}

/// Trains from a fresh initialization. When `checkpoint` is given, the best
/// parameters are written there whenever validation loss improves.
pub fn train(
    data: &TrainingData<'_>,
    recipe: &Recipe,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    recipe.validate()?;
    let cfg = &recipe.train;
    let vocab = recipe.vocab(data.n_items);
    let loss = recipe.resolved_loss(data.n_items)?;
    let len = recipe.model.max_len;
    let mut params = ModelParams::<f32>::init(&recipe.model, vocab, cfg.seed)?;
    let mut adam = AdamState::new(params.tensors());
    let mut outcome = TrainOutcome {
        params: params.clone(),
        history: Vec::new(),
        best_epoch: None,
        best_val_loss: None,
        stopped_early: false,
        fallback_draws: 0,
    };
    let users: Vec<u32> = (0..data.sequences.len() as u32)
        .filter(|&u| !data.sequences[u as usize].is_empty())
        .collect();
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut order = users.clone();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng_for(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        }
        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let built: Vec<(u32, TrainingInstance)> = chunk
                .par_iter()
                .filter_map(|&u| {
                    let seed = derive_seed(cfg.seed, &[tag::INSTANCE, epoch as u64, u64::from(u)]);
                    recipe
                        .objective
                        .build(&data.sequences[u as usize], len, vocab, seed)
                        .map(|i| (u, i))
                })
                .collect();
            if built.is_empty() {
                continue;
            }
            let (batch_users, instances): (Vec<u32>, Vec<TrainingInstance>) = built.into_iter().unzip();
            let seeds: Vec<u64> = batch_users
                .iter()
                .map(|&u| derive_seed(cfg.seed, &[tag::NEGATIVES, epoch as u64, u64::from(u)]))
                .collect();
            let draws = draw_negatives(recipe, data.n_items, &instances, &seeds)?;
            outcome.fallback_draws += draws.iter().filter(|d| d.fallback).count();

            let batch_seed = derive_seed(cfg.seed, &[tag::DROPOUT, epoch as u64, step as u64]);
            let mut g = Graph::new(true);
            let (enc, hidden) = encode_batch(&mut g, &params, &instances, batch_seed)?;
            let (v, _) = batch_loss(&mut g, &enc, hidden, &instances, &draws, &loss)?;
            let value = f64::from(g.value(v).item());
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    batch_seed,
                });
            }
            let mut grads = g.backward(v)?;
            let mut flat: Vec<Option<Tensor<f32>>> = enc.vars().iter().map(|&p| grads.take(p)).collect();
            drop(enc);
            let norm = clip_global_norm(&mut flat, cfg.grad_clip);
            debug!("epoch {epoch} step {step} loss {value:.5} grad norm {norm:.4}");
            adam_step(params.tensors_mut(), &flat, &mut adam, cfg)?;
            loss_sum += value;
            loss_batches += 1;
        }

        let val = validation_loss(&params, data, recipe)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step: usize::MAX,
                batch_seed: derive_seed(cfg.seed, &[tag::VALIDATION]),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: if loss_batches > 0 { loss_sum / loss_batches as f64 } else { f64::NAN },
            val_loss: val,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: train {:.5} val {:.5} ({:.1}s)",
            record.train_loss, record.val_loss, record.seconds
        );
        on_epoch(&record);
        outcome.history.push(record);

        if outcome.best_val_loss.is_none_or(|b| val < b) {
            outcome.best_val_loss = Some(val);
            outcome.best_epoch = Some(epoch);
            outcome.params = params.clone();
            since_best = 0;
            if let Some(path) = checkpoint {
                params.save(path, serde_json::json!({ "epoch": epoch, "val_loss": val }))?;
            }
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    Ok(outcome)
}
