//! Mini-batch contrastive training and validation.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::data::{BitemporalSample, TextSample, CAPTIONS_PER_PAIR};
use crate::error::{Error, Result};
use crate::fusion::Mode;
use crate::heads::contrastive_loss_values;
use crate::model::Model;
use crate::optim::{Sgd, SgdConfig};
use crate::retrieval::{recall_at_k, EvalFeatures};
use crate::rng::{self, Purpose};
use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// `0` runs forward and backward passes without touching the parameters.
    pub lr: Float,
    pub weight_decay: Float,
    pub momentum: Float,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.lr > 0.0 {
            self.sgd().validate()?;
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// A `(pair index, caption index)` training example.
pub type Example = (usize, usize);

/// One example per caption of every pair.
pub fn expand_examples(n_pairs: usize) -> Vec<Example> {
    (0..n_pairs)
        .flat_map(|p| (0..CAPTIONS_PER_PAIR).map(move |c| (p, c)))
        .collect()
}

/// Epoch-seeded shuffle cut into batches; a trailing batch of one example is
/// dropped because its loss is identically zero.
pub fn make_batches(examples: &[Example], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<Example>>> {
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order = examples.to_vec();
    rng::shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch as u64), &mut order);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[Example]>::to_vec)
        .collect())
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Sgd,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        TrainState {
            model,
            optimizer: Sgd::new(),
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based index of the epoch just finished.
    pub epoch: usize,
    pub mean_loss: Float,
    pub batches: usize,
}

/// Forward, backward and (unless `lr == 0`) one optimizer step on a batch.
/// Returns the batch loss.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    pairs: &[BitemporalSample],
    batch: &[Example],
    batch_index: usize,
) -> Result<Float> {
    let epoch = state.epoch;
    let diverged = |e: Error| match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch: epoch + 1,
            batch: batch_index,
            detail: e.to_string(),
        },
        other => other,
    };
    let model = &state.model;
    let dropout = rng::stream(cfg.seed, Purpose::Dropout, ((epoch as u64) << 20) | batch_index as u64);
    let mut ctx = model.context(Mode::Train, Some(dropout))?;
    let p: Vec<&BitemporalSample> = batch.iter().map(|&(i, _)| &pairs[i]).collect();
    let c: Vec<&TextSample> = batch.iter().map(|&(i, k)| &pairs[i].captions[k]).collect();
    let loss = model.loss(&mut ctx, &p, &c).map_err(diverged)?;
    let value = ctx.tape.value(loss.total).data()[0];
    if !value.is_finite() {
        return Err(diverged(Error::NonFinite { op: "contrastive_loss" }));
    }
    let grads = ctx.tape.backward(loss.total)?;
    let per_param: Vec<Option<Vec<Float>>> = ctx.vars.iter().map(|(_, v)| grads.get(v).map(<[Float]>::to_vec)).collect();
    let updates = core::mem::take(&mut ctx.bn_updates);
    drop(ctx);
    for u in &updates {
        u.apply(&mut state.model.buffers);
    }
    if cfg.lr > 0.0 {
        state.optimizer.step(&cfg.sgd(), &mut state.model.params, &per_param)?;
        state.model.clamp_kappa();
    }
    if state.model.params.iter().any(|(_, p)| !p.value.is_finite()) {
        return Err(diverged(Error::NonFinite { op: "sgd_momentum_step" }));
    }
    Ok(value)
}

/// One pass over the training pairs (every caption once).
pub fn train_epoch(state: &mut TrainState, cfg: &TrainConfig, pairs: &[BitemporalSample]) -> Result<EpochLog> {
    cfg.validate()?;
    let batches = make_batches(&expand_examples(pairs.len()), cfg.batch_size, cfg.seed, state.epoch)?;
    if batches.is_empty() {
        return Err(Error::Config("training set yields no batch of two or more examples".into()));
    }
    let mut total = 0.0;
    for (i, batch) in batches.iter().enumerate() {
        total += train_step(state, cfg, pairs, batch, i)?;
    }
    state.epoch += 1;
    Ok(EpochLog {
        epoch: state.epoch,
        mean_loss: total / batches.len() as Float,
        batches: batches.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub text_to_image: f64,
    pub image_to_text: f64,
}

impl Recall {
    pub fn mean(&self) -> f64 {
        0.5 * (self.text_to_image + self.image_to_text)
    }
}

/// Recall@k in both directions with eval-mode features.
pub fn recall(model: &Model, pairs: &[BitemporalSample], k: usize) -> Result<Recall> {
    let features = EvalFeatures::compute(model, pairs)?;
    let (t2i, i2t) = recall_at_k(&features, pairs, k)?;
    Ok(Recall {
        text_to_image: t2i,
        image_to_text: i2t,
    })
}

/// Recall@1 in both directions; used for model selection.
pub fn validate(model: &Model, pairs: &[BitemporalSample]) -> Result<Recall> {
    if pairs.len() < 2 {
        return Err(Error::Config(format!("validation needs at least 2 pairs, got {}", pairs.len())));
    }
    recall(model, pairs, 1)
}

/// Eval-mode contrastive loss over distinct pairs: all pairs in one batch
/// with caption slot `k`, averaged over the five slots. Unlike training
/// batches this never contains the same pair twice.
pub fn distinct_pair_loss(model: &Model, pairs: &[BitemporalSample]) -> Result<Float> {
    let features = EvalFeatures::compute(model, pairs)?;
    let d = features.texts.cols();
    let mut total = 0.0;
    for k in 0..CAPTIONS_PER_PAIR {
        let rows: Vec<Float> = (0..pairs.len())
            .flat_map(|i| features.texts.row(i * CAPTIONS_PER_PAIR + k).iter().copied())
            .collect();
        let texts = crate::Tensor::new(&[pairs.len(), d], rows)?;
        total += contrastive_loss_values(&features.images, &texts, model.kappa())?.2;
    }
    Ok(total / CAPTIONS_PER_PAIR as Float)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub logs: Vec<EpochLog>,
    /// Validation recall after each epoch (empty without a validation set).
    pub val: Vec<Recall>,
    /// State with the best mean validation recall@1 (earliest on ties).
    pub best: Option<(usize, Recall, TrainState)>,
}

/// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after
/// each one.
pub fn fit(
    state: &mut TrainState,
    cfg: &TrainConfig,
    train: &[BitemporalSample],
    val: &[BitemporalSample],
    mut on_epoch: impl FnMut(&EpochLog, Option<&Recall>),
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut out = FitOutcome {
        logs: Vec::new(),
        val: Vec::new(),
        best: None,
    };
    while state.epoch < cfg.epochs {
        let log = train_epoch(state, cfg, train)?;
        let rec = if val.len() >= 2 { Some(validate(&state.model, val)?) } else { None };
        if let Some(r) = rec {
            let better = out.best.as_ref().is_none_or(|(_, b, _)| r.mean() > b.mean());
            if better {
                out.best = Some((log.epoch, r, state.clone()));
            }
            out.val.push(r);
        }
        on_epoch(&log, rec.as_ref());
        out.logs.push(log);
    }
    Ok(out)
}
