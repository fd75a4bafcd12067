//! Explainer training with the pure/mixed batch schedule.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::loss::{objective, Batch, LossScope, LossTerms};
use super::{ExplainerBank, Hyper};
use crate::blackbox::BlackBox;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::seeding;
use crate::synthparts::{LabeledDataset, Split};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplainerConfig {
    pub num_concepts: usize,
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hyper: Hyper,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            num_concepts: 4,
            dim: 8,
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.1,
            seed: 42,
            hyper: Hyper::default(),
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.num_concepts == 0 || self.dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("concepts, dimension and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BatchKind {
    Pure,
    Mixed,
}

/// `rho` pure batches, then one mixed batch, repeating.
pub fn batch_kind(step: usize, rho: usize) -> BatchKind {
    if step % (rho + 1) < rho {
        BatchKind::Pure
    } else {
        BatchKind::Mixed
    }
}

/// Averages of the loss terms over one epoch's batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub relevance: f64,
    pub diversity: f64,
    pub triplet: f64,
    /// Total loss on a fixed probe batch after the epoch's updates.
    pub probe_total: f64,
    pub pure_batches: usize,
    pub mixed_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Kind of every batch, in order.
    #[serde(skip)]
    pub schedule: Vec<BatchKind>,
}

/// Draws `size` indices from `pool`: without replacement when the pool is
/// large enough, with replacement otherwise.
fn draw<R: Rng>(pool: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= size {
        pool.choose_multiple(rng, size).copied().collect()
    } else {
        (0..size).map(|_| *pool.choose(rng).expect("non-empty pool")).collect()
    }
}

/// Trains a fresh explainer bank against a frozen black-box on the training
/// split. Pure batches group images by the black-box's predicted label.
pub fn train_explainer(
    model: &BlackBox,
    dataset: &LabeledDataset,
    cfg: &ExplainerConfig,
) -> Result<(ExplainerBank, TrainLog)> {
    cfg.validate()?;
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("no training images".into()));
    }
    let fmaps: Vec<Tensor> =
        train.par_iter().map(|&i| model.feature_map(&dataset.images[i])).collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor> = fmaps.par_iter().map(|f| model.resume_forward(f)).collect::<Result<Vec<_>>>()?;
    train_on_features(model, &fmaps, &targets, cfg)
}

/// Same as [`train_explainer`] on precomputed feature maps and black-box
/// probabilities.
pub fn train_on_features(
    model: &BlackBox,
    fmaps: &[Tensor],
    targets: &[Tensor],
    cfg: &ExplainerConfig,
) -> Result<(ExplainerBank, TrainLog)> {
    cfg.validate()?;
    let channels = *model.feature_shape().last().expect("rank-3 feature map");
    let mut bank = ExplainerBank::init(
        model.num_classes,
        channels,
        cfg.dim,
        cfg.num_concepts,
        cfg.hyper,
        seeding::derive(cfg.seed, "pace-init"),
    )?;
    let mut log = TrainLog::default();
    if fmaps.is_empty() {
        return Err(Error::Empty("no feature maps".into()));
    }

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); model.num_classes];
    for (i, t) in targets.iter().enumerate() {
        pools[t.argmax()].push(i);
    }
    let live: Vec<usize> = (0..pools.len()).filter(|&k| !pools[k].is_empty()).collect();
    let everything: Vec<usize> = (0..fmaps.len()).collect();
    let steps_per_epoch = fmaps.len().div_ceil(cfg.batch_size);
    let mut rng = seeding::rng(seeding::derive(cfg.seed, "batch-order"));
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate, cfg.weight_decay));
    let mut step = 0usize;
    let mut next_class = 0usize;
    let probe_members = {
        let mut probe_rng = seeding::rng(seeding::derive(cfg.seed, "probe"));
        draw(&everything, (4 * cfg.batch_size).min(fmaps.len()), &mut probe_rng)
    };
    let probe = Batch::new(
        probe_members.iter().map(|&i| &fmaps[i]).collect(),
        probe_members.iter().map(|&i| &targets[i]).collect(),
    )?;

    for epoch in 0..cfg.epochs {
        let mut sums = LossTerms::default();
        let mut entry = EpochLog { epoch, ..EpochLog::default() };
        for _ in 0..steps_per_epoch {
            let kind = batch_kind(step, cfg.hyper.rho);
            let (members, scope) = match kind {
                BatchKind::Pure => {
                    let class = live[next_class % live.len()];
                    next_class += 1;
                    entry.pure_batches += 1;
                    (draw(&pools[class], cfg.batch_size, &mut rng), LossScope::Class(class))
                }
                BatchKind::Mixed => {
                    entry.mixed_batches += 1;
                    let mut all = draw(&everything, cfg.batch_size, &mut rng);
                    all.shuffle(&mut rng);
                    (all, LossScope::All)
                }
            };
            let batch = Batch::new(
                members.iter().map(|&i| &fmaps[i]).collect(),
                members.iter().map(|&i| &targets[i]).collect(),
            )?;
            let obj = objective(model, &bank, &batch, scope)
                .map_err(|e| Error::Divergence { step, detail: e.to_string() })?;
            let grads: Vec<&Tensor> = obj.grads.iter().flat_map(|g| [&g.encoder, &g.decoder, &g.concepts]).collect();
            adam.step(&mut bank.params_mut(), &grads);
            if bank.params_mut().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { step, detail: "non-finite parameters after update".into() });
            }
            sums.total += obj.terms.total;
            sums.ce += obj.terms.ce;
            sums.relevance += obj.terms.relevance;
            sums.diversity += obj.terms.diversity;
            sums.triplet += obj.terms.triplet;
            log.schedule.push(kind);
            step += 1;
        }
        let n = steps_per_epoch as f64;
        entry.total = sums.total / n;
        entry.ce = sums.ce / n;
        entry.relevance = sums.relevance / n;
        entry.diversity = sums.diversity / n;
        entry.triplet = sums.triplet / n;
        entry.probe_total = objective(model, &bank, &probe, LossScope::All)
            .map_err(|e| Error::Divergence { step, detail: e.to_string() })?
            .terms
            .total;
        log.epochs.push(entry);
    }
    Ok((bank, log))
}
