use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{bce_multilabel_loss, nll_loss};
use super::metrics::{evaluate_metrics, MetricsReport};
use super::rebalance::rebalance_indices;
use super::{Label, LabeledSample};
use crate::aggregation::RowKind;
use crate::error::{contract_err, Error, Result};
use crate::model::{shifted_view, Model};
use crate::params::ParamVars;
use crate::signal::Signal;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rebalance {
    None,
    /// Once, before the first epoch.
    OverUnder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub rebalance: Rebalance,
    /// Start shifts are drawn from `[1, offset]`.
    pub offset: usize,
    /// Class scored as positive by the validation metrics.
    pub positive_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            rebalance: Rebalance::OverUnder,
            offset: 1,
            positive_class: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(contract_err!("epochs and batch size must be at least 1"));
        }
        if !(self.adam.learning_rate >= 0.0) || !self.adam.learning_rate.is_finite() {
            return Err(contract_err!(
                "learning rate must be finite and non-negative, got {}",
                self.adam.learning_rate
            ));
        }
        if self.offset == 0 {
            return Err(contract_err!("offset must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss.
    pub train_loss: f64,
    pub valid: MetricsReport,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation F_avg.
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub crops_per_sample: usize,
}

/// SplitMix64 over the parts, so that every (seed, epoch, index) triple
/// gets its own stream.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Loss of one sample on `tape`.
pub fn sample_loss(tape: &mut Tape, model: &Model, pv: &ParamVars, input: &Signal, label: &Label) -> Result<Var> {
    let f = model.forward(tape, pv, input)?;
    match (model.spec.row_kind(), label) {
        (RowKind::Exclusive, Label::Class(c)) => nll_loss(tape, &[f.output], &[*c]),
        (RowKind::Multilabel, Label::Multi(t)) => bce_multilabel_loss(tape, &[f.output], std::slice::from_ref(t)),
        (RowKind::Multilabel, Label::Class(c)) => {
            let mut t = vec![0.0; model.spec.network.classes];
            let slot = t.get_mut(*c).ok_or_else(|| contract_err!("label {c} out of range"))?;
            *slot = 1.0;
            bce_multilabel_loss(tape, &[f.output], &[t])
        }
        (RowKind::Exclusive, Label::Multi(_)) => {
            Err(contract_err!("multi-label targets need a sigmoid-activated head"))
        }
    }
}

/// Final probability rows for every sample at `b = 1`.
pub fn predict_all(model: &Model, samples: &[LabeledSample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| model.predict(&s.signal)).collect()
}

/// Binary metrics of `model` on `samples`.
pub fn evaluate_model(model: &Model, samples: &[LabeledSample], positive: usize) -> Result<MetricsReport> {
    let preds = predict_all(model, samples)?;
    binary_metrics(model, &preds, samples, positive)
}

fn binary_metrics(
    model: &Model,
    preds: &[Vec<f64>],
    samples: &[LabeledSample],
    positive: usize,
) -> Result<MetricsReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.binary_class(positive)).collect();
    match model.spec.row_kind() {
        RowKind::Exclusive => evaluate_metrics(preds, &labels, positive),
        RowKind::Multilabel => {
            let rows: Vec<Vec<f64>> = preds.iter().map(|p| vec![1.0 - p[positive], p[positive]]).collect();
            let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l == positive)).collect();
            evaluate_metrics(&rows, &labels, 1)
        }
    }
}

/// End-to-end training with per-epoch validation; keeps the best epoch
/// (the earlier one on equal F_avg).
pub fn train(
    model: Model,
    train_set: &[LabeledSample],
    valid_set: &[LabeledSample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(contract_err!("training and validation sets must be non-empty"));
    }
    let frames = train_set[0].signal.frames();
    let crops_per_sample = model
        .spec
        .maps
        .iter()
        .map(|m| m.crop.starts(frames).map(|s| s.len()))
        .sum::<Result<usize>>()
        .unwrap_or(0);
    let order: Vec<usize> = match cfg.rebalance {
        Rebalance::None => (0..train_set.len()).collect(),
        Rebalance::OverUnder => {
            let labels: Vec<usize> = train_set.iter().map(|s| s.binary_class(cfg.positive_class)).collect();
            let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
            rebalance_indices(&labels, classes, mix_seed(&[cfg.seed, u64::MAX]))?
        }
    };
    let data: Vec<&LabeledSample> = order.iter().map(|&i| &train_set[i]).collect();

    let mut model = model;
    let mut state = AdamState::new(&model.params);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
            cfg.seed,
            epoch as u64,
            u64::MAX - 1,
        ])));
        let mut loss_total = 0.0;
        for (batch_no, batch) in perm.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Tensor> = model
                .params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &i in batch {
                let sample = data[i];
                let b = if cfg.offset > 1 {
                    ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, epoch as u64, i as u64])).gen_range(1..=cfg.offset)
                } else {
                    1
                };
                let input = shifted_view(&sample.signal, cfg.offset, b)?;
                let mut tape = Tape::new();
                let pv = model.params.register(&mut tape, true);
                let loss = sample_loss(&mut tape, &model, &pv, &input, &sample.label)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {value} at epoch {epoch}, batch {} (sample {})",
                        batch_no + 1,
                        sample.id
                    )));
                }
                loss_total += value;
                tape.backward(loss)?;
                for (acc, g) in grads.iter_mut().zip(pv.grads(&tape)) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, v)| *a += v);
                }
            }
            adam_step(&mut model.params, &grads, &mut state, &cfg.adam).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} at epoch {epoch}, batch {}", batch_no + 1)),
                other => other,
            })?;
        }
        let preds = predict_all(&model, valid_set)?;
        let valid = binary_metrics(&model, &preds, valid_set, cfg.positive_class)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_total / data.len() as f64,
            valid,
            seconds: clock.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        if best.as_ref().is_none_or(|(f, _, _)| valid.f_avg > *f) {
            best = Some((valid.f_avg, epoch, model.clone()));
        }
        history.push(record);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        crops_per_sample,
    })
}
