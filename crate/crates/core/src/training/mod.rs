//! Losses, optimizer, rebalancing, metrics and the training loop.

mod adam;
mod loss;
mod metrics;
mod rebalance;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{bce_multilabel_loss, nll_loss};
pub use metrics::{argmax, evaluate_metrics, MetricsReport};
pub use rebalance::{rebalance_dataset, rebalance_indices, rebalance_target};
pub use trainer::{
    evaluate_model, mix_seed, predict_all, sample_loss, train, EpochRecord, Rebalance, TrainConfig, TrainOutcome,
};

use crate::signal::Signal;

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// One 0/1 target per class.
    Multi(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub signal: Signal,
    pub label: Label,
}

impl LabeledSample {
    pub fn new(id: impl Into<String>, signal: Signal, class: usize) -> Self {
        LabeledSample {
            id: id.into(),
            signal,
            label: Label::Class(class),
        }
    }

    /// Class used for rebalancing and binary metrics: the class itself, or
    /// whether `positive` is on for a multi-label target.
    pub fn binary_class(&self, positive: usize) -> usize {
        match &self.label {
            Label::Class(c) => *c,
            Label::Multi(t) => usize::from(t.get(positive).copied().unwrap_or(0.0) == 1.0),
        }
    }
}
