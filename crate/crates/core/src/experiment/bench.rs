//! One model per aggregator on shared synthetic data.

use crate::aggregation::{AggregatorKind, AggregatorSpec};
use crate::error::Result;
use crate::model::{Model, ModelSpec};
use crate::prep::{hash_str, PrepSpec};
use crate::synth::{synth_dataset, SynthSpec};
use crate::training::{
    evaluate_model, mix_seed, train, AdamConfig, LabeledSample, MetricsReport, Rebalance, TrainConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub aggregators: Vec<AggregatorKind>,
    pub synth: SynthSpec,
    pub prep: PrepSpec,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            n_train: 400,
            n_valid: 100,
            n_test: 200,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            aggregators: AggregatorKind::ALL.to_vec(),
            synth: SynthSpec::default(),
            prep: PrepSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub aggregator: AggregatorKind,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

/// Seed of one bench row; depends only on the run seed and the aggregator.
pub fn row_seed(seed: u64, kind: AggregatorKind) -> u64 {
    mix_seed(&[seed, hash_str(kind.name())])
}

/// The bench configuration of `kind`: trainable coefficients where the
/// aggregator has them, the top crop only for rank aggregators.
pub fn bench_aggregator(kind: AggregatorKind) -> AggregatorSpec {
    let mut a = AggregatorSpec::new(kind);
    if matches!(kind, AggregatorKind::GenMean | AggregatorKind::LogSumExp) {
        a.r_trainable = true;
    }
    a
}

pub struct BenchData {
    pub train: Vec<LabeledSample>,
    pub valid: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn bench_data(spec: &BenchSpec) -> Result<BenchData> {
    let split = |n: usize, part: u64| -> Result<Vec<LabeledSample>> {
        let raw = synth_dataset(n, mix_seed(&[spec.seed, part]), &spec.synth)?;
        spec.prep
            .apply_all(&raw.into_iter().map(|s| s.sample).collect::<Vec<_>>())
    };
    Ok(BenchData {
        train: split(spec.n_train, 0)?,
        valid: split(spec.n_valid, 1)?,
        test: split(spec.n_test, 2)?,
    })
}

pub fn bench_row(spec: &BenchSpec, data: &BenchData, kind: AggregatorKind) -> Result<BenchRow> {
    let seed = row_seed(spec.seed, kind);
    let mut model_spec = ModelSpec::reference();
    model_spec.maps[0].aggregator = bench_aggregator(kind);
    let model = Model::new(model_spec, seed)?;
    let cfg = TrainConfig {
        epochs: spec.epochs,
        batch_size: spec.batch_size,
        adam: AdamConfig {
            learning_rate: spec.learning_rate,
            ..AdamConfig::default()
        },
        seed,
        rebalance: Rebalance::OverUnder,
        offset: 1,
        positive_class: 1,
    };
    let out = train(model, &data.train, &data.valid, &cfg, &mut |_| {})?;
    Ok(BenchRow {
        aggregator: kind,
        seed,
        best_epoch: out.best_epoch,
        test: evaluate_model(&out.best, &data.test, 1)?,
    })
}

/// Runs every aggregator in `spec.aggregators`; `progress` sees each row.
pub fn run_bench(spec: &BenchSpec, progress: &mut dyn FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    let data = bench_data(spec)?;
    spec.aggregators
        .iter()
        .map(|&k| {
            let row = bench_row(spec, &data, k)?;
            progress(&row);
            Ok(row)
        })
        .collect()
}
