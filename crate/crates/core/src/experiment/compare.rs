//! Cropped-and-aggregated model against the same network run on the whole
//! input, on the synthetic rare-pattern task.

use crate::error::Result;
use crate::model::{Model, ModelSpec};
use crate::prep::PrepSpec;
use crate::synth::{synth_dataset, SynthSpec};
use crate::training::{
    evaluate_model, mix_seed, train, AdamConfig, EpochRecord, LabeledSample, MetricsReport, Rebalance, TrainConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub synth: SynthSpec,
    pub prep: PrepSpec,
}

impl Default for ComparisonSpec {
    fn default() -> Self {
        ComparisonSpec {
            n_train: 2000,
            n_valid: 400,
            n_test: 600,
            seeds: vec![1, 2, 3],
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            synth: SynthSpec::default(),
            prep: PrepSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub lpanet: MetricsReport,
    pub cnn: MetricsReport,
    pub lpanet_best_epoch: usize,
    pub cnn_best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<SeedResult>,
    pub lpanet_params: usize,
    pub cnn_params: usize,
}

impl ComparisonReport {
    pub fn mean_f_avg(&self) -> (f64, f64) {
        let n = self.rows.len().max(1) as f64;
        (
            self.rows.iter().map(|r| r.lpanet.f_avg).sum::<f64>() / n,
            self.rows.iter().map(|r| r.cnn.f_avg).sum::<f64>() / n,
        )
    }

    /// Mean F_avg of the cropped model minus that of the whole-input one.
    pub fn gap(&self) -> f64 {
        let (a, b) = self.mean_f_avg();
        a - b
    }
}

fn split(n: usize, seed: u64, part: u64, spec: &ComparisonSpec) -> Result<Vec<LabeledSample>> {
    let raw = synth_dataset(n, mix_seed(&[seed, part]), &spec.synth)?;
    let samples: Vec<LabeledSample> = raw.into_iter().map(|s| s.sample).collect();
    spec.prep.apply_all(&samples)
}

/// Trains both models on identical data for every seed and scores them on
/// the held-out split. `progress` receives (seed, model name, epoch record).
pub fn run_comparison(
    spec: &ComparisonSpec,
    progress: &mut dyn FnMut(u64, &str, &EpochRecord),
) -> Result<ComparisonReport> {
    let frames = spec.prep.target_frames.unwrap_or(spec.synth.max_frames);
    let mut rows = Vec::with_capacity(spec.seeds.len());
    let mut counts = (0, 0);
    for &seed in &spec.seeds {
        let train_set = split(spec.n_train, seed, 0, spec)?;
        let valid_set = split(spec.n_valid, seed, 1, spec)?;
        let test_set = split(spec.n_test, seed, 2, spec)?;
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
        let mut run = |name: &str, model_spec: ModelSpec| -> Result<(MetricsReport, usize, usize)> {
            let model = Model::new(model_spec, mix_seed(&[seed, 7]))?;
            let n_params = model.num_params();
            let out = train(model, &train_set, &valid_set, &cfg, &mut |r| progress(seed, name, r))?;
            Ok((evaluate_model(&out.best, &test_set, 1)?, out.best_epoch, n_params))
        };
        let (lpanet, lpanet_best_epoch, lp) = run("lpanet", ModelSpec::reference())?;
        let (cnn, cnn_best_epoch, cp) = run("cnn", ModelSpec::plain_cnn(frames))?;
        counts = (lp, cp);
        rows.push(SeedResult {
            seed,
            lpanet,
            cnn,
            lpanet_best_epoch,
            cnn_best_epoch,
        });
    }
    Ok(ComparisonReport {
        rows,
        lpanet_params: counts.0,
        cnn_params: counts.1,
    })
}
