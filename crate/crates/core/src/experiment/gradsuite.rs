//! End-to-end finite-difference check of every head paired with every
//! aggregator, on small random three-crop bags.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{AggregatorKind, AggregatorSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::model::{MapSpec, Model, ModelSpec};
use crate::network::{AdaptivePool, ConvUnitSpec, FeatureMode, HeadKind, NetworkSpec, RecurrentSigma};
use crate::signal::{CropSpec, Signal};
use crate::tensor::Tape;
use crate::training::{mix_seed, sample_loss, Label};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Evaluation points closer than this to a kink are redrawn.
pub const MIN_MARGIN: f64 = 1e-3;
const FRAMES: usize = 40;
const ATTEMPTS: u64 = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub head: HeadKind,
    pub aggregator: AggregatorSpec,
}

impl GradCase {
    pub fn name(&self) -> String {
        let a = &self.aggregator;
        let mut s = format!("{}+{}", self.head.name(), a.kind.name());
        if self.head.is_exclusive() && a.prioritized.len() > 1 && a.kind != AggregatorKind::Attention {
            s += &format!("/il{}", a.prioritized.len());
        }
        s
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            network: NetworkSpec {
                in_channels: 1,
                conv_units: vec![ConvUnitSpec::new(3, 2, 2)],
                fc_nodes: 4,
                head: self.head,
                classes: classes_for(self.head),
                mode: FeatureMode::RawData,
                adaptive_pool: AdaptivePool::None,
            },
            maps: vec![MapSpec {
                crop: CropSpec::overlapping(16, 12, true),
                aggregator: self.aggregator.clone(),
            }],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCaseResult {
    pub name: String,
    pub report: GradCheckReport,
    /// Evaluation points drawn before one cleared [`MIN_MARGIN`].
    pub attempts: u64,
}

impl GradCaseResult {
    pub fn passed(&self) -> bool {
        self.report.rel_error <= TOLERANCE
    }
}

/// The aggregator with every trainable coefficient it supports switched on.
fn trainable(kind: AggregatorKind) -> AggregatorSpec {
    let mut a = AggregatorSpec::new(kind);
    match kind {
        AggregatorKind::TopkWeighted => {
            a = a.with_ranks(1, 2);
            a.weights_trainable = true;
        }
        AggregatorKind::GenMean | AggregatorKind::LogSumExp => a.r_trainable = true,
        AggregatorKind::AdaptiveAvg => a.p1 = 0.3,
        _ => {}
    }
    a
}

fn classes_for(head: HeadKind) -> usize {
    match head {
        HeadKind::Logistic | HeadKind::Recurrent(RecurrentSigma::Logistic) => 2,
        _ => 3,
    }
}

/// Every head with every aggregator, plus a two-class prioritized race on
/// the three-class exclusive heads.
pub fn suite_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    for head in HeadKind::ALL {
        let race = head.is_exclusive() && classes_for(head) == 3;
        for kind in AggregatorKind::ALL {
            let mut aggregator = trainable(kind);
            if race {
                aggregator.prioritized = vec![2];
            }
            cases.push(GradCase { head, aggregator });
            if race && kind != AggregatorKind::Attention {
                let mut aggregator = trainable(kind);
                aggregator.prioritized = vec![1, 2];
                cases.push(GradCase { head, aggregator });
            }
        }
    }
    cases
}

/// Checks one case, redrawing parameters, input and label until the
/// evaluation point sits at least [`MIN_MARGIN`] away from every kink.
pub fn check_case(case: &GradCase, seed: u64) -> Result<GradCaseResult> {
    let spec = case.model_spec();
    let classes = spec.network.classes;
    let exclusive = case.head.is_exclusive();
    for attempt in 0..ATTEMPTS {
        let s = mix_seed(&[seed, attempt]);
        let model = Model::new(spec.clone(), s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[s, 1]));
        let input = Signal::mono((0..FRAMES).map(|_| rng.gen_range(-1.0..1.0)).collect(), 150.0)?;
        let label = if exclusive {
            Label::Class(rng.gen_range(0..classes))
        } else {
            Label::Multi((0..classes).map(|_| f64::from(rng.gen_bool(0.5) as u8)).collect())
        };

        let mut tape = Tape::new();
        let pv = model.params.register(&mut tape, false);
        sample_loss(&mut tape, &model, &pv, &input, &label)?;
        if tape.margin() < MIN_MARGIN {
            continue;
        }
        let report = finite_diff_check(|t, v| sample_loss(t, &model, v, &input, &label), &model.params, STEP)?;
        return Ok(GradCaseResult {
            name: case.name(),
            report,
            attempts: attempt + 1,
        });
    }
    Err(Error::Numeric(format!(
        "{}: no evaluation point {MIN_MARGIN} away from a kink in {ATTEMPTS} draws",
        case.name()
    )))
}

/// Runs [`suite_cases`]; `progress` sees each result as it completes.
pub fn gradient_suite(seed: u64, progress: &mut dyn FnMut(&GradCaseResult)) -> Result<Vec<GradCaseResult>> {
    suite_cases()
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let r = check_case(case, mix_seed(&[seed, i as u64]))?;
            progress(&r);
            Ok(r)
        })
        .collect()
}
