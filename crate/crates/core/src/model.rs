//! Complete model: cropping, the shared network, per-map aggregation and
//! classifier-map fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregate, fuse_classifier_maps, AggregatorSpec, AggregatorVars, RowKind};
use crate::error::{contract_err, Error, Result};
use crate::network::{FeatureMode, NetworkSpec};
use crate::params::{ParamSet, ParamVars};
use crate::signal::{replication_pad, shift_start, CropSpec, Signal};
use crate::tensor::{Tape, Tensor, Var};

/// One classifier map: a cropping scheme and the aggregator reading its crops.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSpec {
    pub crop: CropSpec,
    pub aggregator: AggregatorSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub network: NetworkSpec,
    pub maps: Vec<MapSpec>,
}

impl ModelSpec {
    /// Crops of 1200 frames every 257 frames (tail dropped) with maximum
    /// aggregation over the positive class.
    pub fn reference() -> Self {
        ModelSpec {
            network: NetworkSpec::reference(),
            maps: vec![MapSpec {
                crop: CropSpec::overlapping(1200, 257, true),
                aggregator: AggregatorSpec::max(),
            }],
        }
    }

    /// The same network applied once to the whole `frames`-long input.
    pub fn plain_cnn(frames: usize) -> Self {
        ModelSpec {
            network: NetworkSpec::reference(),
            maps: vec![MapSpec {
                crop: CropSpec::whole(frames),
                aggregator: AggregatorSpec::max(),
            }],
        }
    }

    pub fn row_kind(&self) -> RowKind {
        if self.network.head.is_exclusive() {
            RowKind::Exclusive
        } else {
            RowKind::Multilabel
        }
    }

    /// Width of the hidden-layer input shared by every map.
    pub fn feature_dim(&self) -> Result<usize> {
        let mut dim = None;
        for (i, m) in self.maps.iter().enumerate() {
            let d = self.network.feature_dim(m.crop.window)?;
            match dim {
                None => dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(contract_err!(
                        "map {i} feeds {d} features to the shared hidden layer, map 0 feeds {prev}"
                    ))
                }
                _ => {}
            }
        }
        dim.ok_or_else(|| contract_err!("a model needs at least one classifier map"))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.feature_dim()?;
        for m in &self.maps {
            m.aggregator.validate(self.network.classes, self.row_kind())?;
        }
        Ok(())
    }

    /// Text fingerprint of everything that fixes parameter names and shapes.
    pub fn descriptor(&self) -> String {
        let n = &self.network;
        let units: Vec<String> = n
            .conv_units
            .iter()
            .map(|u| {
                format!(
                    "{}x{}x{}:{}",
                    u.kernel_size,
                    u.pool_size,
                    u.out_maps,
                    u.activation.name()
                )
            })
            .collect();
        let (head, mode, pool) = (n.head.name(), n.mode.name(), n.adaptive_pool.name());
        let maps: Vec<String> = self
            .maps
            .iter()
            .map(|m| {
                let a = &m.aggregator;
                let mut s = format!("{}/{}", m.crop.window, a.kind.name());
                if a.weights_trainable {
                    s += &format!("/w{}", a.width());
                }
                if a.r_trainable {
                    s += "/r";
                }
                if a.b_trainable && a.kind == crate::aggregation::AggregatorKind::NoisyAnd {
                    s += "/b";
                }
                if a.kind == crate::aggregation::AggregatorKind::Attention {
                    s += &format!("/h{}", a.attention_hidden);
                }
                s
            })
            .collect();
        format!(
            "in={};conv={};fc={};head={head};classes={};mode={mode};pool={pool};maps={}",
            n.in_channels,
            units.join(","),
            n.fc_nodes,
            n.classes,
            maps.join(",")
        )
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Local probability rows `[n × c]`, one matrix per map.
    pub local: Vec<Var>,
    /// Per-crop representations, one list per map.
    pub reps: Vec<Vec<Var>>,
    /// Aggregated row `[c]` of each map.
    pub maps: Vec<Var>,
    /// Fused final row `[c]`.
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

impl Model {
    /// Builds a model with freshly initialized parameters.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let dim = spec.feature_dim()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        spec.network.init_params(dim, &mut rng, &mut params)?;
        for (i, m) in spec.maps.iter().enumerate() {
            m.aggregator
                .init_params(i, spec.network.fc_nodes, &mut rng, &mut params)?;
        }
        Ok(Model { spec, params })
    }

    /// Wraps existing parameters after checking names and shapes against
    /// a fresh initialization of `spec`.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        let fresh = Model::new(spec, 0)?;
        if fresh.params.names() != params.names() {
            return Err(contract_err!(
                "parameter names {:?} do not match the architecture ({:?})",
                params.names(),
                fresh.params.names()
            ));
        }
        for ((name, a), b) in fresh.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(contract_err!(
                    "parameter {name} has shape {:?}, the architecture needs {:?}",
                    b.shape(),
                    a.shape()
                ));
            }
        }
        Ok(Model {
            spec: fresh.spec,
            params,
        })
    }

    pub fn descriptor(&self) -> String {
        self.spec.descriptor()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Records the full forward computation of `input` on `tape`.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, input: &Signal) -> Result<Forward> {
        let net = &self.spec.network;
        if input.channels() != net.in_channels {
            return Err(Error::Dimension(format!(
                "model expects {} channel(s), input has {}",
                net.in_channels,
                input.channels()
            )));
        }
        let x = tape.constant(input.to_tensor());
        let shared = match net.mode {
            FeatureMode::TransformedFeatures => Some(net.conv_stack(tape, pv, x)?),
            FeatureMode::RawData => None,
        };
        let kind = self.spec.row_kind();
        let (mut local, mut all_reps, mut maps) = (Vec::new(), Vec::new(), Vec::new());
        for (i, map) in self.spec.maps.iter().enumerate() {
            let reps = match shared {
                Some(featmaps) => {
                    let crops = crate::network::crop_features_in_feature_space(tape, featmaps, &map.crop)?;
                    crops
                        .into_iter()
                        .map(|c| net.represent(tape, pv, c))
                        .collect::<Result<Vec<_>>>()?
                }
                None => {
                    let starts = map.crop.starts(input.frames())?;
                    starts
                        .into_iter()
                        .map(|s| {
                            let crop = tape.slice(x, 1, s, map.crop.window)?;
                            net.feature_extract(tape, pv, crop)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let rows = net.head_rows(tape, pv, &reps)?;
            let vars = AggregatorVars::resolve(&map.aggregator, i, tape, pv)?;
            let row = aggregate(tape, rows, &reps, &map.aggregator, &vars, kind)?;
            local.push(rows);
            all_reps.push(reps);
            maps.push(row);
        }
        let output = fuse_classifier_maps(tape, &maps, kind)?;
        Ok(Forward {
            local,
            reps: all_reps,
            maps,
            output,
        })
    }

    /// Final probability row for one input.
    pub fn predict(&self, input: &Signal) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, false);
        let f = self.forward(&mut tape, &pv, input)?;
        finite_row(&tape, f.output)
    }

    /// Local probability matrices, one per map.
    pub fn local_predictions(&self, input: &Signal) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let pv = self.params.register(&mut tape, false);
        let f = self.forward(&mut tape, &pv, input)?;
        Ok(f.local.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Averages the predictions of several start shifts `b` in `[1, offset]`.
    pub fn predict_b_average(&self, signal: &Signal, offset: usize, b_values: &[usize]) -> Result<Vec<f64>> {
        if b_values.is_empty() {
            return Err(contract_err!("no start shifts to average"));
        }
        let mut acc: Vec<f64> = Vec::new();
        for &b in b_values {
            let row = self.predict(&shifted_view(signal, offset, b)?)?;
            if acc.is_empty() {
                acc = row;
            } else {
                acc.iter_mut().zip(&row).for_each(|(a, r)| *a += r);
            }
        }
        let k = b_values.len() as f64;
        Ok(acc.into_iter().map(|v| v / k).collect())
    }
}

fn finite_row(tape: &Tape, v: Var) -> Result<Vec<f64>> {
    let t = tape.value(v);
    if !t.is_finite() {
        return Err(Error::Numeric("prediction is not finite".into()));
    }
    Ok(t.data().to_vec())
}

/// Replication-pads by `offset - 1` frames, drops the first `b - 1`
/// frames and keeps the original length, so every shift yields the same
/// crop layout.
pub fn shifted_view(signal: &Signal, offset: usize, b: usize) -> Result<Signal> {
    if offset == 0 || b == 0 || b > offset {
        return Err(contract_err!("start shift b={b} outside [1, {offset}]"));
    }
    if offset == 1 {
        return Ok(signal.clone());
    }
    let padded = replication_pad(signal, offset - 1)?;
    shift_start(&padded, b)?.window(0, signal.frames())
}
