//! Convolutional feature extractor and the per-crop regression heads.

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::params::{ParamSet, ParamVars};
use crate::signal::CropSpec;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Activation::Relu, Activation::Tanh, Activation::Sigmoid]
            .into_iter()
            .find(|a| a.name() == name)
    }
}

/// Convolution, activation, then non-overlapping max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvUnitSpec {
    pub kernel_size: usize,
    pub pool_size: usize,
    pub out_maps: usize,
    pub activation: Activation,
}

impl ConvUnitSpec {
    pub fn new(kernel_size: usize, pool_size: usize, out_maps: usize) -> Self {
        ConvUnitSpec {
            kernel_size,
            pool_size,
            out_maps,
            activation: Activation::Relu,
        }
    }
}

/// State activation of the recurrent head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecurrentSigma {
    /// One output node; rows are `[1 - y, y]`.
    Logistic,
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Binary head; rows are `[1 - y, y]`.
    Logistic,
    Softmax,
    SigmoidMultilabel,
    Recurrent(RecurrentSigma),
}

impl HeadKind {
    /// Whether each row is a distribution over mutually exclusive classes.
    pub fn is_exclusive(self) -> bool {
        !matches!(
            self,
            HeadKind::SigmoidMultilabel | HeadKind::Recurrent(RecurrentSigma::Sigmoid)
        )
    }

    pub const ALL: [HeadKind; 6] = [
        HeadKind::Logistic,
        HeadKind::Softmax,
        HeadKind::SigmoidMultilabel,
        HeadKind::Recurrent(RecurrentSigma::Logistic),
        HeadKind::Recurrent(RecurrentSigma::Softmax),
        HeadKind::Recurrent(RecurrentSigma::Sigmoid),
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Logistic => "logistic",
            HeadKind::Softmax => "softmax",
            HeadKind::SigmoidMultilabel => "sigmoid_multilabel",
            HeadKind::Recurrent(RecurrentSigma::Logistic) => "recurrent_logistic",
            HeadKind::Recurrent(RecurrentSigma::Softmax) => "recurrent_softmax",
            HeadKind::Recurrent(RecurrentSigma::Sigmoid) => "recurrent_sigmoid",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|h| h.name() == name)
    }

    fn single_output(self) -> bool {
        matches!(self, HeadKind::Logistic | HeadKind::Recurrent(RecurrentSigma::Logistic))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    /// Crops are cut from the input signal and each runs the full network.
    RawData,
    /// The conv stack runs once; crops are cut from its feature maps.
    TransformedFeatures,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::RawData => "raw",
            FeatureMode::TransformedFeatures => "transformed",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [FeatureMode::RawData, FeatureMode::TransformedFeatures]
            .into_iter()
            .find(|m| m.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptivePool {
    None,
    /// One value per feature map, whatever the length.
    GlobalMax,
}

impl AdaptivePool {
    pub fn name(self) -> &'static str {
        match self {
            AdaptivePool::None => "none",
            AdaptivePool::GlobalMax => "global_max",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [AdaptivePool::None, AdaptivePool::GlobalMax]
            .into_iter()
            .find(|m| m.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub conv_units: Vec<ConvUnitSpec>,
    pub fc_nodes: usize,
    pub head: HeadKind,
    /// Width `c` of each probability row.
    pub classes: usize,
    pub mode: FeatureMode,
    pub adaptive_pool: AdaptivePool,
}

impl NetworkSpec {
    /// Three-unit stack `[21, 7] / [13, 6] / [9, 6]` with 6, 7 and 5 maps,
    /// a 50-node hidden layer and a logistic head.
    pub fn reference() -> Self {
        NetworkSpec {
            in_channels: 1,
            conv_units: vec![
                ConvUnitSpec::new(21, 7, 6),
                ConvUnitSpec::new(13, 6, 7),
                ConvUnitSpec::new(9, 6, 5),
            ],
            fc_nodes: 50,
            head: HeadKind::Logistic,
            classes: 2,
            mode: FeatureMode::RawData,
            adaptive_pool: AdaptivePool::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.fc_nodes == 0 || self.classes == 0 {
            return Err(contract_err!("network needs channels, fc nodes and classes >= 1"));
        }
        if self.conv_units.is_empty() {
            return Err(contract_err!("network needs at least one conv unit"));
        }
        for (i, u) in self.conv_units.iter().enumerate() {
            if u.kernel_size == 0 || u.pool_size == 0 || u.out_maps == 0 {
                return Err(contract_err!("conv unit {i} has a zero size: {u:?}"));
            }
        }
        match self.head {
            HeadKind::Logistic | HeadKind::Recurrent(RecurrentSigma::Logistic) if self.classes != 2 => {
                Err(contract_err!("a logistic head emits 2-wide rows, not {}", self.classes))
            }
            HeadKind::Softmax | HeadKind::Recurrent(RecurrentSigma::Softmax) if self.classes < 2 => {
                Err(contract_err!("a softmax head needs at least 2 classes"))
            }
            _ => Ok(()),
        }
    }

    /// Number of logits the head computes.
    pub fn head_outputs(&self) -> usize {
        if self.head.single_output() {
            1
        } else {
            self.classes
        }
    }

    pub fn last_maps(&self) -> usize {
        self.conv_units.last().map_or(self.in_channels, |u| u.out_maps)
    }

    /// Length of the conv-stack output for an input of `width` frames.
    pub fn stack_length(&self, width: usize) -> Result<usize> {
        let mut len = width;
        for (i, u) in self.conv_units.iter().enumerate() {
            if len < u.kernel_size {
                return Err(dim_err!(
                    "conv unit {i}: length {len} is shorter than kernel {}",
                    u.kernel_size
                ));
            }
            len = len - u.kernel_size + 1;
            if len < u.pool_size {
                return Err(dim_err!(
                    "conv unit {i}: length {len} after convolution is shorter than pool {}",
                    u.pool_size
                ));
            }
            len /= u.pool_size;
        }
        Ok(len)
    }

    /// Width of the representation fed to the hidden layer when a crop is
    /// `crop_width` frames wide (input frames in raw mode, feature frames in
    /// transformed mode).
    pub fn feature_dim(&self, crop_width: usize) -> Result<usize> {
        if self.adaptive_pool == AdaptivePool::GlobalMax {
            if self.mode == FeatureMode::RawData {
                self.stack_length(crop_width)?;
            }
            return Ok(self.last_maps());
        }
        let len = match self.mode {
            FeatureMode::RawData => self.stack_length(crop_width)?,
            FeatureMode::TransformedFeatures => crop_width,
        };
        Ok(len * self.last_maps())
    }

    /// Adds Glorot-uniform weights and zero biases for a network whose
    /// hidden layer reads `feature_dim` values.
    pub fn init_params(&self, feature_dim: usize, rng: &mut impl Rng, params: &mut ParamSet) -> Result<()> {
        let mut cin = self.in_channels;
        for (i, u) in self.conv_units.iter().enumerate() {
            let shape = [u.out_maps, cin, u.kernel_size];
            let w = glorot(&shape, cin * u.kernel_size, u.out_maps * u.kernel_size, rng);
            params.insert(format!("conv{i}.weight"), w)?;
            params.insert(format!("conv{i}.bias"), Tensor::zeros(&[u.out_maps]))?;
            cin = u.out_maps;
        }
        let h = self.fc_nodes;
        params.insert("fc.weight", glorot(&[h, feature_dim], feature_dim, h, rng))?;
        params.insert("fc.bias", Tensor::zeros(&[h]))?;
        let outs = self.head_outputs();
        params.insert("head.weight", glorot(&[outs, h], h, outs, rng))?;
        params.insert("head.bias", Tensor::zeros(&[outs]))?;
        if let HeadKind::Recurrent(_) = self.head {
            params.insert("head.recurrent", glorot(&[outs, outs], outs, outs, rng))?;
        }
        Ok(())
    }

    /// Runs every conv unit over `input: [C × L]`.
    pub fn conv_stack(&self, tape: &mut Tape, pv: &ParamVars, input: Var) -> Result<Var> {
        let mut x = input;
        for (i, u) in self.conv_units.iter().enumerate() {
            let len = tape.shape(x)[1];
            if len < u.kernel_size || len - u.kernel_size + 1 < u.pool_size {
                return Err(dim_err!(
                    "conv unit {i}: length {len} cannot take kernel {} and pool {}",
                    u.kernel_size,
                    u.pool_size
                ));
            }
            let w = pv.get(&format!("conv{i}.weight"))?;
            let b = pv.get(&format!("conv{i}.bias"))?;
            let c = tape.conv1d(x, w, b)?;
            // every activation is monotone, so pooling first is equivalent
            let p = tape.maxpool1d(c, u.pool_size)?;
            x = u.activation.apply(tape, p)?;
        }
        Ok(x)
    }

    /// Flattens (or global-max-pools) feature maps and applies the hidden layer.
    pub fn represent(&self, tape: &mut Tape, pv: &ParamVars, featmaps: Var) -> Result<Var> {
        let flat = match self.adaptive_pool {
            AdaptivePool::GlobalMax => tape.reduce(featmaps, crate::tensor::Reduce::Max, 1)?,
            AdaptivePool::None => tape.flatten(featmaps),
        };
        let h = tape.affine(flat, pv.get("fc.weight")?, pv.get("fc.bias")?)?;
        tape.relu(h)
    }

    /// `F(x; Θ)`: conv stack followed by the hidden layer.
    pub fn feature_extract(&self, tape: &mut Tape, pv: &ParamVars, crop: Var) -> Result<Var> {
        let maps = self.conv_stack(tape, pv, crop)?;
        self.represent(tape, pv, maps)
    }

    /// Per-crop probability rows `[n × c]` for representations in crop order.
    pub fn head_rows(&self, tape: &mut Tape, pv: &ParamVars, reps: &[Var]) -> Result<Var> {
        if reps.is_empty() {
            return Err(contract_err!("no crops to score"));
        }
        let theta = pv.get("head.weight")?;
        let bias = pv.get("head.bias")?;
        let rows = match self.head {
            HeadKind::Logistic => reps
                .iter()
                .map(|&r| logistic_head(tape, r, theta, bias))
                .collect::<Result<Vec<_>>>()?,
            HeadKind::Softmax => reps
                .iter()
                .map(|&r| softmax_head(tape, r, theta, bias))
                .collect::<Result<Vec<_>>>()?,
            HeadKind::SigmoidMultilabel => reps
                .iter()
                .map(|&r| sigmoid_multilabel_head(tape, r, theta, bias))
                .collect::<Result<Vec<_>>>()?,
            HeadKind::Recurrent(sigma) => {
                let w = pv.get("head.recurrent")?;
                recurrent_head(tape, reps, theta, bias, w, sigma)?
            }
        };
        tape.stack(&rows)
    }
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape is positive")
}

/// `[1 - y, y]` with `y = sigmoid(θ·rep + bias)`.
pub fn logistic_head(tape: &mut Tape, rep: Var, theta: Var, bias: Var) -> Result<Var> {
    let z = tape.affine(rep, theta, bias)?;
    logistic_row(tape, z)
}

fn logistic_row(tape: &mut Tape, z: Var) -> Result<Var> {
    let neg = tape.scale_shift(z, -1.0, 0.0);
    let p0 = tape.sigmoid(neg)?;
    let p1 = tape.sigmoid(z)?;
    tape.concat(&[p0, p1])
}

pub fn softmax_head(tape: &mut Tape, rep: Var, theta: Var, bias: Var) -> Result<Var> {
    let z = tape.affine(rep, theta, bias)?;
    tape.softmax(z)
}

/// Independent `sigmoid(θ_j·rep + bias_j)` per class.
pub fn sigmoid_multilabel_head(tape: &mut Tape, rep: Var, theta: Var, bias: Var) -> Result<Var> {
    let z = tape.affine(rep, theta, bias)?;
    tape.sigmoid(z)
}

/// `ȳ_i = σ(W ȳ_{i-1} + θ·rep_i + bias)` from a zero initial state; returns
/// one row per crop.
pub fn recurrent_head(
    tape: &mut Tape,
    reps: &[Var],
    theta: Var,
    bias: Var,
    recurrent: Var,
    sigma: RecurrentSigma,
) -> Result<Vec<Var>> {
    if reps.is_empty() {
        return Err(contract_err!("recurrent head needs at least one crop"));
    }
    let outs = tape.shape(recurrent)[0];
    let mut state = tape.constant(Tensor::zeros(&[outs]));
    let mut rows = Vec::with_capacity(reps.len());
    for &rep in reps {
        let logits = tape.affine(rep, theta, bias)?;
        let pre = tape.affine(state, recurrent, logits)?;
        state = match sigma {
            RecurrentSigma::Logistic | RecurrentSigma::Sigmoid => tape.sigmoid(pre)?,
            RecurrentSigma::Softmax => tape.softmax(pre)?,
        };
        rows.push(match sigma {
            RecurrentSigma::Logistic => logistic_row(tape, pre)?,
            _ => state,
        });
    }
    Ok(rows)
}

/// Sliding-window slices `[C × window]` of feature maps `[C × L]`.
pub fn crop_features_in_feature_space(tape: &mut Tape, featmaps: Var, spec: &CropSpec) -> Result<Vec<Var>> {
    let len = tape.shape(featmaps)[1];
    if spec.window > len {
        return Err(dim_err!(
            "feature crop window {} is wider than the {len}-frame feature maps",
            spec.window
        ));
    }
    spec.starts(len)?
        .into_iter()
        .map(|s| tape.slice(featmaps, 1, s, spec.window))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(spec: &NetworkSpec, width: usize) -> ParamSet {
        let mut p = ParamSet::new();
        let dim = spec.feature_dim(width).unwrap();
        spec.init_params(dim, &mut ChaCha8Rng::seed_from_u64(1), &mut p)
            .unwrap();
        p
    }

    #[test]
    fn reference_stack_shapes() {
        let spec = NetworkSpec::reference();
        assert_eq!(spec.stack_length(1200).unwrap(), 3);
        assert_eq!(spec.feature_dim(1200).unwrap(), 15);
        assert_eq!(spec.stack_length(3000).unwrap(), 10);

        let p = build(&spec, 1200);
        let mut t = Tape::new();
        let pv = p.register(&mut t, false);
        let x = t.constant(Tensor::zeros(&[1, 1200]));
        let maps = spec.conv_stack(&mut t, &pv, x).unwrap();
        assert_eq!(t.shape(maps), [5, 3]);
        let rep = spec.represent(&mut t, &pv, maps).unwrap();
        assert_eq!(t.shape(rep), [50]);
        // zero input and zero biases stay zero through relu units
        assert!(t.value(rep).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn narrow_crop_names_failing_stage() {
        let spec = NetworkSpec::reference();
        let err = spec.stack_length(200).unwrap_err().to_string();
        assert!(err.contains("conv unit 2"), "{err}");
        assert!(spec.stack_length(100).unwrap_err().to_string().contains("conv unit 1"));
        assert!(spec.stack_length(10).unwrap_err().to_string().contains("conv unit 0"));
    }

    #[test]
    fn global_max_collapses_length() {
        let spec = NetworkSpec {
            adaptive_pool: AdaptivePool::GlobalMax,
            ..NetworkSpec::reference()
        };
        let p = build(&spec, 900);
        let mut t = Tape::new();
        let pv = p.register(&mut t, false);
        let a = t.constant(Tensor::full(&[1, 900], 0.3));
        let b = t.constant(Tensor::full(&[1, 1200], -0.2));
        let ra = spec.feature_extract(&mut t, &pv, a).unwrap();
        let rb = spec.feature_extract(&mut t, &pv, b).unwrap();
        assert_eq!(t.shape(ra), t.shape(rb));
    }

    #[test]
    fn logistic_head_examples() {
        let mut t = Tape::new();
        let rep = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let bias = t.constant(Tensor::zeros(&[1]));
        let zero = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let row = logistic_head(&mut t, rep, zero, bias).unwrap();
        assert_eq!(t.value(row).data(), &[0.5, 0.5]);

        let ln3 = t.constant(Tensor::matrix(1, 2, vec![3f64.ln(), 0.0]).unwrap());
        let row = logistic_head(&mut t, rep, ln3, bias).unwrap();
        assert_abs_diff_eq!(t.value(row).data()[1], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(row).data()[0], 0.25, epsilon = 1e-15);

        let huge = t.constant(Tensor::matrix(1, 2, vec![500.0, 0.0]).unwrap());
        let row = logistic_head(&mut t, rep, huge, bias).unwrap();
        assert_eq!(t.value(row).data()[1], 1.0);
    }

    #[test]
    fn softmax_head_examples() {
        let mut t = Tape::new();
        let rep = t.constant(Tensor::vector(vec![1.0]));
        let bias = t.constant(Tensor::zeros(&[3]));
        let eq = t.constant(Tensor::matrix(3, 1, vec![0.7, 0.7, 0.7]).unwrap());
        let row = softmax_head(&mut t, rep, eq, bias).unwrap();
        for v in t.value(row).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let bias2 = t.constant(Tensor::zeros(&[2]));
        let th = t.constant(Tensor::matrix(2, 1, vec![0.0, 3f64.ln()]).unwrap());
        let row = softmax_head(&mut t, rep, th, bias2).unwrap();
        assert_abs_diff_eq!(t.value(row).data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(row).data()[1], 0.75, epsilon = 1e-15);

        let shifted = t.constant(Tensor::vector(vec![41.0, 41.0]));
        let row2 = softmax_head(&mut t, rep, th, shifted).unwrap();
        for (a, b) in t.value(row).data().iter().zip(t.value(row2).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn multilabel_head_examples() {
        let mut t = Tape::new();
        let rep = t.constant(Tensor::vector(vec![1.0]));
        let bias = t.constant(Tensor::zeros(&[3]));
        let zero = t.constant(Tensor::zeros(&[3, 1]));
        let row = sigmoid_multilabel_head(&mut t, rep, zero, bias).unwrap();
        assert_eq!(t.value(row).data(), &[0.5, 0.5, 0.5]);

        let big = t.constant(Tensor::matrix(3, 1, vec![800.0, 0.0, 0.0]).unwrap());
        let row = sigmoid_multilabel_head(&mut t, rep, big, bias).unwrap();
        assert_eq!(t.value(row).data(), &[1.0, 0.5, 0.5]);

        let bias2 = t.constant(Tensor::zeros(&[2]));
        let th = t.constant(Tensor::matrix(2, 1, vec![3f64.ln(), -(3f64.ln())]).unwrap());
        let row = sigmoid_multilabel_head(&mut t, rep, th, bias2).unwrap();
        assert_abs_diff_eq!(t.value(row).data()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(t.value(row).data()[1], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn recurrent_with_zero_coupling_matches_plain_head() {
        let mut t = Tape::new();
        let reps: Vec<Var> = [[0.3, -1.0], [1.2, 0.4], [-0.5, 0.9]]
            .iter()
            .map(|r| t.constant(Tensor::vector(r.to_vec())))
            .collect();
        let theta = t.constant(Tensor::matrix(3, 2, vec![0.2, -0.4, 1.1, 0.3, -0.7, 0.5]).unwrap());
        let bias = t.constant(Tensor::vector(vec![0.1, -0.2, 0.05]));
        let w0 = t.constant(Tensor::zeros(&[3, 3]));
        let rows = recurrent_head(&mut t, &reps, theta, bias, w0, RecurrentSigma::Softmax).unwrap();
        for (row, &rep) in rows.iter().zip(&reps) {
            let plain = softmax_head(&mut t, rep, theta, bias).unwrap();
            for (a, b) in t.value(*row).data().iter().zip(t.value(plain).data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }

        // single crop from a zero state ignores any finite coupling
        let w = t.constant(Tensor::full(&[3, 3], 7.5));
        let one = recurrent_head(&mut t, &reps[..1], theta, bias, w, RecurrentSigma::Softmax).unwrap();
        let plain = softmax_head(&mut t, reps[0], theta, bias).unwrap();
        assert_eq!(t.value(one[0]).data(), t.value(plain).data());

        assert!(recurrent_head(&mut t, &[], theta, bias, w, RecurrentSigma::Softmax).is_err());
    }

    #[test]
    fn recurrent_logistic_rows() {
        let mut t = Tape::new();
        let reps: Vec<Var> = (0..2).map(|i| t.constant(Tensor::vector(vec![i as f64]))).collect();
        let theta = t.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let bias = t.constant(Tensor::zeros(&[1]));
        let w = t.constant(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let rows = recurrent_head(&mut t, &reps, theta, bias, w, RecurrentSigma::Logistic).unwrap();
        assert_eq!(t.value(rows[0]).data(), &[0.5, 0.5]);
        // second step: sigmoid(2 * 0.5 + 1)
        let y = crate::tensor::sigmoid(2.0);
        assert_abs_diff_eq!(t.value(rows[1]).data()[1], y, epsilon = 1e-15);
    }

    #[test]
    fn feature_space_crops() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let crops = crop_features_in_feature_space(&mut t, f, &CropSpec::overlapping(2, 1, false)).unwrap();
        assert_eq!(crops.len(), 2);
        assert_eq!(t.value(crops[1]).data(), &[2.0, 3.0, 5.0, 6.0]);
        assert!(crop_features_in_feature_space(&mut t, f, &CropSpec::overlapping(4, 1, false)).is_err());
    }
}
