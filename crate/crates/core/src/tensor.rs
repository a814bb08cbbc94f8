//! Dense `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! are methods on the tape that take [`Var`] handles and append a node; the
//! recording order is the topological order, so [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use lpanet::tensor::{Tape, Tensor, Unary};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap()[0], 6.0);
//! # let _ = Unary::Relu;
//! ```
//!
//! Non-smooth operations (relu, clip, max, sort) record how close their
//! inputs were to a kink in [`Tape::margin`]; gradient checks use it to
//! reject evaluation points that sit on a tie.

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Element `(i, j)` of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Clip {
        lo: f64,
        hi: f64,
    },
    /// `x^r` for a constant exponent; inputs must be non-negative.
    Powf(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Elementwise derivative `df/dx` given `(x, f(x))`.
pub type Derivative = fn(f64, f64) -> f64;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        kernels: Var,
        bias: Var,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Unary {
        input: Var,
        kind: Unary,
    },
    Map {
        input: Var,
        deriv: Derivative,
    },
    Binary {
        lhs: Var,
        rhs: Var,
        kind: Binary,
    },
    ScaleShift {
        input: Var,
        scale: f64,
    },
    Reduce {
        input: Var,
        kind: Reduce,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Gather {
        input: Var,
        len: usize,
        inner: usize,
        indices: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Softmax {
        input: Var,
        width: usize,
    },
    RowCombination {
        weights: Var,
        rows: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Append-only record of one forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Tape::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Smallest distance to a non-differentiable point seen so far.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// Records a selection decision that sits `distance` away from flipping.
    pub fn note_margin(&mut self, distance: f64) {
        self.margin = self.margin.min(distance.abs());
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Valid 1-D convolution: `[C_in × L] * [C_out × C_in × K] + [C_out] -> [C_out × (L-K+1)]`.
    pub fn conv1d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(kernels), self.value(bias));
        if x.rank() != 2 || w.rank() != 3 || b.rank() != 1 {
            return Err(dim_err!(
                "conv1d expects [C_in × L], [C_out × C_in × K], [C_out]; got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ));
        }
        let (cin, len) = (x.shape[0], x.shape[1]);
        let (cout, wcin, k) = (w.shape[0], w.shape[1], w.shape[2]);
        if wcin != cin || b.shape[0] != cout {
            return Err(dim_err!(
                "conv1d channel mismatch: input {:?}, kernels {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ));
        }
        if len < k {
            return Err(dim_err!("conv1d input length L={len} is shorter than kernel K={k}"));
        }
        let lout = len - k + 1;
        let mut out = vec![0.0; cout * lout];
        for c in 0..cout {
            let row = &mut out[c * lout..(c + 1) * lout];
            row.fill(b.data[c]);
            for i in 0..cin {
                let xi = &x.data[i * len..(i + 1) * len];
                for t in 0..k {
                    let wv = w.data[(c * cin + i) * k + t];
                    for (o, xv) in row.iter_mut().zip(&xi[t..t + lout]) {
                        *o += wv * xv;
                    }
                }
            }
        }
        let rg = self.rg(&[input, kernels, bias]);
        let value = Tensor {
            shape: vec![cout, lout],
            data: out,
        };
        Ok(self.push(value, rg, Op::Conv1d { input, kernels, bias }))
    }

    /// Non-overlapping max pooling along the last axis of `[C × L]`; the
    /// `L mod width` tail is dropped.
    pub fn maxpool1d(&mut self, input: Var, width: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 {
            return Err(dim_err!("maxpool1d expects [C × L], got {:?}", x.shape()));
        }
        let (c, len) = (x.shape[0], x.shape[1]);
        if width == 0 || width > len {
            return Err(dim_err!("maxpool1d width {width} does not fit length L={len}"));
        }
        let lout = len / width;
        let mut out = Vec::with_capacity(c * lout);
        let mut argmax = Vec::with_capacity(c * lout);
        let mut margin = f64::INFINITY;
        for ch in 0..c {
            for t in 0..lout {
                let start = ch * len + t * width;
                let (idx, gap) = first_argmax(&x.data[start..start + width]);
                margin = margin.min(gap);
                argmax.push(start + idx);
                out.push(x.data[start + idx]);
            }
        }
        let rg = self.rg(&[input]);
        self.note_margin(margin);
        let value = Tensor {
            shape: vec![c, lout],
            data: out,
        };
        Ok(self.push(value, rg, Op::MaxPool1d { input, argmax }))
    }

    /// `weight · input + bias` with `weight: [M × N]`, `input: [N]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.affine_impl(input, weight, Some(bias))
    }

    /// `weight · input` without a bias term.
    pub fn matvec(&mut self, weight: Var, input: Var) -> Result<Var> {
        self.affine_impl(input, weight, None)
    }

    fn affine_impl(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        if w.rank() != 2 || x.rank() != 1 || w.shape[1] != x.shape[0] {
            return Err(dim_err!(
                "affine: weight {:?} does not apply to input {:?}",
                w.shape(),
                x.shape()
            ));
        }
        let (m, n) = (w.shape[0], w.shape[1]);
        let mut out: Vec<f64> = (0..m).map(|r| dot(&w.data[r * n..(r + 1) * n], &x.data)).collect();
        if let Some(b) = bias {
            let b = self.value(b);
            if b.shape() != [m] {
                return Err(dim_err!("affine: bias {:?} does not match output [{m}]", b.shape()));
            }
            for (o, bv) in out.iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::vector(out), rg, Op::Affine { input, weight, bias }))
    }

    pub fn unary(&mut self, input: Var, kind: Unary) -> Result<Var> {
        let x = self.value(input);
        let mut margin = f64::INFINITY;
        let data: Vec<f64> = match kind {
            Unary::Relu => x
                .data
                .iter()
                .map(|&v| {
                    margin = margin.min(v.abs());
                    v.max(0.0)
                })
                .collect(),
            Unary::Sigmoid => x.data.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Tanh => x.data.iter().map(|v| v.tanh()).collect(),
            Unary::Exp => x.data.iter().map(|v| v.exp()).collect(),
            Unary::Log => {
                if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::NumericDomain(format!("log of non-positive value {bad}")));
                }
                x.data.iter().map(|v| v.ln()).collect()
            }
            Unary::Powf(r) => {
                if let Some(bad) = x.data.iter().find(|&&v| v < 0.0 || v.is_nan()) {
                    return Err(Error::NumericDomain(format!("power {r} of negative value {bad}")));
                }
                x.data.iter().map(|v| v.powf(r)).collect()
            }
            Unary::Clip { lo, hi } => {
                if lo > hi {
                    return Err(dim_err!("clip bounds reversed: [{lo}, {hi}]"));
                }
                x.data
                    .iter()
                    .map(|&v| {
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                        v.clamp(lo, hi)
                    })
                    .collect()
            }
        };
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[input]);
        self.note_margin(margin);
        Ok(self.push(value, rg, Op::Unary { input, kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Unary::Clip { lo, hi })
    }

    /// Elementwise user function with its derivative `deriv(x, f(x))`.
    pub fn map(&mut self, input: Var, f: fn(f64) -> f64, deriv: Derivative) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::Map { input, deriv })
    }

    /// Elementwise arithmetic. Shapes must match, or one side must hold a
    /// single element that is broadcast over the other.
    pub fn binary(&mut self, lhs: Var, rhs: Var, kind: Binary) -> Result<Var> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        let shape = if a.shape == b.shape || b.numel() == 1 {
            a.shape.clone()
        } else if a.numel() == 1 {
            b.shape.clone()
        } else {
            return Err(dim_err!(
                "elementwise {kind:?} of incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        let n = a.numel().max(b.numel());
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(a.data[bidx(a, i)], b.data[bidx(b, i)])).collect();
        let rg = self.rg(&[lhs, rhs]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Binary { lhs, rhs, kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn scale_shift(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| scale * v + shift).collect(),
        };
        let rg = self.rg(&[input]);
        self.push(value, rg, Op::ScaleShift { input, scale })
    }

    /// Sum, mean or max along `axis`, which is removed from the shape.
    /// Max routes its gradient to the first occurrence of the maximum.
    pub fn reduce(&mut self, input: Var, kind: Reduce, axis: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() {
            return Err(dim_err!("reduce axis {axis} out of range for shape {:?}", x.shape()));
        }
        let outer: usize = x.shape[..axis].iter().product();
        let len = x.shape[axis];
        let inner: usize = x.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        let mut margin = f64::INFINITY;
        let mut lane = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                lane.clear();
                lane.extend((0..len).map(|k| x.data[(o * len + k) * inner + i]));
                out.push(match kind {
                    Reduce::Sum => lane.iter().sum(),
                    Reduce::Mean => lane.iter().sum::<f64>() / len as f64,
                    Reduce::Max => {
                        let (k, gap) = first_argmax(&lane);
                        margin = margin.min(gap);
                        argmax.push(k);
                        lane[k]
                    }
                });
            }
        }
        let mut shape = x.shape.clone();
        shape.remove(axis);
        let rg = self.rg(&[input]);
        self.note_margin(margin);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Op::Reduce {
                input,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let flat = self.flatten(x);
        self.reduce(flat, Reduce::Sum, 0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let flat = self.flatten(x);
        self.reduce(flat, Reduce::Mean, 0)
    }

    /// Selects `indices` along `axis`; indices may repeat.
    pub fn gather(&mut self, input: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.rank() {
            return Err(dim_err!("gather axis {axis} out of range for shape {:?}", x.shape()));
        }
        let len = x.shape[axis];
        if indices.is_empty() {
            return Err(dim_err!("gather with no indices"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return Err(dim_err!("gather index {bad} out of range for extent {len}"));
        }
        let outer: usize = x.shape[..axis].iter().product();
        let inner: usize = x.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let start = (o * len + k) * inner;
                data.extend_from_slice(&x.data[start..start + inner]);
            }
        }
        let mut shape = x.shape.clone();
        shape[axis] = indices.len();
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Gather {
                input,
                len,
                inner,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let extent = self.value(input).shape().get(axis).copied().unwrap_or(0);
        if len == 0 || start + len > extent {
            return Err(dim_err!(
                "slice [{start}, {}) exceeds extent {extent} on axis {axis}",
                start + len
            ));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(input, axis, &idx)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", x.shape()));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: x.data.clone(),
        };
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    pub fn flatten(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        if self.shape(input) == [n] {
            return input;
        }
        self.reshape(input, &[n]).expect("flatten preserves numel")
    }

    /// Concatenates the flattened inputs into one rank-1 tensor.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(dim_err!("concat of an empty list"));
        }
        let data: Vec<f64> = inputs
            .iter()
            .flat_map(|v| self.value(*v).data.iter().copied())
            .collect();
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::vector(data),
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Stacks equally shaped inputs along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(first) = inputs.first() else {
            return Err(dim_err!("stack of an empty list"));
        };
        let inner = self.value(*first).shape.clone();
        if let Some(bad) = inputs.iter().find(|v| self.value(**v).shape != inner) {
            return Err(dim_err!(
                "stack of mismatched shapes {inner:?} and {:?}",
                self.value(*bad).shape()
            ));
        }
        let flat = self.concat(inputs)?;
        let mut shape = vec![inputs.len()];
        shape.extend(inner);
        self.reshape(flat, &shape)
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let width = *x.shape.last().ok_or_else(|| dim_err!("softmax of a scalar"))?;
        let mut data = x.data.clone();
        for row in data.chunks_mut(width) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Softmax { input, width }))
    }

    /// `Σ_i weights[i] · rows[i, :]` for `weights: [n]`, `rows: [n × c]`.
    pub fn row_combination(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (w, r) = (self.value(weights), self.value(rows));
        if r.rank() != 2 || w.numel() != r.shape[0] {
            return Err(dim_err!(
                "row_combination: weights {:?} do not match rows {:?}",
                w.shape(),
                r.shape()
            ));
        }
        let c = r.shape[1];
        let mut out = vec![0.0; c];
        for (i, wi) in w.data.iter().enumerate() {
            for (o, rv) in out.iter_mut().zip(&r.data[i * c..(i + 1) * c]) {
                *o += wi * rv;
            }
        }
        let rg = self.rg(&[weights, rows]);
        Ok(self.push(Tensor::vector(out), rg, Op::RowCombination { weights, rows }))
    }

    /// Reorders the rows of `[n × c]` by descending `key_column` (stable).
    /// The permutation is treated as locally constant by the backward pass.
    pub fn sort_desc_by_key(&mut self, rows: Var, key_column: usize) -> Result<(Var, Vec<usize>)> {
        let r = self.value(rows);
        if r.rank() != 2 || key_column >= r.shape[1] {
            return Err(dim_err!(
                "sort key column {key_column} out of range for rows {:?}",
                r.shape()
            ));
        }
        let keys: Vec<f64> = (0..r.shape[0]).map(|i| r.at2(i, key_column)).collect();
        let perm = sort_desc_permutation(&keys);
        let margin = perm
            .windows(2)
            .map(|p| (keys[p[0]] - keys[p[1]]).abs())
            .fold(f64::INFINITY, f64::min);
        self.note_margin(margin);
        let sorted = self.gather(rows, 0, &perm)?;
        Ok((sorted, perm))
    }

    /// Populates gradients of the single-element `loss` for every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for node in &mut self.nodes {
            node.grad = None;
        }
        grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            backprop_node(nodes, &mut grads, i, &g);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv1d { input, kernels, bias } => {
            let x = &nodes[input.0].value;
            let w = &nodes[kernels.0].value;
            let (cin, len) = (x.shape[0], x.shape[1]);
            let (cout, k) = (w.shape[0], w.shape[2]);
            let lout = out.shape[1];
            if let Some(gb) = slot(nodes, grads, *bias) {
                for c in 0..cout {
                    gb[c] += g[c * lout..(c + 1) * lout].iter().sum::<f64>();
                }
            }
            if let Some(gw) = slot(nodes, grads, *kernels) {
                for c in 0..cout {
                    let gc = &g[c * lout..(c + 1) * lout];
                    for ci in 0..cin {
                        let xi = &x.data[ci * len..(ci + 1) * len];
                        for t in 0..k {
                            gw[(c * cin + ci) * k + t] += dot(gc, &xi[t..t + lout]);
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *input) {
                for c in 0..cout {
                    let gc = &g[c * lout..(c + 1) * lout];
                    for ci in 0..cin {
                        let gxi = &mut gx[ci * len..(ci + 1) * len];
                        for t in 0..k {
                            let wv = w.data[(c * cin + ci) * k + t];
                            for (d, gv) in gxi[t..t + lout].iter_mut().zip(gc) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool1d { input, argmax } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
            }
        }
        Op::Affine { input, weight, bias } => {
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            let n = w.shape[1];
            if let Some(b) = bias {
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_assign(gb, g);
                }
            }
            if let Some(gw) = slot(nodes, grads, *weight) {
                for (r, gv) in g.iter().enumerate() {
                    for (d, xv) in gw[r * n..(r + 1) * n].iter_mut().zip(&x.data) {
                        *d += gv * xv;
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *input) {
                for (r, gv) in g.iter().enumerate() {
                    for (d, wv) in gx.iter_mut().zip(&w.data[r * n..(r + 1) * n]) {
                        *d += gv * wv;
                    }
                }
            }
        }
        Op::Unary { input, kind } => {
            let x = &nodes[input.0].value.data;
            let y = &out.data;
            if let Some(gx) = slot(nodes, grads, *input) {
                for j in 0..g.len() {
                    let local = match *kind {
                        Unary::Relu => {
                            if x[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => y[j] * (1.0 - y[j]),
                        Unary::Tanh => 1.0 - y[j] * y[j],
                        Unary::Exp => y[j],
                        Unary::Log => 1.0 / x[j],
                        Unary::Powf(r) => r * x[j].powf(r - 1.0),
                        Unary::Clip { lo, hi } => {
                            if x[j] >= lo && x[j] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[j] += g[j] * local;
                }
            }
        }
        Op::Map { input, deriv } => {
            let x = &nodes[input.0].value.data;
            if let Some(gx) = slot(nodes, grads, *input) {
                for j in 0..g.len() {
                    gx[j] += g[j] * deriv(x[j], out.data[j]);
                }
            }
        }
        Op::Binary { lhs, rhs, kind } => {
            let a = &nodes[lhs.0].value;
            let b = &nodes[rhs.0].value;
            let n = g.len();
            if let Some(ga) = slot(nodes, grads, *lhs) {
                for j in 0..n {
                    let bv = b.data[bidx(b, j)];
                    let d = match kind {
                        Binary::Add | Binary::Sub => 1.0,
                        Binary::Mul => bv,
                        Binary::Div => 1.0 / bv,
                    };
                    ga[bidx(a, j)] += g[j] * d;
                }
            }
            if let Some(gb) = slot(nodes, grads, *rhs) {
                for j in 0..n {
                    let (av, bv) = (a.data[bidx(a, j)], b.data[bidx(b, j)]);
                    let d = match kind {
                        Binary::Add => 1.0,
                        Binary::Sub => -1.0,
                        Binary::Mul => av,
                        Binary::Div => -av / (bv * bv),
                    };
                    gb[bidx(b, j)] += g[j] * d;
                }
            }
        }
        Op::ScaleShift { input, scale } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for (d, gv) in gx.iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }
        }
        Op::Reduce {
            input,
            kind,
            outer,
            len,
            inner,
            argmax,
        } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let gv = g[o * inner + i];
                        match kind {
                            Reduce::Sum | Reduce::Mean => {
                                let s = if *kind == Reduce::Mean { gv / *len as f64 } else { gv };
                                for k in 0..*len {
                                    gx[(o * len + k) * inner + i] += s;
                                }
                            }
                            Reduce::Max => {
                                let k = argmax[o * inner + i];
                                gx[(o * len + k) * inner + i] += gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Gather {
            input,
            len,
            inner,
            indices,
        } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                let m = indices.len();
                let outer = g.len() / (m * inner);
                for o in 0..outer {
                    for (p, &k) in indices.iter().enumerate() {
                        let src = (o * m + p) * inner;
                        let dst = (o * len + k) * inner;
                        add_assign(&mut gx[dst..dst + inner], &g[src..src + inner]);
                    }
                }
            }
        }
        Op::Reshape { input } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                add_assign(gx, g);
            }
        }
        Op::Concat { inputs } => {
            let mut offset = 0;
            for v in inputs {
                let n = nodes[v.0].value.numel();
                if let Some(gx) = slot(nodes, grads, *v) {
                    add_assign(gx, &g[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::Softmax { input, width } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for ((gr, yr), dr) in g.chunks(*width).zip(out.data.chunks(*width)).zip(gx.chunks_mut(*width)) {
                    let s = dot(gr, yr);
                    for j in 0..*width {
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::RowCombination { weights, rows } => {
            let w = &nodes[weights.0].value;
            let r = &nodes[rows.0].value;
            let c = r.shape[1];
            if let Some(gw) = slot(nodes, grads, *weights) {
                for (i, d) in gw.iter_mut().enumerate() {
                    *d += dot(g, &r.data[i * c..(i + 1) * c]);
                }
            }
            if let Some(gr) = slot(nodes, grads, *rows) {
                for (i, wi) in w.data.iter().enumerate() {
                    for (d, gv) in gr[i * c..(i + 1) * c].iter_mut().zip(g) {
                        *d += wi * gv;
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn bidx(t: &Tensor, i: usize) -> usize {
    if t.numel() == 1 {
        0
    } else {
        i
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximum and the gap to the runner-up.
pub(crate) fn first_argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    let gap = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &v)| xs[best] - v)
        .fold(f64::INFINITY, f64::min);
    (best, gap)
}

/// Stable permutation ordering `keys` from largest to smallest.
pub fn sort_desc_permutation(keys: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    perm
}
