//! Aggregation functions turning per-crop probability rows into one
//! bag-level row, plus classifier-map fusion.

use rand::Rng;

use crate::error::{contract_err, Error, Result};
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{sigmoid, Reduce, Tape, Tensor, Var};

/// Probability clipping constant applied before logs and odds.
pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    TopkWeighted,
    AdaptiveAvg,
    MajorityVote,
    Attention,
    NoisyOr,
    IntSegRec,
    GenMean,
    LogSumExp,
    NoisyAnd,
    LinearSoftmax,
    ExpSoftmax,
    EvenAdd,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 12] = [
        AggregatorKind::TopkWeighted,
        AggregatorKind::AdaptiveAvg,
        AggregatorKind::MajorityVote,
        AggregatorKind::Attention,
        AggregatorKind::NoisyOr,
        AggregatorKind::IntSegRec,
        AggregatorKind::GenMean,
        AggregatorKind::LogSumExp,
        AggregatorKind::NoisyAnd,
        AggregatorKind::LinearSoftmax,
        AggregatorKind::ExpSoftmax,
        AggregatorKind::EvenAdd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorKind::TopkWeighted => "topk_weighted",
            AggregatorKind::AdaptiveAvg => "adaptive_avg",
            AggregatorKind::MajorityVote => "majority_vote",
            AggregatorKind::Attention => "attention",
            AggregatorKind::NoisyOr => "noisy_or",
            AggregatorKind::IntSegRec => "int_seg_rec",
            AggregatorKind::GenMean => "gen_mean",
            AggregatorKind::LogSumExp => "log_sum_exp",
            AggregatorKind::NoisyAnd => "noisy_and",
            AggregatorKind::LinearSoftmax => "linear_softmax",
            AggregatorKind::ExpSoftmax => "exp_softmax",
            AggregatorKind::EvenAdd => "even_add",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Scalar pooling formulas that go through the vector extension for
    /// exclusive rows.
    pub fn is_pool(self) -> bool {
        matches!(
            self,
            AggregatorKind::NoisyOr
                | AggregatorKind::IntSegRec
                | AggregatorKind::GenMean
                | AggregatorKind::LogSumExp
                | AggregatorKind::NoisyAnd
                | AggregatorKind::LinearSoftmax
                | AggregatorKind::ExpSoftmax
                | AggregatorKind::EvenAdd
        )
    }
}

/// How non-prioritized classes are reduced in the vector extension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NilReduction {
    Mean,
    /// Entry at rank `m1`.
    First,
    /// Entry at rank `m2`.
    Last,
}

impl NilReduction {
    pub fn name(self) -> &'static str {
        match self {
            NilReduction::Mean => "mean",
            NilReduction::First => "first",
            NilReduction::Last => "last",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [NilReduction::Mean, NilReduction::First, NilReduction::Last]
            .into_iter()
            .find(|k| k.name() == name)
    }
}

/// Whether the rows being aggregated are distributions or independent labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Exclusive,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorSpec {
    pub kind: AggregatorKind,
    /// 1-based rank range.
    pub m1: usize,
    pub m2: usize,
    /// Constant rank weights; empty means all ones. Ignored when trainable.
    pub weights: Vec<f64>,
    pub weights_trainable: bool,
    pub p1: f64,
    pub p2: f64,
    pub r: f64,
    pub r_trainable: bool,
    pub a: f64,
    pub b_shift: f64,
    pub b_trainable: bool,
    /// Prioritized classes `IL`.
    pub prioritized: Vec<usize>,
    pub nil_reduction: NilReduction,
    /// Shrink `m2` (and `m1`) to the bag size instead of failing.
    pub clamp_to_n: bool,
    pub attention_hidden: usize,
}

impl AggregatorSpec {
    pub fn new(kind: AggregatorKind) -> Self {
        AggregatorSpec {
            kind,
            m1: 1,
            m2: 1,
            weights: Vec::new(),
            weights_trainable: false,
            p1: 0.5,
            p2: 1.0,
            r: if kind == AggregatorKind::LogSumExp { 5.0 } else { 2.0 },
            r_trainable: false,
            a: 10.0,
            b_shift: 0.5,
            b_trainable: true,
            prioritized: vec![1],
            nil_reduction: NilReduction::Mean,
            clamp_to_n: false,
            attention_hidden: 16,
        }
    }

    /// Maximum aggregation over the prioritized class.
    pub fn max() -> Self {
        Self::new(AggregatorKind::TopkWeighted)
    }

    pub fn with_ranks(mut self, m1: usize, m2: usize) -> Self {
        self.m1 = m1;
        self.m2 = m2;
        self
    }

    pub fn width(&self) -> usize {
        self.m2 + 1 - self.m1
    }

    pub fn validate(&self, classes: usize, rows: RowKind) -> Result<()> {
        if self.m1 == 0 || self.m1 > self.m2 {
            return Err(contract_err!(
                "rank range needs 1 <= m1 <= m2, got m1={} m2={}",
                self.m1,
                self.m2
            ));
        }
        if !self.weights_trainable && !self.weights.is_empty() && self.weights.len() != self.width() {
            return Err(contract_err!(
                "{} rank weights given for m2-m1+1 = {}",
                self.weights.len(),
                self.width()
            ));
        }
        if !(0.0..=1.0).contains(&self.p1) || !(0.0..=1.0).contains(&self.p2) || self.p1 > self.p2 {
            return Err(contract_err!(
                "adaptive thresholds need 0 <= p1 <= p2 <= 1, got {} and {}",
                self.p1,
                self.p2
            ));
        }
        if matches!(self.kind, AggregatorKind::GenMean | AggregatorKind::LogSumExp) && !(self.r > 0.0) {
            return Err(contract_err!("{} needs r > 0, got {}", self.kind.name(), self.r));
        }
        if !(0.0..=1.0).contains(&self.b_shift) {
            return Err(contract_err!(
                "noisy-and shift must lie in [0, 1], got {}",
                self.b_shift
            ));
        }
        if self.b_trainable && (self.b_shift == 0.0 || self.b_shift == 1.0) && self.kind == AggregatorKind::NoisyAnd {
            return Err(contract_err!(
                "a trainable noisy-and shift must start strictly inside (0, 1)"
            ));
        }
        if self.kind == AggregatorKind::Attention && self.attention_hidden == 0 {
            return Err(contract_err!("attention needs a hidden width >= 1"));
        }
        if rows == RowKind::Exclusive && self.kind != AggregatorKind::Attention {
            if self.prioritized.is_empty() {
                return Err(contract_err!("at least one prioritized class is required"));
            }
            let mut seen = vec![false; classes];
            for &j in &self.prioritized {
                if j >= classes {
                    return Err(contract_err!(
                        "prioritized class {j} out of range for {classes} classes"
                    ));
                }
                if std::mem::replace(&mut seen[j], true) {
                    return Err(contract_err!("prioritized class {j} listed twice"));
                }
            }
        }
        Ok(())
    }

    /// Adds this aggregator's trainable parameters under the `agg{map}.` prefix.
    pub fn init_params(&self, map: usize, rep_dim: usize, rng: &mut impl Rng, params: &mut ParamSet) -> Result<()> {
        let prefix = format!("agg{map}");
        if self.weights_trainable && uses_rank_weights(self.kind) {
            params.insert(format!("{prefix}.weights"), Tensor::zeros(&[self.width()]))?;
        }
        if self.r_trainable && matches!(self.kind, AggregatorKind::GenMean | AggregatorKind::LogSumExp) {
            params.insert(format!("{prefix}.log_r"), Tensor::scalar(self.r.ln()))?;
        }
        if self.b_trainable && self.kind == AggregatorKind::NoisyAnd {
            let b = self.b_shift;
            params.insert(format!("{prefix}.shift"), Tensor::scalar((b / (1.0 - b)).ln()))?;
        }
        if self.kind == AggregatorKind::Attention {
            let h = self.attention_hidden;
            let l1 = (6.0 / (rep_dim + h) as f64).sqrt();
            let w1 = (0..h * rep_dim).map(|_| rng.gen_range(-l1..=l1)).collect();
            params.insert(format!("{prefix}.attn_w1"), Tensor::new(vec![h, rep_dim], w1)?)?;
            params.insert(format!("{prefix}.attn_b"), Tensor::zeros(&[h]))?;
            let l2 = (6.0 / (h + 1) as f64).sqrt();
            let w2 = (0..h).map(|_| rng.gen_range(-l2..=l2)).collect();
            params.insert(format!("{prefix}.attn_w2"), Tensor::new(vec![1, h], w2)?)?;
        }
        Ok(())
    }

    /// Effective rank weights `w` (sum `m2 - m1 + 1`) read from a parameter set.
    pub fn effective_weights(&self, map: usize, params: &ParamSet) -> Vec<f64> {
        let m = self.width();
        if self.weights_trainable {
            if let Some(u) = params.get(&format!("agg{map}.weights")) {
                let mx = u.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = u.data().iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                return e.iter().map(|v| m as f64 * v / z).collect();
            }
        }
        if self.weights.is_empty() {
            vec![1.0; m]
        } else {
            self.weights.clone()
        }
    }

    /// Effective noisy-and shift `b` read from a parameter set.
    pub fn effective_shift(&self, map: usize, params: &ParamSet) -> f64 {
        match params.get(&format!("agg{map}.shift")) {
            Some(v) if self.b_trainable => sigmoid(v.item()),
            _ => self.b_shift,
        }
    }
}

fn uses_rank_weights(kind: AggregatorKind) -> bool {
    kind == AggregatorKind::TopkWeighted
}

/// A value that is either fixed or lives on the tape.
#[derive(Clone, Copy, Debug)]
enum Coef {
    Const(f64),
    Var(Var),
}

/// Tape handles for one aggregator's parameters in a single forward pass.
#[derive(Clone, Debug)]
pub struct AggregatorVars {
    /// Rank weights already scaled to sum `m2 - m1 + 1`.
    weights: Option<Var>,
    r: Coef,
    b: Coef,
    attention: Option<(Var, Var, Var)>,
}

impl AggregatorVars {
    /// Applies the reparameterizations (`w = M softmax(u)`, `r = exp(ρ)`,
    /// `b = sigmoid(v)`) on the tape.
    pub fn resolve(spec: &AggregatorSpec, map: usize, tape: &mut Tape, pv: &ParamVars) -> Result<Self> {
        let prefix = format!("agg{map}");
        let weights = if spec.weights_trainable && uses_rank_weights(spec.kind) {
            let u = pv.get(&format!("{prefix}.weights"))?;
            let s = tape.softmax(u)?;
            Some(tape.scale_shift(s, spec.width() as f64, 0.0))
        } else if spec.weights.is_empty() {
            None
        } else {
            Some(tape.constant(Tensor::vector(spec.weights.clone())))
        };
        let r = if spec.r_trainable && matches!(spec.kind, AggregatorKind::GenMean | AggregatorKind::LogSumExp) {
            let rho = pv.get(&format!("{prefix}.log_r"))?;
            Coef::Var(tape.exp(rho)?)
        } else {
            Coef::Const(spec.r)
        };
        let b = if spec.b_trainable && spec.kind == AggregatorKind::NoisyAnd {
            let v = pv.get(&format!("{prefix}.shift"))?;
            Coef::Var(tape.sigmoid(v)?)
        } else {
            Coef::Const(spec.b_shift)
        };
        let attention = if spec.kind == AggregatorKind::Attention {
            Some((
                pv.get(&format!("{prefix}.attn_w1"))?,
                pv.get(&format!("{prefix}.attn_b"))?,
                pv.get(&format!("{prefix}.attn_w2"))?,
            ))
        } else {
            None
        };
        Ok(AggregatorVars {
            weights,
            r,
            b,
            attention,
        })
    }

    /// Handles for an aggregator without trainable parameters.
    pub fn constant(spec: &AggregatorSpec, tape: &mut Tape) -> Result<Self> {
        if spec.weights_trainable
            || spec.r_trainable
            || (spec.b_trainable && spec.kind == AggregatorKind::NoisyAnd)
            || spec.kind == AggregatorKind::Attention
        {
            return Err(contract_err!(
                "{} has trainable parameters; resolve it from a parameter set",
                spec.kind.name()
            ));
        }
        Self::resolve(spec, 0, tape, &empty_vars())
    }
}

fn empty_vars() -> ParamVars {
    ParamSet::new().register(&mut Tape::new(), false)
}

/// Aggregates local rows `[n × c]` into one row `[c]`.
///
/// `reps` are the per-crop representations in the same order as the rows;
/// only attention reads them.
pub fn aggregate(
    tape: &mut Tape,
    rows: Var,
    reps: &[Var],
    spec: &AggregatorSpec,
    vars: &AggregatorVars,
    kind: RowKind,
) -> Result<Var> {
    let shape = tape.shape(rows).to_vec();
    if shape.len() != 2 {
        return Err(contract_err!(
            "local predictions must be an n x c matrix, got {shape:?}"
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    spec.validate(c, kind)?;
    let ranks = Ranks::for_bag(spec, n)?;
    let ctx = Ctx { spec, vars, ranks };
    if spec.kind == AggregatorKind::Attention {
        return aggregate_attention(tape, rows, reps, vars);
    }
    match kind {
        RowKind::Multilabel => {
            let cols = (0..c)
                .map(|j| {
                    let (sorted, _) = tape.sort_desc_by_key(rows, j)?;
                    let col = column(tape, sorted, j)?;
                    ctx.column_statistic(tape, col)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&cols)
        }
        RowKind::Exclusive if spec.kind.is_pool() => ctx.vector_extend(tape, rows),
        RowKind::Exclusive => {
            if spec.prioritized.len() == 1 {
                ctx.single(tape, rows, spec.prioritized[0])
            } else {
                ctx.multi_prioritized(tape, rows)
            }
        }
    }
}

/// Effective 1-based rank range for a bag of `n` crops.
#[derive(Clone, Copy, Debug)]
struct Ranks {
    m1: usize,
    m2: usize,
    /// Number of leading rank weights in use.
    used: usize,
}

impl Ranks {
    fn for_bag(spec: &AggregatorSpec, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(contract_err!("cannot aggregate an empty bag"));
        }
        if spec.m2 <= n {
            return Ok(Ranks {
                m1: spec.m1,
                m2: spec.m2,
                used: spec.width(),
            });
        }
        if !spec.clamp_to_n {
            return Err(contract_err!(
                "rank m2={} exceeds the {n} crops in the bag (enable clamp_to_n to shrink it)",
                spec.m2
            ));
        }
        let m1 = spec.m1.min(n);
        Ok(Ranks {
            m1,
            m2: n,
            used: n + 1 - m1,
        })
    }

    fn width(&self) -> usize {
        self.m2 + 1 - self.m1
    }
}

struct Ctx<'a> {
    spec: &'a AggregatorSpec,
    vars: &'a AggregatorVars,
    ranks: Ranks,
}

impl Ctx<'_> {
    /// Rank weights for the effective range, rescaled to sum to its width
    /// when the range was clamped.
    fn weights(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let Some(w) = self.vars.weights else {
            return Ok(None);
        };
        if self.ranks.used == self.spec.width() {
            return Ok(Some(w));
        }
        let head = tape.slice(w, 0, 0, self.ranks.used)?;
        let total = tape.sum(head)?;
        let scaled = tape.div(head, total)?;
        Ok(Some(tape.scale_shift(scaled, self.ranks.used as f64, 0.0)))
    }

    /// `(1/M) Σ w_i x_i` over ranks `m1..=m2` of rows sorted descending;
    /// `sorted` is `[n × c]` or `[n]`.
    fn topk(&self, tape: &mut Tape, sorted: Var) -> Result<Var> {
        let m = self.ranks.width();
        let picked = tape.slice(sorted, 0, self.ranks.m1 - 1, m)?;
        let coeffs = match self.weights(tape)? {
            Some(w) => tape.scale_shift(w, 1.0 / m as f64, 0.0),
            None => tape.constant(Tensor::full(&[m], 1.0 / m as f64)),
        };
        if tape.shape(picked).len() == 1 {
            let prod = tape.mul(coeffs, picked)?;
            tape.sum(prod)
        } else {
            tape.row_combination(coeffs, picked)
        }
    }

    /// Indices whose value lies in `[p1, p2]`.
    fn adaptive_selection(&self, tape: &mut Tape, values: &[f64]) -> Vec<usize> {
        let (p1, p2) = (self.spec.p1, self.spec.p2);
        let gap = values
            .iter()
            .map(|v| (v - p1).abs().min((v - p2).abs()))
            .fold(f64::INFINITY, f64::min);
        tape.note_margin(gap);
        (0..values.len())
            .filter(|&i| p1 <= values[i] && values[i] <= p2)
            .collect()
    }

    /// Mean over the selected rows (or entries), or over everything when none is selected.
    fn mean_of(&self, tape: &mut Tape, x: Var, selected: &[usize]) -> Result<Var> {
        if selected.is_empty() || selected.len() == tape.shape(x)[0] {
            return tape.reduce(x, Reduce::Mean, 0);
        }
        let g = tape.gather(x, 0, selected)?;
        tape.reduce(g, Reduce::Mean, 0)
    }

    /// Majority partition at 0.5; returns the indices of the winning side
    /// (the `> 0.5` side on ties).
    fn majority_side(&self, tape: &mut Tape, values: &[f64]) -> Vec<usize> {
        let gap = values.iter().map(|v| (v - 0.5).abs()).fold(f64::INFINITY, f64::min);
        tape.note_margin(gap);
        let high: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.5).collect();
        if 2 * high.len() >= values.len() {
            high
        } else {
            (0..values.len()).filter(|&i| values[i] <= 0.5).collect()
        }
    }

    /// Rank-range statistic of one column for the per-class aggregators, on
    /// values already sorted descending.
    fn column_statistic(&self, tape: &mut Tape, col: Var) -> Result<Var> {
        match self.spec.kind {
            AggregatorKind::TopkWeighted => self.topk(tape, col),
            AggregatorKind::AdaptiveAvg => {
                let values = tape.value(col).data().to_vec();
                let sel = self.adaptive_selection(tape, &values);
                self.mean_of(tape, col, &sel)
            }
            AggregatorKind::MajorityVote => {
                let values = tape.value(col).data().to_vec();
                let side = self.majority_side(tape, &values);
                self.mean_of(tape, col, &side)
            }
            _ => self.pool(tape, col),
        }
    }

    /// Single prioritized class `jm` with exclusive rows.
    fn single(&self, tape: &mut Tape, rows: Var, jm: usize) -> Result<Var> {
        match self.spec.kind {
            AggregatorKind::TopkWeighted => {
                let (sorted, _) = tape.sort_desc_by_key(rows, jm)?;
                self.topk(tape, sorted)
            }
            AggregatorKind::AdaptiveAvg => {
                let values = key_values(tape, rows, jm);
                let sel = self.adaptive_selection(tape, &values);
                self.mean_of(tape, rows, &sel)
            }
            AggregatorKind::MajorityVote => {
                let values = key_values(tape, rows, jm);
                let side = self.majority_side(tape, &values);
                self.mean_of(tape, rows, &side)
            }
            k => Err(contract_err!("{} is not a rank aggregator", k.name())),
        }
    }

    /// Race between several prioritized classes: score each, keep the
    /// argmax (smallest class on ties) and aggregate by it.
    fn multi_prioritized(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let mut sorted_il = self.spec.prioritized.clone();
        sorted_il.sort_unstable();
        let il = &sorted_il;
        let n = tape.shape(rows)[0];
        match self.spec.kind {
            AggregatorKind::TopkWeighted => {
                let mut scores = Vec::with_capacity(il.len());
                let mut outs = Vec::with_capacity(il.len());
                for &j in il {
                    let (sorted, _) = tape.sort_desc_by_key(rows, j)?;
                    let row = self.topk(tape, sorted)?;
                    scores.push(tape.value(row).data()[j]);
                    outs.push(row);
                }
                let k = race(tape, &scores);
                Ok(outs[k])
            }
            AggregatorKind::AdaptiveAvg => {
                let mut scores = Vec::with_capacity(il.len());
                let mut sels = Vec::with_capacity(il.len());
                for &j in il {
                    let values = key_values(tape, rows, j);
                    let sel = self.adaptive_selection(tape, &values);
                    let pool: Vec<f64> = if sel.is_empty() {
                        values.clone()
                    } else {
                        sel.iter().map(|&i| values[i]).collect()
                    };
                    scores.push(pool.iter().sum::<f64>() / pool.len() as f64);
                    sels.push(sel);
                }
                let k = race(tape, &scores);
                self.mean_of(tape, rows, &sels[k])
            }
            AggregatorKind::MajorityVote => {
                let mut counts = Vec::with_capacity(il.len());
                let mut sets = Vec::with_capacity(il.len());
                for &j in il {
                    let values = key_values(tape, rows, j);
                    let gap = values.iter().map(|v| (v - 0.5).abs()).fold(f64::INFINITY, f64::min);
                    tape.note_margin(gap);
                    let set: Vec<usize> = (0..n).filter(|&i| values[i] > 0.5).collect();
                    counts.push(set.len() as f64);
                    sets.push(set);
                }
                // integer counts: ties resolve to the smaller class without a margin
                let (k, _) = crate::tensor::first_argmax(&counts);
                self.mean_of(tape, rows, &sets[k])
            }
            k => Err(contract_err!("{} is not a rank aggregator", k.name())),
        }
    }

    /// Scalar pool over ranks `m1..=m2` of a column sorted descending.
    fn pool(&self, tape: &mut Tape, col: Var) -> Result<Var> {
        let m = self.ranks.width();
        let y = tape.slice(col, 0, self.ranks.m1 - 1, m)?;
        match self.spec.kind {
            AggregatorKind::NoisyOr => {
                // 1 - Π(1 - y) = 1 - exp(Σ log(1 - y))
                let yc = tape.clip(y, EPS, 1.0 - EPS)?;
                let comp = tape.scale_shift(yc, -1.0, 1.0);
                let logs = tape.log(comp)?;
                let s = tape.sum(logs)?;
                let p = tape.exp(s)?;
                Ok(tape.scale_shift(p, -1.0, 1.0))
            }
            AggregatorKind::IntSegRec => {
                let yc = tape.clip(y, EPS, 1.0 - EPS)?;
                let comp = tape.scale_shift(yc, -1.0, 1.0);
                let odds = tape.div(yc, comp)?;
                let s = tape.sum(odds)?;
                let den = tape.scale_shift(s, 1.0, 1.0);
                tape.div(s, den)
            }
            AggregatorKind::GenMean => {
                if let Some(bad) = tape.value(y).data().iter().find(|v| **v < 0.0) {
                    return Err(contract_err!("generalized mean of a negative input {bad}"));
                }
                let yc = tape.clip(y, EPS, 1.0)?;
                match self.vars.r {
                    Coef::Const(r) => {
                        if !(r > 0.0) {
                            return Err(contract_err!("generalized mean needs r > 0, got {r}"));
                        }
                        let p = tape.unary(yc, crate::tensor::Unary::Powf(r))?;
                        let mean = tape.mean(p)?;
                        tape.unary(mean, crate::tensor::Unary::Powf(1.0 / r))
                    }
                    Coef::Var(r) => {
                        let logs = tape.log(yc)?;
                        let scaled = tape.mul(logs, r)?;
                        let p = tape.exp(scaled)?;
                        let mean = tape.mean(p)?;
                        let lm = tape.log(mean)?;
                        let q = tape.div(lm, r)?;
                        tape.exp(q)
                    }
                }
            }
            AggregatorKind::LogSumExp => {
                // max + (1/r) log mean exp(r (y - max))
                let top = tape.reduce(y, Reduce::Max, 0)?;
                let centered = tape.sub(y, top)?;
                let (scaled, r) = match self.vars.r {
                    Coef::Const(r) => (tape.scale_shift(centered, r, 0.0), Coef::Const(r)),
                    Coef::Var(r) => (tape.mul(centered, r)?, Coef::Var(r)),
                };
                let e = tape.exp(scaled)?;
                let mean = tape.mean(e)?;
                let lm = tape.log(mean)?;
                let tail = match r {
                    Coef::Const(r) => tape.scale_shift(lm, 1.0 / r, 0.0),
                    Coef::Var(r) => tape.div(lm, r)?,
                };
                tape.add(top, tail)
            }
            AggregatorKind::NoisyAnd => {
                let a = self.spec.a;
                let mu = tape.mean(y)?;
                match self.vars.b {
                    Coef::Const(b) => {
                        let lo = sigmoid(-a * b);
                        let hi = sigmoid(a * (1.0 - b));
                        let z = tape.scale_shift(mu, a, -a * b);
                        let s = tape.sigmoid(z)?;
                        Ok(tape.scale_shift(s, 1.0 / (hi - lo), -lo / (hi - lo)))
                    }
                    Coef::Var(b) => {
                        let diff = tape.sub(mu, b)?;
                        let z = tape.scale_shift(diff, a, 0.0);
                        let s = tape.sigmoid(z)?;
                        let nab = tape.scale_shift(b, -a, 0.0);
                        let lo = tape.sigmoid(nab)?;
                        let oab = tape.scale_shift(b, -a, a);
                        let hi = tape.sigmoid(oab)?;
                        let num = tape.sub(s, lo)?;
                        let den = tape.sub(hi, lo)?;
                        tape.div(num, den)
                    }
                }
            }
            AggregatorKind::LinearSoftmax => {
                let yc = tape.clip(y, EPS, 1.0)?;
                let sq = tape.mul(yc, yc)?;
                let num = tape.sum(sq)?;
                let den = tape.sum(yc)?;
                tape.div(num, den)
            }
            AggregatorKind::ExpSoftmax => {
                let e = tape.exp(y)?;
                let ye = tape.mul(y, e)?;
                let num = tape.sum(ye)?;
                let den = tape.sum(e)?;
                tape.div(num, den)
            }
            AggregatorKind::EvenAdd => {
                let idx: Vec<usize> = (0..m).step_by(2).collect();
                let picked = tape.gather(y, 0, &idx)?;
                tape.mean(picked)
            }
            k => Err(contract_err!("{} is not a pooling aggregator", k.name())),
        }
    }

    /// Pools each prioritized column over its own sort order, reduces the
    /// remaining columns over the order of the first prioritized class, then
    /// renormalizes.
    fn vector_extend(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let c = tape.shape(rows)[1];
        let il = &self.spec.prioritized;
        let mut entries: Vec<Option<Var>> = vec![None; c];
        for &j in il {
            let (sorted, _) = tape.sort_desc_by_key(rows, j)?;
            let col = column(tape, sorted, j)?;
            entries[j] = Some(self.pool(tape, col)?);
        }
        if il.len() < c {
            let (sorted, _) = tape.sort_desc_by_key(rows, il[0])?;
            let m = self.ranks.width();
            for (j, entry) in entries.iter_mut().enumerate() {
                if entry.is_some() {
                    continue;
                }
                let col = column(tape, sorted, j)?;
                let v = match self.spec.nil_reduction {
                    NilReduction::Mean => {
                        let picked = tape.slice(col, 0, self.ranks.m1 - 1, m)?;
                        tape.mean(picked)?
                    }
                    NilReduction::First => tape.slice(col, 0, self.ranks.m1 - 1, 1)?,
                    NilReduction::Last => tape.slice(col, 0, self.ranks.m2 - 1, 1)?,
                };
                *entry = Some(v);
            }
        }
        let parts: Vec<Var> = entries.into_iter().map(|e| e.expect("every class filled")).collect();
        let raw = tape.concat(&parts)?;
        renormalize(tape, raw)
    }
}

/// `y / Σ y`; fails on an all-zero vector.
pub fn renormalize(tape: &mut Tape, raw: Var) -> Result<Var> {
    let total: f64 = tape.value(raw).data().iter().sum();
    if !(total > 0.0) {
        return Err(contract_err!("cannot renormalize a row summing to {total}"));
    }
    let s = tape.sum(raw)?;
    tape.div(raw, s)
}

/// Column `j` of `[n × c]` as a vector `[n]`.
fn column(tape: &mut Tape, rows: Var, j: usize) -> Result<Var> {
    let g = tape.gather(rows, 1, &[j])?;
    Ok(tape.flatten(g))
}

fn key_values(tape: &Tape, rows: Var, j: usize) -> Vec<f64> {
    let r = tape.value(rows);
    (0..r.shape()[0]).map(|i| r.at2(i, j)).collect()
}

/// Position of the best score, first (smallest class) on ties; the gap to
/// the runner-up is recorded as a margin.
fn race(tape: &mut Tape, scores: &[f64]) -> usize {
    let (k, gap) = crate::tensor::first_argmax(scores);
    tape.note_margin(gap);
    k
}

fn aggregate_attention(tape: &mut Tape, rows: Var, reps: &[Var], vars: &AggregatorVars) -> Result<Var> {
    let n = tape.shape(rows)[0];
    if reps.len() != n {
        return Err(contract_err!(
            "attention got {} representations for {n} rows",
            reps.len()
        ));
    }
    let (w1, b, w2) = vars
        .attention
        .ok_or_else(|| contract_err!("attention parameters were not resolved"))?;
    let weights = attention_weights(tape, reps, w1, b, w2)?;
    tape.row_combination(weights, rows)
}

/// `softmax_i(W2 tanh(W1 rep_i + b))`.
pub fn attention_weights(tape: &mut Tape, reps: &[Var], w1: Var, b: Var, w2: Var) -> Result<Var> {
    if reps.is_empty() {
        return Err(contract_err!("attention over an empty bag"));
    }
    let scores = reps
        .iter()
        .map(|&rep| {
            let h = tape.affine(rep, w1, b)?;
            let t = tape.tanh(h)?;
            tape.matvec(w2, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let s = tape.concat(&scores)?;
    tape.softmax(s)
}

/// Elementwise mean of classifier-map outputs; renormalized for exclusive rows.
pub fn fuse_classifier_maps(tape: &mut Tape, maps: &[Var], kind: RowKind) -> Result<Var> {
    match maps {
        [] => Err(contract_err!("no classifier maps to fuse")),
        [one] => Ok(*one),
        _ => {
            let c = tape.shape(maps[0]).to_vec();
            if let Some(bad) = maps.iter().find(|m| tape.shape(**m) != c.as_slice()) {
                return Err(contract_err!(
                    "classifier maps disagree in shape: {c:?} vs {:?}",
                    tape.shape(*bad)
                ));
            }
            let stacked = tape.stack(maps)?;
            let mean = tape.reduce(stacked, Reduce::Mean, 0)?;
            match kind {
                RowKind::Exclusive => renormalize(tape, mean),
                RowKind::Multilabel => Ok(mean),
            }
        }
    }
}

/// Convenience wrapper: aggregates constant rows with a parameter-free spec
/// and returns the plain values.
pub fn aggregate_values(rows: &Tensor, spec: &AggregatorSpec, kind: RowKind) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let r = tape.constant(rows.clone());
    let vars = AggregatorVars::constant(spec, &mut tape)?;
    let out = aggregate(&mut tape, r, &[], spec, &vars, kind)?;
    let v = tape.value(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "{} produced a non-finite value",
            spec.kind.name()
        )));
    }
    Ok(v.data().to_vec())
}
