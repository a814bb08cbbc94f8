//! Binary detection metrics in percent.

use crate::error::{contract_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub f_pos: f64,
    pub f_neg: f64,
    pub f_avg: f64,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Metrics from confusion counts; undefined ratios are reported as 0.
    pub fn from_counts(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        let f_pos = pct(2 * tp, 2 * tp + fp + fn_);
        let f_neg = pct(2 * tn, 2 * tn + fn_ + fp);
        MetricsReport {
            tp,
            fp,
            tn,
            fn_,
            se: pct(tp, tp + fn_),
            sp: pct(tn, tn + fp),
            acc: pct(tp + tn, tp + tn + fp + fn_),
            f_pos,
            f_neg,
            f_avg: (f_pos + f_neg) / 2.0,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Index of the largest entry, first on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Thresholds each row at its argmax and scores `positive` against the rest.
pub fn evaluate_metrics(predictions: &[Vec<f64>], labels: &[usize], positive: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(contract_err!("no predictions to evaluate"));
    }
    if predictions.len() != labels.len() {
        return Err(contract_err!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for (row, &label) in predictions.iter().zip(labels) {
        let said = argmax(row) == positive;
        match (label == positive, said) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fn_, tn, fp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_predictions() {
        let preds = vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.3, 0.7]];
        let m = evaluate_metrics(&preds, &[1, 0, 1], 1).unwrap();
        for v in [m.se, m.sp, m.acc, m.f_avg] {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn direct_formulas() {
        let m = MetricsReport::from_counts(1, 1, 2, 0);
        assert_eq!(m.se, 50.0);
        assert_eq!(m.sp, 100.0);
        assert_eq!(m.acc, 75.0);
    }

    #[test]
    fn ties_resolve_to_first_class() {
        let m = evaluate_metrics(&[vec![0.5, 0.5]], &[1], 1).unwrap();
        assert_eq!(m.fn_, 1);
    }

    #[test]
    fn undefined_ratios_are_zero() {
        let m = evaluate_metrics(&[vec![0.9, 0.1]], &[0], 1).unwrap();
        assert_eq!(m.se, 0.0);
        assert_eq!(m.f_pos, 0.0);
        assert_eq!(m.sp, 100.0);
        assert!(evaluate_metrics(&[], &[], 1).is_err());
    }

    #[test]
    fn lpanet_table_row() {
        // 485 positive and 11562 negative test records
        let m = MetricsReport::from_counts(316, 169, 11361, 201);
        assert_abs_diff_eq!(m.f_pos, 63.07, epsilon = 0.005);
        assert_abs_diff_eq!(m.f_neg, 98.40, epsilon = 0.005);
        assert_abs_diff_eq!(m.f_avg, 80.74, epsilon = 0.01);
        assert_abs_diff_eq!(m.acc, 96.93, epsilon = 0.005);
    }
}
