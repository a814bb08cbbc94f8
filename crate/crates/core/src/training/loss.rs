//! Bag-level losses on final probability rows.

use crate::aggregation::EPS;
use crate::error::{contract_err, Result};
use crate::tensor::{Tape, Var};

/// `-Σ log clip(y[true])` over the batch.
pub fn nll_loss(tape: &mut Tape, finals: &[Var], labels: &[usize]) -> Result<Var> {
    if finals.len() != labels.len() || finals.is_empty() {
        return Err(contract_err!(
            "{} predictions for {} labels",
            finals.len(),
            labels.len()
        ));
    }
    let mut terms = Vec::with_capacity(finals.len());
    for (&y, &label) in finals.iter().zip(labels) {
        let c = tape.value(y).numel();
        if label >= c {
            return Err(contract_err!("label {label} out of range for {c} classes"));
        }
        let flat = tape.flatten(y);
        let p = tape.gather(flat, 0, &[label])?;
        let p = tape.clip(p, EPS, 1.0 - EPS)?;
        terms.push(tape.log(p)?);
    }
    let all = tape.concat(&terms)?;
    let s = tape.sum(all)?;
    Ok(tape.scale_shift(s, -1.0, 0.0))
}

/// `-Σ [t log y + (1 - t) log(1 - y)]` over classes and samples.
pub fn bce_multilabel_loss(tape: &mut Tape, finals: &[Var], targets: &[Vec<f64>]) -> Result<Var> {
    if finals.len() != targets.len() || finals.is_empty() {
        return Err(contract_err!(
            "{} predictions for {} label vectors",
            finals.len(),
            targets.len()
        ));
    }
    let mut terms = Vec::with_capacity(finals.len());
    for (&y, t) in finals.iter().zip(targets) {
        let c = tape.value(y).numel();
        if t.len() != c {
            return Err(contract_err!("label vector of length {} for {c} classes", t.len()));
        }
        if let Some(bad) = t.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(contract_err!("multi-label target entry {bad} is not 0 or 1"));
        }
        let flat = tape.flatten(y);
        let yc = tape.clip(flat, EPS, 1.0 - EPS)?;
        // pick y where t = 1 and 1 - y where t = 0
        let chosen: Vec<Var> = t
            .iter()
            .enumerate()
            .map(|(j, &tj)| {
                let e = tape.gather(yc, 0, &[j])?;
                Ok(if tj == 1.0 { e } else { tape.scale_shift(e, -1.0, 1.0) })
            })
            .collect::<Result<_>>()?;
        let v = tape.concat(&chosen)?;
        terms.push(tape.log(v)?);
    }
    let all = tape.concat(&terms)?;
    let s = tape.sum(all)?;
    Ok(tape.scale_shift(s, -1.0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn rows(tape: &mut Tape, rows: &[&[f64]]) -> Vec<Var> {
        rows.iter().map(|r| tape.constant(Tensor::vector(r.to_vec()))).collect()
    }

    #[test]
    fn nll_examples() {
        let mut t = Tape::new();
        let y = rows(&mut t, &[&[0.0, 1.0]]);
        let l = nll_loss(&mut t, &y, &[1]).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), EPS, epsilon = 1e-12);

        let y = rows(&mut t, &[&[0.5, 0.5]]);
        let l = nll_loss(&mut t, &y, &[0]).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), std::f64::consts::LN_2, epsilon = 1e-15);

        let y = rows(&mut t, &[&[0.5, 0.5], &[0.75, 0.25]]);
        let l = nll_loss(&mut t, &y, &[1, 1]).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), 2f64.ln() + 4f64.ln(), epsilon = 1e-12);

        assert!(nll_loss(&mut t, &y, &[1, 2]).is_err());
    }

    #[test]
    fn bce_examples() {
        let mut t = Tape::new();
        let y = rows(&mut t, &[&[1.0, 0.0, 1.0]]);
        let l = bce_multilabel_loss(&mut t, &y, &[vec![1.0, 0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), 3.0 * EPS, epsilon = 1e-12);

        let y = rows(&mut t, &[&[0.5, 0.5]]);
        let l = bce_multilabel_loss(&mut t, &y, &[vec![0.0, 1.0]]).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);

        let y = rows(&mut t, &[&[0.8, 0.4]]);
        let l = bce_multilabel_loss(&mut t, &y, &[vec![1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), -(0.8f64.ln() + 0.6f64.ln()), epsilon = 1e-12);

        assert!(bce_multilabel_loss(&mut t, &y, &[vec![1.0, 0.5]]).is_err());
    }
}
