//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it checks.

use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars};
use crate::tensor::{Tape, Var};

/// Outcome of one [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `‖a - n‖₂ / max(‖a‖₂, ‖n‖₂)` over the whole gradient vector.
    pub rel_error: f64,
    /// Largest per-element relative error.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
    /// Smallest distance to a kink seen in the unperturbed forward pass.
    pub margin: f64,
    pub checked: usize,
}

/// Compares the tape gradient of `loss_fn` with central differences of
/// step `step` for every scalar in `params`.
///
/// The per-element relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamSet, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    if !base.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is non-finite ({base}) at the evaluation point"
        )));
    }
    tape.backward(loss)?;
    let analytic = vars.grads(&tape);
    let margin = tape.margin();

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let v = p.register(&mut t, false);
        let l = loss_fn(&mut t, &v)?;
        Ok(t.value(l).item())
    };

    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut worst_pair = (0.0, 0.0);
    let mut checked = 0;
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    for (pi, name) in params.names().iter().enumerate() {
        for e in 0..params.tensors()[pi].numel() {
            let orig = params.tensors()[pi].data()[e];
            probe.tensors_mut()[pi].data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe.tensors_mut()[pi].data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe.tensors_mut()[pi].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is non-finite when perturbing {name}[{e}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            checked += 1;
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((name.clone(), e));
                worst_pair = (a, numeric);
            }
        }
    }
    let scale = a2.max(n2).sqrt();
    Ok(GradCheckReport {
        rel_error: if scale > 0.0 { diff2.sqrt() / scale } else { 0.0 },
        max_rel_error: max_rel,
        worst,
        worst_pair,
        margin,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sigmoid, Tensor};

    fn params(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::vector(values.to_vec())).unwrap();
        p
    }

    #[test]
    fn linear_function_is_exact() {
        let p = params(&[0.3, -1.2, 2.0]);
        let report = finite_diff_check(
            |t, v| {
                let x = v.get("x")?;
                let y = t.scale_shift(x, 3.5, 1.0);
                t.sum(y)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-10, "{report:?}");
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn sigmoid_composition() {
        let p = params(&[0.4, -1.7, 1.1]);
        let report = finite_diff_check(
            |t, v| {
                let x = v.get("x")?;
                let s = t.sigmoid(x)?;
                let e = t.exp(s)?;
                let m = t.mul(e, x)?;
                t.sum(m)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        fn wrong(_x: f64, y: f64) -> f64 {
            // true derivative is y(1-y)
            y
        }
        let p = params(&[0.4, -1.7, 1.1]);
        let report = finite_diff_check(
            |t, v| {
                let x = v.get("x")?;
                let s = t.map(x, sigmoid, wrong);
                t.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
        assert!(report.rel_error > 1e-2, "{report:?}");
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let p = params(&[1e-6]);
        let err = finite_diff_check(
            |t, v| {
                let x = v.get("x")?;
                let y = t.map(x, |x| if x > 1e-6 { f64::NAN } else { x }, |_, _| 1.0);
                t.sum(y)
            },
            &p,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("x[0]"), "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let p = params(&[1.0]);
        assert!(finite_diff_check(|t, v| t.sum(v.get("x")?), &p, 0.0).is_err());
    }
}
