//! Central-difference verification of tape gradients.

use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamRegistry;

/// Denominator floor of the relative error, so parameters whose true
/// gradient is near zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum CheckStatus {
    Checked { max_rel_err: f64, elements: usize },
    /// Frozen parameters are not differentiated.
    Skipped,
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub status: CheckStatus,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Name and error of the worst checked parameter.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.params
            .iter()
            .filter_map(|p| match p.status {
                CheckStatus::Checked { max_rel_err, .. } => Some((p.name.as_str(), max_rel_err)),
                CheckStatus::Skipped => None,
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn passed(&self) -> bool {
        self.worst().is_none_or(|(_, e)| e <= self.tolerance)
    }

    pub fn checked_elements(&self) -> usize {
        self.params
            .iter()
            .map(|p| match p.status {
                CheckStatus::Checked { elements, .. } => elements,
                CheckStatus::Skipped => 0,
            })
            .sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares autodiff gradients of `loss` against central differences with
/// step `h = 1e-5 · max(1, |θ|)` for every element of every trainable
/// parameter. Parameter values are restored bit-exactly afterwards.
pub fn grad_check<F>(
    params: &mut ParamRegistry,
    loss: F,
    tolerance: f64,
    corrupt_backward: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamRegistry) -> Result<Var>,
{
    let analytic: HashMap<_, _> = {
        let mut tape = Tape::new();
        tape.set_corrupt_backward(corrupt_backward);
        let l = loss(&mut tape, params)?;
        tape.backward(l)?;
        tape.param_grads().collect()
    };
    let eval = |params: &ParamRegistry| -> Result<f64> {
        let mut tape = Tape::inference();
        let l = loss(&mut tape, params)?;
        Ok(tape.value(l).item())
    };

    let ids: Vec<_> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let name = params.name(id).to_string();
        if !params.is_trainable(id) {
            report.push(ParamCheck {
                name,
                status: CheckStatus::Skipped,
            });
            continue;
        }
        let n = params.value(id).len();
        let grad = analytic.get(&id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
        let mut max_rel_err: f64 = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let orig = params.value(id).data()[j];
            let h = 1e-5 * orig.abs().max(1.0);
            params.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(params);
            params.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(params);
            params.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
            max_rel_err = max_rel_err.max(relative_error(a, numeric));
        }
        report.push(ParamCheck {
            name,
            status: CheckStatus::Checked {
                max_rel_err,
                elements: n,
            },
        });
    }
    Ok(GradCheckReport {
        params: report,
        tolerance,
    })
}
