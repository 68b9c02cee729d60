//! Central finite-difference verification of tape gradients.

use super::{Parameterized, Tape, Var};
use crate::error::{Error, Result};

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    /// Largest relative error over components that fail the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub entries: Vec<ParamGradError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_rel_err))
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err() < rel_tol
    }
}

/// Differences below this are accepted regardless of relative size.
pub const ABS_FLOOR: f64 = 1e-8;

/// Compares backward gradients of the scalar `f` with central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every parameter component.
///
/// `f` must be deterministic: stochastic models should replay a recorded
/// noise bundle on every call.
pub fn finite_diff_check<M, F>(model: &mut M, f: F, eps: f64) -> Result<GradReport>
where
    M: Parameterized + ?Sized,
    F: for<'t> Fn(&M, &'t Tape) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::config("finite difference step must be positive"));
    }
    let analytic = {
        let tape = Tape::new();
        let root = f(model, &tape)?;
        tape.backward(root)?;
        tape.param_grads()
    };
    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(m, &tape)?.item())
    };

    let names: Vec<(String, usize)> = model
        .parameters()
        .iter()
        .map(|p| (p.name.clone(), p.numel()))
        .collect();
    let mut report = GradReport::default();
    for (pi, (name, numel)) in names.iter().enumerate() {
        let mut entry = ParamGradError {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..*numel {
            let orig = model.parameters()[pi].value.data()[k];
            model.parameters_mut()[pi].value.data_mut()[k] = orig + eps;
            let up = eval(model);
            model.parameters_mut()[pi].value.data_mut()[k] = orig - eps;
            let down = eval(model);
            model.parameters_mut()[pi].value.data_mut()[k] = orig;
            let (up, down) = (up?, down?);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteObjective {
                    name: name.clone(),
                    index: k,
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(name).map(|g| g.data()[k]).unwrap_or(0.0);
            let abs = (a - numeric).abs();
            let rel = if abs <= ABS_FLOOR {
                0.0
            } else {
                abs / a.abs().max(numeric.abs())
            };
            if abs > entry.max_abs_err {
                entry.max_abs_err = abs;
            }
            if rel > entry.max_rel_err || (k == 0 && rel == 0.0) {
                entry.max_rel_err = rel;
                entry.worst_index = k;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.entries.push(entry);
    }
    Ok(report)
}
