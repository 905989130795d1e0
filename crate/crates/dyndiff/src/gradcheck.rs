//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::Real;

/// Default perturbation for 64-bit checks.
pub const DEFAULT_FD_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "grad check: {} entries, max rel error {:.3e} (worst {}[{}]), tol {:.1e} -> {}",
            self.entries_checked,
            self.max_rel_error,
            self.worst_param,
            self.worst_index,
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Compares the tape gradient of a scalar-valued graph against central finite
/// differences `(f(p+eps) - f(p-eps)) / (2 eps)` for every entry of every
/// parameter in `params`.
///
/// `build` must be deterministic; the loss is evaluated twice up front and an
/// error is returned if the two values differ. Relative error uses
/// `|fd - grad| / max(|fd|, |grad|, 1)`, i.e. it is floored at unit scale so
/// vanishing gradients do not amplify finite-difference noise.
pub fn grad_check<T, F>(
    build: F,
    params: &mut ParamStore<T>,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<NodeId>,
{
    let eval = |params: &ParamStore<T>| -> Result<T> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        if !tape.value(loss).is_scalar() {
            return Err(Error::Autodiff(
                "grad_check requires a scalar-valued graph".into(),
            ));
        }
        Ok(tape.value(loss).data()[0])
    };

    let l0 = eval(params)?;
    let l1 = eval(params)?;
    if l0 != l1 {
        return Err(Error::Autodiff(format!(
            "non-determinism detected: two forward passes gave {l0} and {l1}"
        )));
    }

    params.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.backward(loss, params)?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|n| {
            params
                .get(n)
                .and_then(|t| t.grad.as_ref())
                .map(|g| g.iter().map(|v| v.to_f64()).collect())
                .unwrap_or_default()
        })
        .collect();

    let step = T::from_f64(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
        tol,
    };

    for (name, an) in names.iter().zip(&analytic) {
        for idx in 0..an.len() {
            let original = params.get(name).unwrap().data()[idx];
            params.get_mut(name).unwrap().data_mut()[idx] = original + step;
            let f_plus = eval(params)?.to_f64();
            params.get_mut(name).unwrap().data_mut()[idx] = original - step;
            let f_minus = eval(params)?.to_f64();
            params.get_mut(name).unwrap().data_mut()[idx] = original;

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let denom = fd.abs().max(an[idx].abs()).max(1.0);
            let rel = (fd - an[idx]).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    params.zero_grads();
    Ok(report)
}
