//! Central finite-difference gradient checking.
//!
//! Run the model in `f64` when using these helpers; `f32` does not leave
//! enough headroom between truncation and roundoff error at `h = 1e-4`.

use crate::tape::Gradients;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Default acceptance threshold on [`rel_err`].
pub const DEFAULT_TOL: f64 = 1e-3;

/// Relative error with an absolute floor, so near-zero gradients compare on
/// an absolute scale (rtol 1e-3 with atol 1e-7).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst element found by a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

impl GradCheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Sweep every element of every named parameter with central differences.
///
/// `eval_shifted(name, index, delta)` must evaluate the loss with that one
/// element shifted by `delta` and then restore it. `sizes` lists each
/// parameter name with its element count; `grads` holds the analytic values
/// being verified.
pub fn sweep(
    grads: &Gradients<f64>,
    sizes: &[(String, usize)],
    h: f64,
    mut eval_shifted: impl FnMut(&str, usize, f64) -> f64,
) -> GradCheckOutcome {
    let mut outcome = GradCheckOutcome {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for (name, numel) in sizes {
        let analytic = grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        for idx in 0..*numel {
            let plus = eval_shifted(name, idx, h);
            let minus = eval_shifted(name, idx, -h);
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic.data()[idx], numeric);
            outcome.checked += 1;
            if err > outcome.max_rel_err {
                outcome.max_rel_err = err;
                outcome.worst_param = name.clone();
                outcome.worst_index = idx;
            }
        }
    }
    outcome
}
