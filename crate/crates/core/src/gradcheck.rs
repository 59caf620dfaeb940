//! Central finite-difference gradient checking.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Stop at the first perturbation that changes the tape's branch
    /// signature, since central differences across a kink do not estimate
    /// the derivative.
    pub stop_at_kink: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            stop_at_kink: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry and its (analytic, numeric) pair.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Perturbations whose evaluation took a different branch than the
    /// base point.
    pub kink_crossings: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a - n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of the parameters in `ids`.
///
/// `f` must build a fresh tape from the store and return the scalar output.
/// It is evaluated twice up front; differing results are reported as a
/// precondition failure.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], config: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Tape, Var)>,
{
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let (tape, out) = f(s)?;
        Ok((tape.value(out).item()?, tape.branch_signature()))
    };
    let (first, base_signature) = eval(store)?;
    let (second, _) = eval(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    store.zero_grad();
    let (mut tape, out) = f(store)?;
    tape.backward(out, store)?;

    let mut params = Vec::with_capacity(ids.len());
    let mut kink_crossings = 0;
    for &id in ids {
        let analytic = store.grad(id).clone();
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel = 0.0;
        for i in 0..analytic.len() {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + config.step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - config.step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let ((plus, sig_plus), (minus, sig_minus)) = (plus?, minus?);
            if sig_plus != base_signature || sig_minus != base_signature {
                kink_crossings += 1;
                if config.stop_at_kink {
                    break;
                }
            }
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            if i == 0 || rel > max_rel {
                max_rel = rel;
                worst = (i, a, numeric);
            }
        }
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: max_rel,
            worst,
        });
        if config.stop_at_kink && kink_crossings > 0 {
            break;
        }
    }
    Ok(GradCheckReport {
        params,
        tolerance: config.tolerance,
        kink_crossings,
    })
}
