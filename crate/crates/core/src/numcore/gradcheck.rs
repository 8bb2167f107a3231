use super::params::{GradStore, ParamSet};
use crate::error::{FuseError, Result};

/// Central-difference gradient of `loss_fn` at `params`, one scalar at a time.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ParamSet, step: f64) -> Result<GradStore>
where
    F: FnMut(&ParamSet) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(FuseError::Usage(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.iter().map(|t| t.name().to_string()).collect();
    for name in &names {
        let len = params.tensor(name)?.len();
        for i in 0..len {
            let original = probe.tensor(name)?.data()[i];
            probe.tensor_mut(name)?.data_mut()[i] = original + step;
            let up = loss_fn(&probe);
            probe.tensor_mut(name)?.data_mut()[i] = original - step;
            let down = loss_fn(&probe);
            probe.tensor_mut(name)?.data_mut()[i] = original;
            if !(up.is_finite() && down.is_finite()) {
                return Err(FuseError::Numeric(format!("loss not finite perturbing {name}[{i}]")));
            }
            grads.tensor_mut(name)?.data_mut()[i] = (up - down) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Floor for the relative-error denominator; below it the comparison is
/// effectively absolute.
const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest [`rel_error`] over every scalar of two same-layout stores.
pub fn max_rel_error(analytic: &GradStore, numeric: &GradStore) -> Result<f64> {
    let mut worst = 0.0f64;
    for a in analytic.iter() {
        let n = numeric.tensor(a.name())?;
        if n.shape() != a.shape() {
            return Err(FuseError::Dimension(format!("shape mismatch for {}", a.name())));
        }
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_error(x, y));
        }
    }
    if analytic.len() != numeric.len() {
        return Err(FuseError::Dimension("gradient stores hold different tensors".into()));
    }
    Ok(worst)
}
