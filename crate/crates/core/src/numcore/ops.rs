use statrs::function::erf::erf;

use super::tensor::{ProbMatrix, Target};
use crate::error::{FuseError, Result};

/// Probabilities are clamped to this floor before taking a log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Variance stabilizer for [`layer_norm_vec`].
pub const LN_EPS: f64 = 1e-5;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(FuseError::Dimension("softmax of empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(FuseError::Numeric("softmax input".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// d/dx of [`gelu_scalar`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FuseError::Numeric("gelu input".into()));
    }
    Ok(x.iter().map(|&v| gelu_scalar(v)).collect())
}

/// Layer normalization without affine parameters, using population variance.
/// A constant vector maps to zeros.
pub fn layer_norm_vec(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(FuseError::Dimension(format!(
            "layer norm needs at least 2 entries, got {}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FuseError::Numeric("layer norm input".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + LN_EPS).sqrt();
    Ok(x.iter().map(|v| (v - mean) / denom).collect())
}

/// Mean over rows of `-Σ_v target[n,v] · ln(max(pred[n,v], 1e-12))`.
pub fn cross_entropy_rows<'a>(pred: &ProbMatrix, target: impl Into<Target<'a>>) -> Result<f64> {
    let target = target.into();
    if pred.dim() != target.dim() {
        return Err(FuseError::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let rows = pred.rows();
    let total: f64 = match target {
        Target::OneHot(labels) => (0..rows)
            .map(|n| -pred.row(n)[labels.hot(n)].max(LOG_CLAMP).ln())
            .sum(),
        Target::Dist(dist) => (0..rows)
            .map(|n| {
                pred.row(n)
                    .iter()
                    .zip(dist.row(n).iter())
                    .filter(|(_, &t)| t != 0.0)
                    .map(|(&p, &t)| -t * p.max(LOG_CLAMP).ln())
                    .sum::<f64>()
            })
            .sum(),
    };
    Ok(total / rows as f64)
}

pub fn perplexity<'a>(pred: &ProbMatrix, labels: impl Into<Target<'a>>) -> Result<f64> {
    Ok(cross_entropy_rows(pred, labels)?.exp())
}
