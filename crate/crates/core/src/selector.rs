//! Adaptive selection network and candidate selection.
//!
//! For every position of a text, the M source distribution rows are
//! concatenated into one vector of length `F = M·V`, layer-normalized, and
//! scored by a GELU MLP (`F → 2F → F → M` by default). Per-position scores
//! are averaged into one logit per source for the sample, turned into
//! selection probabilities, thresholded, and renormalized over the survivors:
//!
//! ```text
//! p      = softmax(mean_n s_n)
//! X_sel  = { j : p_j > τ }            (or {argmax p} if empty)
//! p̂     = compact( p ⊙ m / (Σ p_i m_i + ε) )
//! ```
//!
//! The selection mask is treated as a constant in the backward pass.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::numcore::{
    gelu_grad, gelu_scalar, layer_norm_vec, softmax_row, GradStore, ParamSet, ParamTensor,
    ProbMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Softmax,
    Gumbel,
    Noisy,
}

/// How many candidates survive selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCount {
    /// Threshold on `τ` with argmax fallback.
    Adaptive,
    /// The `top_k` most probable sources.
    TopK,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsnLayers {
    /// `F → 2F → F → M` with GELU between layers.
    ThreeLinear,
    /// A single `F → M` projection.
    OneLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average per-position logits, then apply the metric once.
    Logits,
    /// Apply the metric per position, then average the probabilities.
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub threshold: f64,
    pub metric: SelectionMetric,
    pub temperature: f64,
    pub noise_scale: f64,
    pub pooling: Pooling,
    pub count: SelectionCount,
    pub top_k: usize,
    pub layers: AsnLayers,
    pub renorm_eps: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.15,
            metric: SelectionMetric::Softmax,
            temperature: 1.0,
            noise_scale: 1.0,
            pooling: Pooling::Logits,
            count: SelectionCount::Adaptive,
            top_k: 2,
            layers: AsnLayers::ThreeLinear,
            renorm_eps: 1e-8,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(FuseError::Config(format!(
                "selection threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(FuseError::Config("gumbel temperature must be > 0".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(FuseError::Config("noise scale must be >= 0".into()));
        }
        if !(self.renorm_eps > 0.0) {
            return Err(FuseError::Config("renormalization epsilon must be > 0".into()));
        }
        if self.count == SelectionCount::TopK && self.top_k == 0 {
            return Err(FuseError::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of one sample's selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Pooled logits `z`, length M.
    pub logits: Vec<f64>,
    /// Selection probabilities `p`, length M.
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
    /// Selected source indices in ascending order.
    pub selected: Vec<usize>,
    /// Compact renormalized weights `p̂`, aligned with `selected`.
    pub weights: Vec<f64>,
}

impl SelectionResult {
    pub fn num_sources(&self) -> usize {
        self.probs.len()
    }

    /// `p̂` scattered back to length M, zeros for unselected sources.
    pub fn scattered_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.probs.len()];
        for (&j, &w) in self.selected.iter().zip(&self.weights) {
            out[j] = w;
        }
        out
    }
}

/// Parameters of the selection network.
#[derive(Debug, Clone, PartialEq)]
pub struct AsnParams {
    sources: usize,
    vocab: usize,
    layers: AsnLayers,
    params: ParamSet,
}

pub fn layer_weight_name(layer: usize) -> String {
    format!("asn.l{}.weight", layer + 1)
}

pub fn layer_bias_name(layer: usize) -> String {
    format!("asn.l{}.bias", layer + 1)
}

fn layer_dims(layers: AsnLayers, features: usize, sources: usize) -> Vec<(usize, usize)> {
    match layers {
        AsnLayers::ThreeLinear => vec![
            (features, 2 * features),
            (2 * features, features),
            (features, sources),
        ],
        AsnLayers::OneLinear => vec![(features, sources)],
    }
}

/// Xavier-uniform weights and zero biases for every layer.
pub fn asn_init_xavier<R: Rng + ?Sized>(
    sources: usize,
    vocab: usize,
    layers: AsnLayers,
    rng: &mut R,
) -> Result<AsnParams> {
    if sources < 2 || vocab < 2 {
        return Err(FuseError::Config(format!(
            "selection network needs M >= 2 and V >= 2, got M={sources}, V={vocab}"
        )));
    }
    let mut params = ParamSet::new();
    for (l, (fan_in, fan_out)) in layer_dims(layers, sources * vocab, sources)
        .into_iter()
        .enumerate()
    {
        params.push(ParamTensor::xavier_uniform(layer_weight_name(l), fan_in, fan_out, rng))?;
        params.push(ParamTensor::zeros(layer_bias_name(l), &[fan_out]))?;
    }
    Ok(AsnParams {
        sources,
        vocab,
        layers,
        params,
    })
}

impl AsnParams {
    /// Rebuilds from stored `asn.*` tensors.
    pub fn from_params(params: ParamSet, sources: usize, vocab: usize) -> Result<Self> {
        let params = params.subset("asn.");
        let layers = if params.get(&layer_weight_name(2)).is_some() {
            AsnLayers::ThreeLinear
        } else {
            AsnLayers::OneLinear
        };
        let dims = layer_dims(layers, sources * vocab, sources);
        if params.len() != 2 * dims.len() {
            return Err(FuseError::Dimension("unexpected selection network tensors".into()));
        }
        for (l, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            if params.tensor(&layer_weight_name(l))?.shape() != [fan_in, fan_out]
                || params.tensor(&layer_bias_name(l))?.shape() != [fan_out]
            {
                return Err(FuseError::Dimension(format!("layer {} has wrong shape", l + 1)));
            }
        }
        Ok(Self {
            sources,
            vocab,
            layers,
            params,
        })
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn features(&self) -> usize {
        self.sources * self.vocab
    }

    pub fn layers(&self) -> AsnLayers {
        self.layers
    }

    pub fn num_layers(&self) -> usize {
        match self.layers {
            AsnLayers::ThreeLinear => 3,
            AsnLayers::OneLinear => 1,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Activations of one forward pass over a sample.
#[derive(Debug, Clone)]
pub struct AsnForward {
    /// Per-position scores, N×M.
    pub position_logits: Array2<f64>,
    /// `inputs[0]` is the normalized input; `inputs[l]` feeds layer `l`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

impl AsnForward {
    pub fn pooled_logits(&self) -> Vec<f64> {
        self.position_logits
            .mean_axis(Axis(0))
            .expect("at least one position")
            .to_vec()
    }

    pub fn positions(&self) -> usize {
        self.position_logits.nrows()
    }
}

fn check_sources(params: &AsnParams, sources: &[&ProbMatrix]) -> Result<usize> {
    if sources.len() != params.sources {
        return Err(FuseError::Dimension(format!(
            "expected {} source matrices, got {}",
            params.sources,
            sources.len()
        )));
    }
    let n = sources[0].rows();
    for (i, s) in sources.iter().enumerate() {
        if s.dim() != (n, params.vocab) {
            return Err(FuseError::Dimension(format!(
                "source {i} is {:?}, expected ({n}, {})",
                s.dim(),
                params.vocab
            )));
        }
    }
    Ok(n)
}

/// Scores every position of a sample. The per-position input is the
/// concatenation of the M source rows, layer-normalized.
pub fn asn_forward(params: &AsnParams, sources: &[&ProbMatrix]) -> Result<AsnForward> {
    let n = check_sources(params, sources)?;
    let (v, f) = (params.vocab, params.features());
    let mut x = Array2::zeros((n, f));
    let mut concat = vec![0.0; f];
    for pos in 0..n {
        for (i, s) in sources.iter().enumerate() {
            for (k, &val) in s.row(pos).iter().enumerate() {
                concat[i * v + k] = val;
            }
        }
        x.row_mut(pos).assign(&Array1::from(layer_norm_vec(&concat)?));
    }

    let layers = params.num_layers();
    let mut inputs = vec![x];
    let mut pre = Vec::with_capacity(layers - 1);
    let mut out = Array2::zeros((0, 0));
    for l in 0..layers {
        let w = params.params.tensor(&layer_weight_name(l))?.view2();
        let b = params.params.tensor(&layer_bias_name(l))?.view1();
        let a = inputs[l].dot(&w) + &b;
        if l + 1 < layers {
            inputs.push(a.mapv(gelu_scalar));
            pre.push(a);
        } else {
            out = a;
        }
    }
    Ok(AsnForward {
        position_logits: out,
        inputs,
        pre,
    })
}

/// Noise drawn for one sample's metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricNoise(Vec<f64>);

impl MetricNoise {
    pub fn none(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    /// Draws what `config.metric` needs from `rng` (nothing for softmax).
    pub fn draw<R: Rng + ?Sized>(config: &SelectionConfig, m: usize, rng: &mut R) -> Self {
        match config.metric {
            SelectionMetric::Softmax => Self::none(m),
            SelectionMetric::Gumbel => {
                let g = Gumbel::new(0.0, 1.0).expect("valid gumbel");
                Self((0..m).map(|_| g.sample(rng)).collect())
            }
            SelectionMetric::Noisy => {
                Self((0..m).map(|_| StandardNormal.sample(rng)).collect())
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Pre-softmax transform `y(z)` of the configured metric, and its slope.
fn metric_input(z: &[f64], config: &SelectionConfig, noise: &MetricNoise) -> (Vec<f64>, f64) {
    match config.metric {
        SelectionMetric::Softmax => (z.to_vec(), 1.0),
        SelectionMetric::Gumbel => (
            z.iter()
                .zip(&noise.0)
                .map(|(zi, g)| (zi + g) / config.temperature)
                .collect(),
            1.0 / config.temperature,
        ),
        SelectionMetric::Noisy => (
            z.iter()
                .zip(&noise.0)
                .map(|(zi, e)| zi + config.noise_scale * e)
                .collect(),
            1.0,
        ),
    }
}

/// Selection probabilities from pooled logits under the configured metric.
pub fn probs_from_logits(z: &[f64], config: &SelectionConfig, noise: &MetricNoise) -> Result<Vec<f64>> {
    if noise.0.len() != z.len() {
        return Err(FuseError::Dimension("noise length differs from logits".into()));
    }
    softmax_row(&metric_input(z, config, noise).0)
}

/// Threshold selection with argmax fallback (lowest index on ties).
pub fn select_candidates(p: &[f64], threshold: f64) -> (Vec<usize>, Vec<bool>) {
    let mut selected: Vec<usize> = (0..p.len()).filter(|&j| p[j] > threshold).collect();
    if selected.is_empty() {
        selected.push(argmax(p));
    }
    (selected.clone(), mask_from(&selected, p.len()))
}

/// The `k` most probable indices (lowest index on ties), ascending.
pub fn select_top_k(p: &[f64], k: usize) -> (Vec<usize>, Vec<bool>) {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut selected: Vec<usize> = order.into_iter().take(k.clamp(1, p.len())).collect();
    selected.sort_unstable();
    (selected.clone(), mask_from(&selected, p.len()))
}

fn mask_from(selected: &[usize], m: usize) -> Vec<bool> {
    let mut mask = vec![false; m];
    for &j in selected {
        mask[j] = true;
    }
    mask
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

/// `compact(p ⊙ m / (Σ p_i m_i + ε))`, survivors in source order.
pub fn renorm_weights(p: &[f64], mask: &[bool], eps: f64) -> Result<Vec<f64>> {
    if p.len() != mask.len() {
        return Err(FuseError::Dimension("mask length differs from probabilities".into()));
    }
    if !mask.iter().any(|&b| b) {
        return Err(FuseError::Usage("renormalization needs at least one selected source".into()));
    }
    let denom: f64 = p.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() + eps;
    Ok(p.iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v / denom)
        .collect())
}

/// Everything the backward pass needs from one sample's selection.
#[derive(Debug, Clone)]
pub struct SelectionCache {
    forward: AsnForward,
    noise: MetricNoise,
    config: SelectionConfig,
    result: SelectionResult,
}

impl SelectionCache {
    pub fn result(&self) -> &SelectionResult {
        &self.result
    }

    pub fn forward(&self) -> &AsnForward {
        &self.forward
    }
}

/// Full per-sample selection: network forward, metric, candidate choice,
/// renormalization. `forced` overrides the candidate choice (the backward
/// treats the mask as a constant; gradient checks pin it this way).
pub fn select(
    params: &AsnParams,
    sources: &[&ProbMatrix],
    config: &SelectionConfig,
    noise: MetricNoise,
    forced: Option<&[usize]>,
) -> Result<SelectionCache> {
    let forward = asn_forward(params, sources)?;
    let m = params.sources;
    if noise.0.len() != m {
        return Err(FuseError::Dimension("noise length differs from source count".into()));
    }
    let logits = forward.pooled_logits();
    let probs = match config.pooling {
        Pooling::Logits => probs_from_logits(&logits, config, &noise)?,
        Pooling::Probabilities => {
            let mut acc = vec![0.0; m];
            for row in forward.position_logits.rows() {
                let p = probs_from_logits(row.as_slice().expect("contiguous"), config, &noise)?;
                acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
            }
            let n = forward.positions() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
    };
    let (selected, mask) = match forced {
        Some(sel) => {
            let mut sel = sel.to_vec();
            sel.sort_unstable();
            sel.dedup();
            if sel.is_empty() || sel.iter().any(|&j| j >= m) {
                return Err(FuseError::Usage(format!("invalid forced selection {sel:?}")));
            }
            let mask = mask_from(&sel, m);
            (sel, mask)
        }
        None => match config.count {
            SelectionCount::Adaptive => select_candidates(&probs, config.threshold),
            SelectionCount::TopK => select_top_k(&probs, config.top_k),
            SelectionCount::All => ((0..m).collect(), vec![true; m]),
        },
    };
    let weights = renorm_weights(&probs, &mask, config.renorm_eps)?;
    Ok(SelectionCache {
        forward,
        noise,
        config: config.clone(),
        result: SelectionResult {
            logits,
            probs,
            mask,
            selected,
            weights,
        },
    })
}

/// Gradient of the loss with respect to `p` given its gradient with respect
/// to the compact weights `p̂` (mask held constant).
pub fn renorm_backward(result: &SelectionResult, grad_weights: &[f64], eps: f64) -> Result<Vec<f64>> {
    if grad_weights.len() != result.selected.len() {
        return Err(FuseError::Dimension(format!(
            "weight gradient has {} entries for {} selected sources",
            grad_weights.len(),
            result.selected.len()
        )));
    }
    let denom: f64 = result.selected.iter().map(|&j| result.probs[j]).sum::<f64>() + eps;
    let weighted: f64 = grad_weights
        .iter()
        .zip(&result.weights)
        .map(|(g, w)| g * w)
        .sum();
    let mut grad_p = vec![0.0; result.probs.len()];
    for (&j, &g) in result.selected.iter().zip(grad_weights) {
        grad_p[j] = (g - weighted) / denom;
    }
    Ok(grad_p)
}

fn softmax_backward(p: ArrayView1<'_, f64>, grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Gradients of the selection network parameters. `grad_weights` is the
/// gradient on the compact weights `p̂`; `grad_logits` an optional direct
/// gradient on the pooled logits `z`. Source matrices are frozen.
pub fn asn_backward(
    params: &AsnParams,
    cache: &SelectionCache,
    grad_weights: &[f64],
    grad_logits: Option<&[f64]>,
) -> Result<GradStore> {
    let m = params.sources;
    let fwd = &cache.forward;
    if fwd.position_logits.ncols() != m || fwd.inputs.len() != params.num_layers() {
        return Err(FuseError::Usage("selection cache does not match these parameters".into()));
    }
    if grad_logits.is_some_and(|g| g.len() != m) {
        return Err(FuseError::Dimension("logit gradient length differs from source count".into()));
    }
    let config = &cache.config;
    let grad_p = renorm_backward(&cache.result, grad_weights, config.renorm_eps)?;
    let n = fwd.positions();
    let inv_n = 1.0 / n as f64;

    let mut grad_scores = Array2::<f64>::zeros((n, m));
    match config.pooling {
        Pooling::Logits => {
            let (_, slope) = metric_input(&cache.result.logits, config, &cache.noise);
            let p = Array1::from(cache.result.probs.clone());
            let mut gz: Vec<f64> = softmax_backward(p.view(), &grad_p)
                .into_iter()
                .map(|g| g * slope)
                .collect();
            if let Some(direct) = grad_logits {
                gz.iter_mut().zip(direct).for_each(|(a, b)| *a += b);
            }
            for mut row in grad_scores.rows_mut() {
                row.iter_mut().zip(&gz).for_each(|(r, g)| *r = g * inv_n);
            }
        }
        Pooling::Probabilities => {
            for (pos, mut row) in grad_scores.rows_mut().into_iter().enumerate() {
                let s = fwd.position_logits.row(pos);
                let (y, slope) = metric_input(s.as_slice().expect("contiguous"), config, &cache.noise);
                let p = Array1::from(softmax_row(&y)?);
                let gy = softmax_backward(p.view(), &grad_p);
                for (j, r) in row.iter_mut().enumerate() {
                    *r = gy[j] * slope * inv_n + grad_logits.map_or(0.0, |g| g[j] * inv_n);
                }
            }
        }
    }

    let mut grads = params.params.zeros_like();
    let mut upstream = grad_scores;
    for l in (0..params.num_layers()).rev() {
        let input = &fwd.inputs[l];
        grads
            .tensor_mut(&layer_weight_name(l))?
            .view2_mut()
            .assign(&input.t().dot(&upstream));
        grads
            .tensor_mut(&layer_bias_name(l))?
            .view1_mut()
            .assign(&upstream.sum_axis(Axis(0)));
        if l > 0 {
            let w = params.params.tensor(&layer_weight_name(l))?.view2();
            let mut next = upstream.dot(&w.t());
            next.zip_mut_with(&fwd.pre[l - 1], |g, &a| *g *= gelu_grad(a));
            upstream = next;
        }
    }
    Ok(grads)
}
