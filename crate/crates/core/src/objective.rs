//! Training objective.
//!
//! ```text
//! adaptive:  L = L_lm + λ_fuse · L_fuse + λ_feed · CV²(importance)
//! baseline:  L = λ · L_lm + (1 − λ) · L_fuse        (all sources, uniform fusion)
//! ```
//!
//! `L_lm` and `L_fuse` are row-mean cross-entropies of the target model's
//! output against the one-hot labels and the fused matrix, averaged over the
//! batch. Importance is the batch sum of each sample's renormalized
//! selection weights scattered back to all M sources.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::fusion::{fuse, fuse_average, fuse_backward, FusionMethod};
use crate::numcore::{
    cross_entropy_rows, lm_backward_logits, GradStore, LmCache, OneHotLabels, ProbMatrix,
    TinyLM, TokenSeq, LOG_CLAMP,
};
use crate::selector::{asn_backward, select, AsnParams, MetricNoise, SelectionCache, SelectionConfig, SelectionResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    Adaptive,
    FuseAllBaseline,
}

/// Which importance entries enter the CV² penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedScope {
    /// All M sources; unselected sources contribute 0.
    AllSources,
    /// Only sources selected at least once in the batch.
    SelectedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda_fuse: f64,
    pub lambda_feed: f64,
    pub mode: ObjectiveMode,
    pub baseline_lambda: f64,
    pub eps_feed: f64,
    pub feed_scope: FeedScope,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_fuse: 0.1,
            lambda_feed: 0.5,
            mode: ObjectiveMode::Adaptive,
            baseline_lambda: 0.9,
            eps_feed: 1e-10,
            feed_scope: FeedScope::AllSources,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fuse >= 0.0 && self.lambda_feed >= 0.0) {
            return Err(FuseError::Config("loss weights must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline_lambda) {
            return Err(FuseError::Config(format!(
                "baseline lambda must lie in [0, 1], got {}",
                self.baseline_lambda
            )));
        }
        if !(self.eps_feed > 0.0) {
            return Err(FuseError::Config("eps_feed must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lm: f64,
    pub l_fuse: f64,
    pub l_feed: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_lm, self.l_fuse, self.l_feed, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Per-source importance summed over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector(pub Vec<f64>);

impl ImportanceVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub fn loss_lm(pred: &ProbMatrix, labels: &OneHotLabels) -> Result<f64> {
    cross_entropy_rows(pred, labels)
}

pub fn loss_fuse(pred: &ProbMatrix, fused: &ProbMatrix) -> Result<f64> {
    cross_entropy_rows(pred, fused)
}

/// Scatters each sample's compact weights back to source indices and sums.
pub fn importance_batch(results: &[SelectionResult]) -> Result<ImportanceVector> {
    let first = results
        .first()
        .ok_or_else(|| FuseError::Usage("importance needs at least one sample".into()))?;
    let m = first.num_sources();
    let mut acc = vec![0.0; m];
    for r in results {
        if r.num_sources() != m {
            return Err(FuseError::Dimension("samples disagree on source count".into()));
        }
        for (a, w) in acc.iter_mut().zip(r.scattered_weights()) {
            *a += w;
        }
    }
    Ok(ImportanceVector(acc))
}

fn feed_entries(importance: &ImportanceVector, scope: FeedScope) -> Vec<usize> {
    match scope {
        FeedScope::AllSources => (0..importance.0.len()).collect(),
        FeedScope::SelectedOnly => (0..importance.0.len())
            .filter(|&i| importance.0[i] > 0.0)
            .collect(),
    }
}

fn cv2(values: &[f64], eps: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean + eps)
}

/// Squared coefficient of variation `σ² / (μ² + ε)` with population variance.
pub fn loss_feed_cv2(importance: &ImportanceVector, eps: f64) -> Result<f64> {
    if importance.0.len() < 2 {
        return Err(FuseError::Dimension("CV² needs at least two sources".into()));
    }
    Ok(cv2(&importance.0, eps))
}

pub fn loss_feed_scoped(importance: &ImportanceVector, eps: f64, scope: FeedScope) -> Result<f64> {
    let idx = feed_entries(importance, scope);
    let vals: Vec<f64> = idx.iter().map(|&i| importance.0[i]).collect();
    match scope {
        FeedScope::AllSources => loss_feed_cv2(importance, eps),
        FeedScope::SelectedOnly => Ok(cv2(&vals, eps)),
    }
}

/// Gradient of the scoped CV² with respect to each importance entry.
pub fn feed_grad(importance: &ImportanceVector, eps: f64, scope: FeedScope) -> Vec<f64> {
    let idx = feed_entries(importance, scope);
    let mut grad = vec![0.0; importance.0.len()];
    if idx.len() < 2 {
        return grad;
    }
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| importance.0[i]).sum::<f64>() / n;
    let var = idx.iter().map(|&i| (importance.0[i] - mean).powi(2)).sum::<f64>() / n;
    let denom = mean * mean + eps;
    for &i in &idx {
        let dvar = 2.0 * (importance.0[i] - mean) / n;
        let ddenom = 2.0 * mean / n;
        grad[i] = dvar / denom - var * ddenom / (denom * denom);
    }
    grad
}

/// Adaptive-mode objective for one sample (or precomputed batch terms).
pub fn total_loss(
    pred: &ProbMatrix,
    labels: &OneHotLabels,
    fused: &ProbMatrix,
    importance: &ImportanceVector,
    config: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    if config.mode != ObjectiveMode::Adaptive {
        return Err(FuseError::Config("total_loss requires adaptive mode".into()));
    }
    let l_lm = loss_lm(pred, labels)?;
    let l_fuse = loss_fuse(pred, fused)?;
    let l_feed = loss_feed_scoped(importance, config.eps_feed, config.feed_scope)?;
    Ok(combine(l_lm, l_fuse, l_feed, config))
}

/// Fuse-all baseline objective `λ·L_lm + (1−λ)·L_fuse`.
pub fn total_loss_baseline(
    pred: &ProbMatrix,
    labels: &OneHotLabels,
    fused: &ProbMatrix,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FuseError::Config(format!("baseline lambda {lambda} outside [0, 1]")));
    }
    let l_lm = loss_lm(pred, labels)?;
    let l_fuse = loss_fuse(pred, fused)?;
    Ok(LossBreakdown {
        l_lm,
        l_fuse,
        l_feed: 0.0,
        total: lambda * l_lm + (1.0 - lambda) * l_fuse,
    })
}

fn combine(l_lm: f64, l_fuse: f64, l_feed: f64, config: &ObjectiveConfig) -> LossBreakdown {
    match config.mode {
        ObjectiveMode::Adaptive => LossBreakdown {
            l_lm,
            l_fuse,
            l_feed,
            total: l_lm + config.lambda_fuse * l_fuse + config.lambda_feed * l_feed,
        },
        ObjectiveMode::FuseAllBaseline => LossBreakdown {
            l_lm,
            l_fuse,
            l_feed: 0.0,
            total: config.baseline_lambda * l_lm + (1.0 - config.baseline_lambda) * l_fuse,
        },
    }
}

/// One training text with its source distribution matrices (already over
/// the target vocabulary).
#[derive(Debug, Clone)]
pub struct Sample {
    pub seq: TokenSeq,
    pub sources: Vec<ProbMatrix>,
    pub domain: usize,
}

/// Everything the joint forward pass needs besides the data.
#[derive(Debug, Clone, Copy)]
pub struct Graph<'a> {
    pub model: &'a TinyLM,
    pub asn: &'a AsnParams,
    pub selection: &'a SelectionConfig,
    pub fusion: FusionMethod,
    pub objective: &'a ObjectiveConfig,
}

#[derive(Debug, Clone)]
pub struct SampleForward {
    pub lm: LmCache,
    pub labels: OneHotLabels,
    pub fused: ProbMatrix,
    /// `None` in baseline mode (no selection).
    pub selection: Option<SelectionCache>,
    pub l_lm: f64,
    pub l_fuse: f64,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub samples: Vec<SampleForward>,
    pub importance: ImportanceVector,
    pub loss: LossBreakdown,
}

impl BatchForward {
    pub fn selections(&self) -> Vec<SelectionResult> {
        self.samples
            .iter()
            .filter_map(|s| s.selection.as_ref().map(|c| c.result().clone()))
            .collect()
    }
}

/// Selection → fusion → target forward → losses for a batch. `noise` holds
/// one draw per sample; `forced` pins the selected sets.
pub fn forward_batch(
    graph: &Graph<'_>,
    batch: &[&Sample],
    noise: &[MetricNoise],
    forced: Option<&[Vec<usize>]>,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(FuseError::Usage("empty batch".into()));
    }
    if noise.len() != batch.len() {
        return Err(FuseError::Dimension("one noise draw per sample required".into()));
    }
    let vocab = graph.model.dims().vocab;
    let m = graph.asn.sources();
    let mut samples = Vec::with_capacity(batch.len());
    for (b, sample) in batch.iter().enumerate() {
        if sample.sources.len() != m {
            return Err(FuseError::Dimension(format!(
                "sample has {} sources, network expects {m}",
                sample.sources.len()
            )));
        }
        let refs: Vec<&ProbMatrix> = sample.sources.iter().collect();
        let (fused, selection) = match graph.objective.mode {
            ObjectiveMode::Adaptive => {
                let cache = select(
                    graph.asn,
                    &refs,
                    graph.selection,
                    noise[b].clone(),
                    forced.map(|f| f[b].as_slice()),
                )?;
                // plain averaging ignores the selection and uses every source
                let fused = if graph.fusion == FusionMethod::Average {
                    fuse_average(&refs)?
                } else {
                    let chosen: Vec<&ProbMatrix> =
                        cache.result().selected.iter().map(|&j| refs[j]).collect();
                    fuse(graph.fusion, &chosen, &cache.result().weights)?
                };
                (fused, Some(cache))
            }
            ObjectiveMode::FuseAllBaseline => (fuse_average(&refs)?, None),
        };
        let (pred, lm) = graph.model.forward_cached(&sample.seq)?;
        if fused.dim() != pred.dim() {
            return Err(FuseError::Dimension(format!(
                "fused matrix {:?} vs target output {:?}",
                fused.dim(),
                pred.dim()
            )));
        }
        let labels = OneHotLabels::from_seq(&sample.seq, vocab)?;
        let l_lm = loss_lm(&pred, &labels)?;
        let l_fuse = loss_fuse(&pred, &fused)?;
        samples.push(SampleForward {
            lm,
            labels,
            fused,
            selection,
            l_lm,
            l_fuse,
        });
    }
    let bsz = samples.len() as f64;
    let l_lm = samples.iter().map(|s| s.l_lm).sum::<f64>() / bsz;
    let l_fuse = samples.iter().map(|s| s.l_fuse).sum::<f64>() / bsz;
    let (importance, l_feed) = match graph.objective.mode {
        ObjectiveMode::Adaptive => {
            let results: Vec<SelectionResult> = samples
                .iter()
                .filter_map(|s| s.selection.as_ref().map(|c| c.result().clone()))
                .collect();
            let imp = importance_batch(&results)?;
            let feed = loss_feed_scoped(&imp, graph.objective.eps_feed, graph.objective.feed_scope)?;
            (imp, feed)
        }
        ObjectiveMode::FuseAllBaseline => (ImportanceVector(vec![1.0 / m as f64 * bsz; m]), 0.0),
    };
    let loss = combine(l_lm, l_fuse, l_feed, graph.objective);
    Ok(BatchForward {
        samples,
        importance,
        loss,
    })
}

/// Gradients of the batch objective for the target model and the selection
/// network.
#[derive(Debug, Clone)]
pub struct JointGrads {
    pub lm: GradStore,
    pub asn: GradStore,
}

/// Backward through the cached batch forward. `L_lm` reaches only the
/// target, `L_fuse` reaches the target and (for weighted fusion) the
/// selection network, `L_feed` reaches only the selection network.
pub fn backward_total(graph: &Graph<'_>, batch: &[&Sample], fwd: &BatchForward) -> Result<JointGrads> {
    if batch.len() != fwd.samples.len() {
        return Err(FuseError::Usage("forward cache does not match batch".into()));
    }
    let obj = graph.objective;
    let bsz = batch.len() as f64;
    let (w_lm, w_fuse) = match obj.mode {
        ObjectiveMode::Adaptive => (1.0, obj.lambda_fuse),
        ObjectiveMode::FuseAllBaseline => (obj.baseline_lambda, 1.0 - obj.baseline_lambda),
    };
    let feed = match obj.mode {
        ObjectiveMode::Adaptive if obj.lambda_feed != 0.0 => {
            Some(feed_grad(&fwd.importance, obj.eps_feed, obj.feed_scope))
        }
        _ => None,
    };

    let mut lm_grads = graph.model.params().zeros_like();
    let mut asn_grads = graph.asn.params().zeros_like();
    for (sample, sf) in batch.iter().zip(&fwd.samples) {
        let pred = sf.lm.probs();
        let rows = pred.rows() as f64;

        // d/dlogits of -Σ q ln T is T·Σq − q
        let mut grad_logits = Array2::zeros(pred.dim());
        let dense_labels = sf.labels.to_dense();
        for n in 0..pred.rows() {
            let t = pred.row(n);
            let f = sf.fused.row(n);
            let fsum: f64 = f.sum();
            for v in 0..pred.cols() {
                let g_lm = t[v] - dense_labels[[n, v]];
                let g_fuse = t[v] * fsum - f[v];
                grad_logits[[n, v]] = (w_lm * g_lm + w_fuse * g_fuse) / (rows * bsz);
            }
        }
        let g = lm_backward_logits(graph.model, &sample.seq, &sf.lm, grad_logits.view())?;
        lm_grads.add_scaled(&g, 1.0)?;

        let Some(cache) = &sf.selection else { continue };
        let result = cache.result();
        let mut grad_weights = vec![0.0; result.selected.len()];
        if graph.fusion.uses_weights() && w_fuse != 0.0 {
            let upstream = pred
                .view()
                .mapv(|t| -w_fuse * t.max(LOG_CLAMP).ln() / (rows * bsz));
            let chosen: Vec<&ProbMatrix> =
                result.selected.iter().map(|&j| &sample.sources[j]).collect();
            let g = fuse_backward(&chosen, upstream.view())?;
            // weights sum to S/(S+eps) and the fusion divides the slack out
            // per row, so differentiate through F = Σ w_j P_j / Σ w
            let total: f64 = result.weights.iter().sum();
            let mean: f64 = result.weights.iter().zip(&g).map(|(w, g)| w * g).sum::<f64>() / total;
            grad_weights
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += (b - mean) / total);
        }
        if let Some(fg) = &feed {
            for (k, &j) in result.selected.iter().enumerate() {
                grad_weights[k] += obj.lambda_feed * fg[j];
            }
        }
        if grad_weights.iter().any(|&g| g != 0.0) {
            let g = asn_backward(graph.asn, cache, &grad_weights, None)?;
            asn_grads.add_scaled(&g, 1.0)?;
        }
    }
    Ok(JointGrads {
        lm: lm_grads,
        asn: asn_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_grad, max_rel_error, LmDims, ParamSet};
    use crate::rng;
    use crate::selector::{asn_init_xavier, AsnLayers, SelectionCount};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn result(m: usize, selected: Vec<usize>, weights: Vec<f64>) -> SelectionResult {
        let mut mask = vec![false; m];
        selected.iter().for_each(|&j| mask[j] = true);
        SelectionResult {
            logits: vec![0.0; m],
            probs: vec![1.0 / m as f64; m],
            mask,
            selected,
            weights,
        }
    }

    #[test]
    fn lm_and_fuse_examples() {
        let uniform = ProbMatrix::uniform(2, 32);
        let labels = OneHotLabels::new(vec![3, 7], 32).unwrap();
        assert!((loss_lm(&uniform, &labels).unwrap() - 32f64.ln()).abs() < 1e-12);

        let p = ProbMatrix::new(array![[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]]).unwrap();
        let entropy = -(0.2f64 * 0.2f64.ln() + 0.3 * 0.3f64.ln() + 0.5 * 0.5f64.ln()
            + 0.6 * 0.6f64.ln() + 0.3 * 0.3f64.ln() + 0.1 * 0.1f64.ln())
            / 2.0;
        assert!((loss_fuse(&p, &p).unwrap() - entropy).abs() < 1e-14);
        // Gibbs: any other prediction is worse
        let q = ProbMatrix::new(array![[0.3, 0.3, 0.4], [0.5, 0.3, 0.2]]).unwrap();
        assert!(loss_fuse(&q, &p).unwrap() > entropy);

        let hot = ProbMatrix::new(array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let lab = OneHotLabels::new(vec![1, 0], 3).unwrap();
        assert_eq!(loss_fuse(&q, &hot).unwrap(), loss_lm(&q, &lab).unwrap());

        let hand = -(0.3f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((loss_fuse(&q, &hot).unwrap() - hand).abs() < 1e-15);
    }

    #[test]
    fn importance_examples() {
        let one = importance_batch(&[result(4, vec![2], vec![1.0])]).unwrap();
        assert_eq!(one.0, vec![0.0, 0.0, 1.0, 0.0]);
        let two = importance_batch(&[
            result(4, vec![0], vec![1.0]),
            result(4, vec![1], vec![1.0]),
        ])
        .unwrap();
        assert_eq!(two.0, vec![1.0, 1.0, 0.0, 0.0]);

        let batch = vec![
            result(3, vec![0, 2], vec![0.25, 0.75]),
            result(3, vec![1, 2], vec![0.4, 0.6]),
            result(3, vec![0, 1, 2], vec![0.2, 0.3, 0.5]),
        ];
        let mut hand = [0.0; 3];
        for r in &batch {
            for (k, &j) in r.selected.iter().enumerate() {
                hand[j] += r.weights[k];
            }
        }
        assert_eq!(importance_batch(&batch).unwrap().0, hand.to_vec());
        assert!(importance_batch(&[]).is_err());
    }

    #[test]
    fn cv2_examples() {
        let eps = 1e-10;
        assert_eq!(loss_feed_cv2(&ImportanceVector(vec![0.5, 0.5]), eps).unwrap(), 0.0);
        let v = loss_feed_cv2(&ImportanceVector(vec![3.0, 1.0]), eps).unwrap();
        assert!((v - 1.0 / (4.0 + eps)).abs() < 1e-15);
        assert!(loss_feed_cv2(&ImportanceVector(vec![1.0]), eps).is_err());

        let scoped = loss_feed_scoped(&ImportanceVector(vec![3.0, 0.0, 1.0]), eps, FeedScope::SelectedOnly)
            .unwrap();
        assert!((scoped - v).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn cv2_scale_and_permutation(
            v in proptest::collection::vec(1.0f64..10.0, 2..8),
            c in 0.5f64..20.0,
            seed in 0u64..100,
        ) {
            let eps = 1e-10;
            let base = loss_feed_cv2(&ImportanceVector(v.clone()), eps).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((loss_feed_cv2(&ImportanceVector(scaled), eps).unwrap() - base).abs() < 1e-6);
            let mut perm = v.clone();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng::stream(seed, "p", &[]));
            prop_assert!((loss_feed_cv2(&ImportanceVector(perm), eps).unwrap() - base).abs() < 1e-12);
            // zero iff all equal
            let equal = vec![v[0]; v.len()];
            prop_assert!(loss_feed_cv2(&ImportanceVector(equal), eps).unwrap() < 1e-12);
            if v.iter().any(|&x| (x - v[0]).abs() > 1e-3) {
                prop_assert!(base > 1e-12);
            }
        }

        #[test]
        fn total_affine_in_lambdas(lf in 0.0f64..2.0, lfe in 0.0f64..2.0, d in 0.0f64..1.0) {
            let terms = (1.3, 0.7, 0.2);
            let cfg = ObjectiveConfig { lambda_fuse: lf, lambda_feed: lfe, ..Default::default() };
            let a = combine(terms.0, terms.1, terms.2, &cfg);
            prop_assert_eq!(a.total, terms.0 + lf * terms.1 + lfe * terms.2);
            let more = ObjectiveConfig { lambda_fuse: lf + d, ..cfg.clone() };
            prop_assert!(combine(terms.0, terms.1, terms.2, &more).total >= a.total);
            let more = ObjectiveConfig { lambda_feed: lfe + d, ..cfg };
            prop_assert!(combine(terms.0, terms.1, terms.2, &more).total >= a.total);
        }
    }

    #[test]
    fn feed_grad_matches_finite_differences() {
        for scope in [FeedScope::AllSources, FeedScope::SelectedOnly] {
            let imp = ImportanceVector(vec![1.3, 0.0, 2.2, 0.5]);
            let g = feed_grad(&imp, 1e-10, scope);
            for i in 0..4 {
                if scope == FeedScope::SelectedOnly && i == 1 {
                    assert_eq!(g[i], 0.0);
                    continue;
                }
                let h = 1e-6;
                let mut hi = imp.clone();
                let mut lo = imp.clone();
                hi.0[i] += h;
                lo.0[i] -= h;
                let fd = (loss_feed_scoped(&hi, 1e-10, scope).unwrap()
                    - loss_feed_scoped(&lo, 1e-10, scope).unwrap())
                    / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-7, "{scope:?} {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn total_examples() {
        let pred = ProbMatrix::new(array![[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]]).unwrap();
        let labels = OneHotLabels::new(vec![2, 0], 3).unwrap();
        let fused = ProbMatrix::new(array![[0.1, 0.1, 0.8], [0.5, 0.4, 0.1]]).unwrap();
        let imp = ImportanceVector(vec![3.0, 1.0]);

        let zero = ObjectiveConfig {
            lambda_fuse: 0.0,
            lambda_feed: 0.0,
            ..Default::default()
        };
        let t = total_loss(&pred, &labels, &fused, &imp, &zero).unwrap();
        assert_eq!(t.total, t.l_lm);

        let cfg = ObjectiveConfig::default();
        let t = total_loss(&pred, &labels, &fused, &imp, &cfg).unwrap();
        let l_lm = -(0.5f64.ln() + 0.6f64.ln()) / 2.0;
        let l_fuse = -(0.1 * 0.2f64.ln() + 0.1 * 0.3f64.ln() + 0.8 * 0.5f64.ln()
            + 0.5 * 0.6f64.ln() + 0.4 * 0.3f64.ln() + 0.1 * 0.1f64.ln())
            / 2.0;
        let l_feed = 1.0 / (4.0 + 1e-10);
        assert!((t.total - (l_lm + 0.1 * l_fuse + 0.5 * l_feed)).abs() < 1e-14);

        let base = ObjectiveConfig {
            mode: ObjectiveMode::FuseAllBaseline,
            ..Default::default()
        };
        assert!(matches!(
            total_loss(&pred, &labels, &fused, &imp, &base),
            Err(FuseError::Config(_))
        ));

        let b1 = total_loss_baseline(&pred, &labels, &fused, 1.0).unwrap();
        assert_eq!((b1.total, b1.l_feed), (b1.l_lm, 0.0));
        let b0 = total_loss_baseline(&pred, &labels, &fused, 0.0).unwrap();
        assert_eq!(b0.total, b0.l_fuse);
        let half = total_loss_baseline(&pred, &labels, &fused, 0.5).unwrap();
        assert!((half.total - 0.5 * (l_lm + l_fuse)).abs() < 1e-14);
        assert!(total_loss_baseline(&pred, &labels, &fused, 1.5).is_err());

        let hot = ProbMatrix::new(array![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap();
        let zero_terms = total_loss(&hot, &labels, &hot, &ImportanceVector(vec![1.0, 1.0]), &cfg).unwrap();
        assert!(zero_terms.total.abs() < 1e-10);
    }

    pub(crate) struct Fixture {
        pub model: TinyLM,
        pub asn: AsnParams,
        pub samples: Vec<Sample>,
    }

    pub(crate) fn fixture(seed: u64, v: usize, m: usize, n: usize, batch: usize) -> Fixture {
        let mut r = rng::stream(seed, "test.objective", &[]);
        let dims = LmDims {
            vocab: v,
            context: 2,
            embed: 3,
            hidden: 4,
        };
        let mut model = TinyLM::init(dims, &mut r).unwrap();
        for t in model.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.2..0.2));
        }
        let mut asn = asn_init_xavier(m, v, AsnLayers::ThreeLinear, &mut r).unwrap();
        for t in asn.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.2..0.2));
        }
        let samples = (0..batch)
            .map(|_| {
                let ids: Vec<usize> = (0..n).map(|_| r.random_range(1..v)).collect();
                let sources = (0..m)
                    .map(|_| {
                        ProbMatrix::normalized(Array2::from_shape_fn((n, v), |_| {
                            r.random_range(0.05..1.0f64).powi(2)
                        }))
                        .unwrap()
                    })
                    .collect();
                Sample {
                    seq: TokenSeq::new(ids, v).unwrap(),
                    sources,
                    domain: 0,
                }
            })
            .collect();
        Fixture { model, asn, samples }
    }

    fn joint_params(model: &TinyLM, asn: &AsnParams) -> ParamSet {
        let mut all = model.params().clone();
        all.extend(asn.params().clone()).unwrap();
        all
    }

    fn check_joint(seed: u64, objective: &ObjectiveConfig, selection: &SelectionConfig) -> f64 {
        let (v, m, n) = (6, 3, 4);
        let fx = fixture(seed, v, m, n, 2);
        let batch: Vec<&Sample> = fx.samples.iter().collect();
        let noise = vec![MetricNoise::none(m); batch.len()];
        let graph = Graph {
            model: &fx.model,
            asn: &fx.asn,
            selection,
            fusion: FusionMethod::Weighted,
            objective,
        };
        let fwd = forward_batch(&graph, &batch, &noise, None).unwrap();
        let forced: Option<Vec<Vec<usize>>> = fwd
            .samples
            .iter()
            .map(|s| s.selection.as_ref().map(|c| c.result().selected.clone()))
            .collect();
        let grads = backward_total(&graph, &batch, &fwd).unwrap();
        let mut analytic = grads.lm.clone();
        analytic.extend(grads.asn.clone()).unwrap();

        let numeric = finite_diff_grad(
            |p| {
                let model = TinyLM::from_params(p.clone()).unwrap();
                let asn = AsnParams::from_params(p.clone(), m, v).unwrap();
                let g = Graph {
                    model: &model,
                    asn: &asn,
                    ..graph
                };
                forward_batch(&g, &batch, &noise, forced.as_deref()).unwrap().loss.total
            },
            &joint_params(&fx.model, &fx.asn),
            1e-5,
        )
        .unwrap();
        max_rel_error(&analytic, &numeric).unwrap()
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let selection = SelectionConfig::default();
        for seed in 0..6 {
            let err = check_joint(seed, &ObjectiveConfig::default(), &selection);
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
        let scoped = ObjectiveConfig {
            feed_scope: FeedScope::SelectedOnly,
            lambda_fuse: 0.7,
            ..Default::default()
        };
        assert!(check_joint(7, &scoped, &selection) <= 1e-4);
        let baseline = ObjectiveConfig {
            mode: ObjectiveMode::FuseAllBaseline,
            ..Default::default()
        };
        assert!(check_joint(8, &baseline, &selection) <= 1e-4);
    }

    #[test]
    fn gradient_is_sum_of_per_term_gradients() {
        let fx = fixture(3, 6, 3, 4, 2);
        let batch: Vec<&Sample> = fx.samples.iter().collect();
        let noise = vec![MetricNoise::none(3); 2];
        let selection = SelectionConfig::default();
        let run = |cfg: ObjectiveConfig| {
            let g = Graph {
                model: &fx.model,
                asn: &fx.asn,
                selection: &selection,
                fusion: FusionMethod::Weighted,
                objective: &cfg,
            };
            let fwd = forward_batch(&g, &batch, &noise, None).unwrap();
            backward_total(&g, &batch, &fwd).unwrap()
        };
        let full = run(ObjectiveConfig::default());
        let lm_only = run(ObjectiveConfig { lambda_fuse: 0.0, lambda_feed: 0.0, ..Default::default() });
        let fuse_only = run(ObjectiveConfig { lambda_feed: 0.0, ..Default::default() });
        let feed_only = run(ObjectiveConfig { lambda_fuse: 0.0, ..Default::default() });

        assert!(lm_only.asn.is_all_zero());
        // target gradients: lm + fuse parts; feed adds nothing to the target
        let mut sum = fuse_only.lm.clone();
        sum.add_scaled(&feed_only.lm, 1.0).unwrap();
        sum.add_scaled(&lm_only.lm, -1.0).unwrap();
        let mut sum_asn = fuse_only.asn.clone();
        sum_asn.add_scaled(&feed_only.asn, 1.0).unwrap();
        for (a, b) in full.lm.flatten().iter().zip(sum.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in full.asn.flatten().iter().zip(sum_asn.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(feed_only.lm.flatten(), lm_only.lm.flatten());
    }

    #[test]
    fn feedback_alone_flattens_weights() {
        let fx = fixture(4, 6, 4, 5, 1);
        let mut asn = fx.asn.clone();
        let batch: Vec<&Sample> = fx.samples.iter().collect();
        let noise = vec![MetricNoise::none(4)];
        let selection = SelectionConfig {
            count: SelectionCount::All,
            ..Default::default()
        };
        let objective = ObjectiveConfig {
            lambda_fuse: 0.0,
            lambda_feed: 1.0,
            ..Default::default()
        };
        // skew the starting point so there is something to flatten
        asn.params_mut().tensor_mut("asn.l3.bias").unwrap().data_mut()[0] = 2.0;
        let spread = |asn: &AsnParams| {
            let g = Graph { model: &fx.model, asn, selection: &selection, fusion: FusionMethod::Weighted, objective: &objective };
            let w = forward_batch(&g, &batch, &noise, None).unwrap().samples[0]
                .selection
                .as_ref()
                .unwrap()
                .result()
                .weights
                .clone();
            w.iter().cloned().fold(f64::MIN, f64::max) - w.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&asn) > 0.3);
        for _ in 0..200 {
            let g = Graph { model: &fx.model, asn: &asn, selection: &selection, fusion: FusionMethod::Weighted, objective: &objective };
            let fwd = forward_batch(&g, &batch, &noise, None).unwrap();
            let grads = backward_total(&g, &batch, &fwd).unwrap();
            asn.params_mut().add_scaled(&grads.asn, -0.5).unwrap();
        }
        assert!(spread(&asn) < 0.05, "{}", spread(&asn));
    }
}
