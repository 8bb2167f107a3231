//! Fixed-context MLP language model used as the trainable target.
//!
//! Row `n` of the output predicts token `n` from the `context` tokens before
//! it: the context embeddings are concatenated, passed through one GELU
//! hidden layer, and projected to vocabulary logits. Positions with fewer
//! than `context` predecessors are left-padded with [`PAD_ID`].

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{gelu_grad, gelu_scalar, softmax_row, LOG_CLAMP};
use super::params::{GradStore, ParamSet, ParamTensor};
use super::tensor::{ProbMatrix, TokenSeq};
use crate::error::{FuseError, Result};

/// Reserved padding token; generated corpora never emit it as content.
pub const PAD_ID: usize = 0;

pub const EMBED: &str = "lm.embed";
pub const HIDDEN_W: &str = "lm.hidden.weight";
pub const HIDDEN_B: &str = "lm.hidden.bias";
pub const OUT_W: &str = "lm.out.weight";
pub const OUT_B: &str = "lm.out.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmDims {
    pub vocab: usize,
    pub context: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for LmDims {
    fn default() -> Self {
        Self {
            vocab: 32,
            context: 4,
            embed: 16,
            hidden: 32,
        }
    }
}

impl LmDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.context == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(FuseError::Config(format!("invalid model dims {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    dims: LmDims,
    params: ParamSet,
}

/// Activations retained from a forward pass.
#[derive(Debug, Clone)]
pub struct LmCache {
    inputs: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    probs: ProbMatrix,
}

impl LmCache {
    pub fn probs(&self) -> &ProbMatrix {
        &self.probs
    }
}

impl TinyLM {
    pub fn zeros(dims: LmDims) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamSet::new();
        params.push(ParamTensor::zeros(EMBED, &[dims.vocab, dims.embed]))?;
        params.push(ParamTensor::zeros(HIDDEN_W, &[dims.context * dims.embed, dims.hidden]))?;
        params.push(ParamTensor::zeros(HIDDEN_B, &[dims.hidden]))?;
        params.push(ParamTensor::zeros(OUT_W, &[dims.hidden, dims.vocab]))?;
        params.push(ParamTensor::zeros(OUT_B, &[dims.vocab]))?;
        Ok(Self { dims, params })
    }

    /// Xavier-uniform weight matrices and embedding table, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: LmDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut params = ParamSet::new();
        params.push(ParamTensor::xavier_uniform(EMBED, dims.vocab, dims.embed, rng))?;
        params.push(ParamTensor::xavier_uniform(
            HIDDEN_W,
            dims.context * dims.embed,
            dims.hidden,
            rng,
        ))?;
        params.push(ParamTensor::zeros(HIDDEN_B, &[dims.hidden]))?;
        params.push(ParamTensor::xavier_uniform(OUT_W, dims.hidden, dims.vocab, rng))?;
        params.push(ParamTensor::zeros(OUT_B, &[dims.vocab]))?;
        Ok(Self { dims, params })
    }

    /// Rebuilds a model from stored `lm.*` tensors, inferring dimensions.
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let params = params.subset("lm.");
        let embed = params.tensor(EMBED)?.shape().to_vec();
        let hidden_w = params.tensor(HIDDEN_W)?.shape().to_vec();
        let (&[vocab, embed_dim], &[ctx_embed, hidden]) = (embed.as_slice(), hidden_w.as_slice())
        else {
            return Err(FuseError::Dimension("language model tensors have wrong rank".into()));
        };
        if embed_dim == 0 || ctx_embed % embed_dim != 0 {
            return Err(FuseError::Dimension("hidden weight rows not a multiple of embed dim".into()));
        }
        let dims = LmDims {
            vocab,
            context: ctx_embed / embed_dim,
            embed: embed_dim,
            hidden,
        };
        let reference = Self::zeros(dims)?;
        for t in reference.params.iter() {
            if params.tensor(t.name())?.shape() != t.shape() {
                return Err(FuseError::Dimension(format!("tensor {} has wrong shape", t.name())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(FuseError::Dimension("unexpected language model tensors".into()));
        }
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> LmDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn context_inputs(&self, seq: &TokenSeq) -> Result<Array2<f64>> {
        let LmDims {
            vocab,
            context,
            embed,
            ..
        } = self.dims;
        if let Some(&id) = seq.ids().iter().find(|&&id| id >= vocab) {
            return Err(FuseError::Vocabulary { id, vocab });
        }
        let table = self.params.tensor(EMBED)?.view2();
        let n = seq.len();
        let mut inputs = Array2::zeros((n, context * embed));
        for pos in 0..n {
            for k in 0..context {
                // slot k holds token pos - context + k
                let id = (pos + k)
                    .checked_sub(context)
                    .map_or(PAD_ID, |i| seq.ids()[i]);
                inputs
                    .row_mut(pos)
                    .slice_mut(ndarray::s![k * embed..(k + 1) * embed])
                    .assign(&table.row(id));
            }
        }
        Ok(inputs)
    }

    pub fn forward_cached(&self, seq: &TokenSeq) -> Result<(ProbMatrix, LmCache)> {
        let inputs = self.context_inputs(seq)?;
        let hw = self.params.tensor(HIDDEN_W)?.view2();
        let hb = self.params.tensor(HIDDEN_B)?.view1();
        let ow = self.params.tensor(OUT_W)?.view2();
        let ob = self.params.tensor(OUT_B)?.view1();

        let pre = inputs.dot(&hw) + &hb;
        let hidden = pre.mapv(gelu_scalar);
        let logits = hidden.dot(&ow) + &ob;
        let mut probs = Array2::zeros(logits.dim());
        for (src, mut dst) in logits.rows().into_iter().zip(probs.rows_mut()) {
            let row = softmax_row(src.as_slice().expect("standard layout"))?;
            dst.assign(&Array1::from(row));
        }
        let probs = ProbMatrix::new(probs)?;
        Ok((
            probs.clone(),
            LmCache {
                inputs,
                pre,
                hidden,
                probs,
            },
        ))
    }
}

pub fn lm_forward(model: &TinyLM, seq: &TokenSeq) -> Result<ProbMatrix> {
    model.forward_cached(seq).map(|(p, _)| p)
}

/// Gradients of all model parameters given the gradient of a scalar loss
/// with respect to the output probabilities.
pub fn lm_backward(model: &TinyLM, seq: &TokenSeq, upstream: ArrayView2<'_, f64>) -> Result<GradStore> {
    let (probs, cache) = model.forward_cached(seq)?;
    if upstream.dim() != probs.dim() {
        return Err(FuseError::Dimension(format!(
            "upstream {:?} vs output {:?}",
            upstream.dim(),
            probs.dim()
        )));
    }
    // softmax backward: g_logit = T ⊙ (g − ⟨g, T⟩)
    let mut grad_logits = Array2::zeros(probs.dim());
    for ((g, t), mut out) in upstream
        .rows()
        .into_iter()
        .zip(probs.view().rows())
        .zip(grad_logits.rows_mut())
    {
        let dot: f64 = g.iter().zip(t.iter()).map(|(a, b)| a * b).sum();
        for ((o, &gi), &ti) in out.iter_mut().zip(g.iter()).zip(t.iter()) {
            *o = ti * (gi - dot);
        }
    }
    lm_backward_logits(model, seq, &cache, grad_logits.view())
}

/// Backward pass from gradients with respect to the pre-softmax logits.
pub fn lm_backward_logits(
    model: &TinyLM,
    seq: &TokenSeq,
    cache: &LmCache,
    grad_logits: ArrayView2<'_, f64>,
) -> Result<GradStore> {
    let dims = model.dims;
    if grad_logits.dim() != cache.probs.dim() || seq.len() != cache.probs.rows() {
        return Err(FuseError::Dimension(format!(
            "logit gradient {:?} vs cached output {:?}",
            grad_logits.dim(),
            cache.probs.dim()
        )));
    }
    let params = model.params();
    let mut grads = params.zeros_like();

    let ow = params.tensor(OUT_W)?.view2();
    let hw = params.tensor(HIDDEN_W)?.view2();

    grads
        .tensor_mut(OUT_W)?
        .view2_mut()
        .assign(&cache.hidden.t().dot(&grad_logits));
    grads
        .tensor_mut(OUT_B)?
        .view1_mut()
        .assign(&grad_logits.sum_axis(Axis(0)));

    let mut grad_pre = grad_logits.dot(&ow.t());
    grad_pre.zip_mut_with(&cache.pre, |g, &p| *g *= gelu_grad(p));
    grads
        .tensor_mut(HIDDEN_W)?
        .view2_mut()
        .assign(&cache.inputs.t().dot(&grad_pre));
    grads
        .tensor_mut(HIDDEN_B)?
        .view1_mut()
        .assign(&grad_pre.sum_axis(Axis(0)));

    let grad_inputs = grad_pre.dot(&hw.t());
    let embed = grads.tensor_mut(EMBED)?;
    let mut table = embed.view2_mut();
    for pos in 0..seq.len() {
        for k in 0..dims.context {
            let id = (pos + k)
                .checked_sub(dims.context)
                .map_or(PAD_ID, |i| seq.ids()[i]);
            let slice = grad_inputs.slice(ndarray::s![pos, k * dims.embed..(k + 1) * dims.embed]);
            let mut row = table.row_mut(id);
            row += &slice;
        }
    }
    Ok(grads)
}

/// Upstream gradient (w.r.t. probabilities) of `mean_n -Σ_v q[n,v] ln T[n,v]`.
pub fn cross_entropy_upstream(pred: &ProbMatrix, target: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = pred.rows() as f64;
    let mut out = Array2::zeros(pred.dim());
    ndarray::Zip::from(&mut out)
        .and(pred.view())
        .and(target)
        .for_each(|o, &p, &q| *o = -q / (p.max(LOG_CLAMP) * n));
    out
}
