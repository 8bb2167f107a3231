//! Finite-difference checks of every hand-written backward pass.

use fusex_core::fusion::{fuse_backward, fuse_weighted, FusionMethod};
use fusex_core::numcore::{finite_diff_grad, lm_backward, lm_forward, max_rel_error, softmax_row};
use fusex_core::objective::{backward_total, forward_batch, Graph, ObjectiveConfig, Sample};
use fusex_core::rng;
use fusex_core::selector::{asn_backward, asn_init_xavier, select, AsnLayers, AsnParams, MetricNoise, SelectionConfig};
use fusex_core::{LmDims, ParamSet, ParamTensor, ProbMatrix, TinyLM, TokenSeq};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MODULES: [&str; 4] = ["lm_backward", "asn_backward", "fuse_backward", "backward_total"];
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub vocab: usize,
    pub sources: usize,
    pub positions: usize,
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            vocab: 8,
            sources: 4,
            positions: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleResult {
    pub name: String,
    pub max_rel_error: f64,
    pub seeds: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub modules: Vec<ModuleResult>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failed(&self) -> Vec<String> {
        self.modules.iter().filter(|m| !m.passed).map(|m| m.name.clone()).collect()
    }
}

fn jitter(params: &mut ParamSet, r: &mut impl Rng) {
    for t in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.2..0.2));
    }
}

fn sources(r: &mut impl Rng, m: usize, n: usize, v: usize) -> Vec<ProbMatrix> {
    (0..m)
        .map(|_| {
            ProbMatrix::normalized(Array2::from_shape_fn((n, v), |_| r.random_range(0.05..1.0f64).powi(2)))
                .expect("positive rows")
        })
        .collect()
}

fn small_lm(v: usize, r: &mut impl Rng) -> Result<TinyLM, CliError> {
    let dims = LmDims {
        vocab: v,
        context: 2,
        embed: 3,
        hidden: 4,
    };
    let mut lm = TinyLM::init(dims, r)?;
    jitter(lm.params_mut(), r);
    Ok(lm)
}

fn tokens(r: &mut impl Rng, n: usize, v: usize) -> Result<TokenSeq, CliError> {
    Ok(TokenSeq::new((0..n).map(|_| r.random_range(1..v)).collect(), v)?)
}

fn perturbed(mut g: ParamSet, inject: bool) -> ParamSet {
    if inject {
        // deliberate bug for exercising the failure path
        g.scale(1.01);
    }
    g
}

fn check_lm(seed: u64, s: Shape, inject: bool) -> Result<f64, CliError> {
    let mut r = rng::stream(seed, "gradcheck.lm", &[]);
    let lm = small_lm(s.vocab, &mut r)?;
    let seq = tokens(&mut r, s.positions, s.vocab)?;
    let up = Array2::from_shape_fn((s.positions, s.vocab), |_| r.random_range(-1.0..1.0));
    let analytic = perturbed(lm_backward(&lm, &seq, up.view())?, inject);
    let numeric = finite_diff_grad(
        |p| match TinyLM::from_params(p.clone()).and_then(|m| lm_forward(&m, &seq)) {
            Ok(out) => (&out.view() * &up).sum(),
            Err(_) => f64::NAN,
        },
        lm.params(),
        STEP,
    )?;
    Ok(max_rel_error(&analytic, &numeric)?)
}

fn check_asn(seed: u64, s: Shape, inject: bool) -> Result<f64, CliError> {
    let mut r = rng::stream(seed, "gradcheck.asn", &[]);
    let mut asn = asn_init_xavier(s.sources, s.vocab, AsnLayers::ThreeLinear, &mut r)?;
    jitter(asn.params_mut(), &mut r);
    let srcs = sources(&mut r, s.sources, s.positions, s.vocab);
    let refs: Vec<&ProbMatrix> = srcs.iter().collect();
    let config = SelectionConfig::default();
    let noise = MetricNoise::none(s.sources);
    let cache = select(&asn, &refs, &config, noise.clone(), None)?;
    let forced = cache.result().selected.clone();
    // linear probe on the scattered weights and on the pooled logits
    let g: Vec<f64> = (0..s.sources).map(|_| r.random_range(-1.0..1.0)).collect();
    let h: Vec<f64> = (0..s.sources).map(|_| r.random_range(-1.0..1.0)).collect();
    let compact: Vec<f64> = forced.iter().map(|&j| g[j]).collect();
    let analytic = perturbed(asn_backward(&asn, &cache, &compact, Some(&h))?, inject);
    let numeric = finite_diff_grad(
        |p| {
            let run = || -> Result<f64, CliError> {
                let a = AsnParams::from_params(p.clone(), s.sources, s.vocab)?;
                let c = select(&a, &refs, &config, noise.clone(), Some(&forced))?;
                let w = c.result().scattered_weights();
                let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
                Ok(dot(&w, &g) + dot(&c.result().logits, &h))
            };
            run().unwrap_or(f64::NAN)
        },
        asn.params(),
        STEP,
    )?;
    Ok(max_rel_error(&analytic, &numeric)?)
}

/// Weights come from a softmax over free parameters so that finite
/// differences stay on the simplex.
fn check_fuse(seed: u64, s: Shape, inject: bool) -> Result<f64, CliError> {
    let mut r = rng::stream(seed, "gradcheck.fuse", &[]);
    let k = r.random_range(1..=s.sources);
    let srcs = sources(&mut r, k, s.positions, s.vocab);
    let refs: Vec<&ProbMatrix> = srcs.iter().collect();
    let theta: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
    let up = Array2::from_shape_fn((s.positions, s.vocab), |_| r.random_range(-1.0..1.0));
    let mut params = ParamSet::new();
    params.push(ParamTensor::from_vec("fuse.theta", &[k], theta.clone())?)?;

    let w = softmax_row(&theta)?;
    let gw = fuse_backward(&refs, up.view())?;
    let dot: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
    let gtheta: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi * (gi - dot)).collect();
    let mut analytic = ParamSet::new();
    analytic.push(ParamTensor::from_vec("fuse.theta", &[k], gtheta)?)?;
    let analytic = perturbed(analytic, inject);

    let numeric = finite_diff_grad(
        |p| {
            let th = p.tensor("fuse.theta").map(|t| t.data().to_vec()).unwrap_or_default();
            match softmax_row(&th).and_then(|w| fuse_weighted(&refs, &w)) {
                Ok(f) => (&f.view() * &up).sum(),
                Err(_) => f64::NAN,
            }
        },
        &params,
        STEP,
    )?;
    Ok(max_rel_error(&analytic, &numeric)?)
}

fn check_total(seed: u64, s: Shape, inject: bool) -> Result<f64, CliError> {
    let mut r = rng::stream(seed, "gradcheck.total", &[]);
    let lm = small_lm(s.vocab, &mut r)?;
    let mut asn = asn_init_xavier(s.sources, s.vocab, AsnLayers::ThreeLinear, &mut r)?;
    jitter(asn.params_mut(), &mut r);
    let samples = (0..2)
        .map(|_| {
            Ok(Sample {
                seq: tokens(&mut r, s.positions, s.vocab)?,
                sources: sources(&mut r, s.sources, s.positions, s.vocab),
                domain: 0,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let noise = vec![MetricNoise::none(s.sources); batch.len()];
    let selection = SelectionConfig::default();
    let objective = ObjectiveConfig::default();
    let graph = Graph {
        model: &lm,
        asn: &asn,
        selection: &selection,
        fusion: FusionMethod::Weighted,
        objective: &objective,
    };
    let fwd = forward_batch(&graph, &batch, &noise, None)?;
    let forced: Vec<Vec<usize>> = fwd
        .samples
        .iter()
        .map(|f| f.selection.as_ref().map(|c| c.result().selected.clone()).unwrap_or_default())
        .collect();
    let grads = backward_total(&graph, &batch, &fwd)?;
    let mut analytic = grads.lm;
    analytic.extend(grads.asn)?;
    let analytic = perturbed(analytic, inject);

    let mut joint = lm.params().clone();
    joint.extend(asn.params().clone())?;
    let numeric = finite_diff_grad(
        |p| {
            let run = || -> Result<f64, CliError> {
                let model = TinyLM::from_params(p.subset("lm."))?;
                let a = AsnParams::from_params(p.subset("asn."), s.sources, s.vocab)?;
                let g = Graph {
                    model: &model,
                    asn: &a,
                    ..graph
                };
                Ok(forward_batch(&g, &batch, &noise, Some(&forced))?.loss.total)
            };
            run().unwrap_or(f64::NAN)
        },
        &joint,
        STEP,
    )?;
    Ok(max_rel_error(&analytic, &numeric)?)
}

/// Runs every module over `seeds` seeds starting at `base_seed`.
/// `inject` names a module whose analytic gradient is deliberately skewed.
pub fn run_suite(base_seed: u64, seeds: usize, shape: Shape, inject: Option<&str>) -> Result<GradcheckReport, CliError> {
    if let Some(name) = inject {
        if !MODULES.contains(&name) {
            return Err(CliError::Usage(format!("unknown module `{name}`, expected one of {MODULES:?}")));
        }
    }
    if shape.vocab < 2 || shape.sources == 0 || shape.positions == 0 {
        return Err(CliError::Usage(format!("degenerate gradcheck shape {shape:?}")));
    }
    let mut modules = Vec::new();
    for name in MODULES {
        let bad = inject == Some(name);
        let mut worst = 0.0f64;
        for i in 0..seeds as u64 {
            let seed = base_seed.wrapping_add(i);
            let err = match name {
                "lm_backward" => check_lm(seed, shape, bad)?,
                "asn_backward" => check_asn(seed, shape, bad)?,
                "fuse_backward" => check_fuse(seed, shape, bad)?,
                _ => check_total(seed, shape, bad)?,
            };
            worst = worst.max(err);
        }
        modules.push(ModuleResult {
            name: name.to_string(),
            max_rel_error: worst,
            seeds,
            passed: worst <= TOLERANCE,
        });
    }
    let passed = modules.iter().all(|m| m.passed);
    Ok(GradcheckReport {
        modules,
        tolerance: TOLERANCE,
        passed,
    })
}
