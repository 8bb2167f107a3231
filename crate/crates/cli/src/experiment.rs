//! Multi-run experiments over a generated benchmark: the paired
//! adaptive / baseline comparisons and the ablation grid.

use std::path::Path;

use fusex_core::fusion::FusionMethod;
use fusex_core::objective::{ObjectiveMode, Sample};
use fusex_core::selector::{AsnLayers, SelectionCount, SelectionMetric};
use fusex_core::synthbench::{cv2, degradation_rate, domain_perplexities, heldout_perplexity, selection_histogram, Benchmark};
use fusex_core::trainer::{run_training, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Training variants compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// The full objective as configured.
    Adaptive,
    /// Same, without the balance feedback term.
    NoFeedback,
    /// Plain continual training: ground-truth loss only.
    Continual,
    /// Every source fused with equal weight, no selection.
    FuseAll,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Adaptive => "adaptive",
            Variant::NoFeedback => "no_feedback",
            Variant::Continual => "continual",
            Variant::FuseAll => "fuse_all",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Adaptive => {}
            Variant::NoFeedback => c.objective.lambda_feed = 0.0,
            Variant::Continual => {
                c.objective.mode = ObjectiveMode::Adaptive;
                c.objective.lambda_fuse = 0.0;
                c.objective.lambda_feed = 0.0;
            }
            Variant::FuseAll => c.objective.mode = ObjectiveMode::FuseAllBaseline,
        }
        c
    }
}

pub fn train_variant(
    base: &TrainConfig,
    variant: Variant,
    bench: &Benchmark,
    out: &Path,
) -> Result<TrainOutcome, CliError> {
    Ok(run_training(&variant.apply(base), &bench.train, &out.join(variant.name()), None)?)
}

/// Steps in one pass over the training set.
pub fn epoch_steps(train_len: usize, batch: usize) -> usize {
    train_len.div_ceil(batch).max(1)
}

/// CV² of importance accumulated over the last epoch of a run.
pub fn final_epoch_cv2(outcome: &TrainOutcome, epoch: usize) -> Option<f64> {
    let m = outcome.records.first()?.importance.len();
    let mut acc = vec![0.0; m];
    for rec in outcome.records.iter().rev().take(epoch) {
        acc.iter_mut().zip(&rec.importance).for_each(|(a, b)| *a += b);
    }
    Some(cv2(&acc))
}

/// Share of selections that go to the planted source on its own domains,
/// measured by running the trained selection network on held-out samples.
pub fn planted_frequency(outcome: &TrainOutcome, config: &TrainConfig, bench: &Benchmark) -> Result<f64, CliError> {
    let planted = bench.config.planted_domains();
    let samples: Vec<&Sample> = bench.eval.iter().filter(|s| planted.contains(&s.domain)).collect();
    let hist = selection_histogram(&outcome.models.asn, &config.selection, &samples, config.seed)?;
    Ok(hist[bench.config.planted_source])
}

pub fn ppl(outcome: &TrainOutcome, bench: &Benchmark) -> Result<f64, CliError> {
    let all: Vec<&Sample> = bench.eval.iter().collect();
    Ok(heldout_perplexity(&outcome.models.lm, &all)?)
}

pub fn domain_ppl(outcome: &TrainOutcome, bench: &Benchmark) -> Result<Vec<f64>, CliError> {
    Ok(domain_perplexities(&outcome.models.lm, &bench.eval, bench.domains.len())?)
}

/// Everything the paired comparison reports for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub planted_frequency: f64,
    pub planted_frequency_no_feedback: f64,
    pub cv2_adaptive: f64,
    pub cv2_no_feedback: f64,
    pub ppl_adaptive: f64,
    pub ppl_continual: f64,
    pub ppl_fuse_all: f64,
    pub degradation_adaptive: f64,
    pub degradation_fuse_all: f64,
    pub seconds_adaptive: f64,
}

/// Trains all four variants on one freshly generated benchmark.
pub fn run_seed(base: &TrainConfig, bench: &Benchmark, out: &Path) -> Result<SeedSummary, CliError> {
    let t0 = std::time::Instant::now();
    let ad = train_variant(base, Variant::Adaptive, bench, out)?;
    let seconds_adaptive = t0.elapsed().as_secs_f64();
    let nf = train_variant(base, Variant::NoFeedback, bench, out)?;
    let ct = train_variant(base, Variant::Continual, bench, out)?;
    let fa = train_variant(base, Variant::FuseAll, bench, out)?;
    let epoch = epoch_steps(bench.train.len(), base.batch_size);
    let missing = || CliError::Usage("run recorded no steps".into());
    let ct_domains = domain_ppl(&ct, bench)?;
    Ok(SeedSummary {
        seed: base.seed,
        planted_frequency: planted_frequency(&ad, base, bench)?,
        planted_frequency_no_feedback: planted_frequency(&nf, &Variant::NoFeedback.apply(base), bench)?,
        cv2_adaptive: final_epoch_cv2(&ad, epoch).ok_or_else(missing)?,
        cv2_no_feedback: final_epoch_cv2(&nf, epoch).ok_or_else(missing)?,
        ppl_adaptive: ppl(&ad, bench)?,
        ppl_continual: ppl(&ct, bench)?,
        ppl_fuse_all: ppl(&fa, bench)?,
        degradation_adaptive: degradation_rate(&domain_ppl(&ad, bench)?, &ct_domains)?,
        degradation_fuse_all: degradation_rate(&domain_ppl(&fa, bench)?, &ct_domains)?,
        seconds_adaptive,
    })
}

/// Ablation axes and the values each one sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    SelectionCount,
    SelectionMetric,
    Layers,
    Fusion,
    Threshold,
    Feedback,
}

pub const ALL_AXES: [Axis; 6] = [
    Axis::SelectionCount,
    Axis::SelectionMetric,
    Axis::Layers,
    Axis::Fusion,
    Axis::Threshold,
    Axis::Feedback,
];

pub const THRESHOLD_GRID: [f64; 3] = [0.2, 0.15, 0.12];

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::SelectionCount => "selection_count",
            Axis::SelectionMetric => "selection_metric",
            Axis::Layers => "layers",
            Axis::Fusion => "fusion",
            Axis::Threshold => "threshold",
            Axis::Feedback => "feedback",
        }
    }

    pub fn values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::SelectionCount => &["top2", "adaptive", "all"],
            Axis::SelectionMetric => &["softmax", "gumbel", "noise"],
            Axis::Layers => &["one_linear", "three_linear"],
            Axis::Fusion => &["average", "maximum", "weighted_without_selection", "weighted"],
            Axis::Threshold => return THRESHOLD_GRID.iter().map(|t| t.to_string()).collect(),
            Axis::Feedback => &["off", "on"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The base config with one axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig, CliError> {
        let mut c = base.clone();
        let bad = || CliError::Usage(format!("unknown value `{value}` for axis {}", self.name()));
        match (self, value) {
            (Axis::SelectionCount, "top2") => {
                c.selection.count = SelectionCount::TopK;
                c.selection.top_k = 2;
            }
            (Axis::SelectionCount, "adaptive") => c.selection.count = SelectionCount::Adaptive,
            (Axis::SelectionCount, "all") => c.selection.count = SelectionCount::All,
            (Axis::SelectionMetric, "softmax") => c.selection.metric = SelectionMetric::Softmax,
            (Axis::SelectionMetric, "gumbel") => c.selection.metric = SelectionMetric::Gumbel,
            (Axis::SelectionMetric, "noise") => c.selection.metric = SelectionMetric::Noisy,
            (Axis::Layers, "one_linear") => c.selection.layers = AsnLayers::OneLinear,
            (Axis::Layers, "three_linear") => c.selection.layers = AsnLayers::ThreeLinear,
            (Axis::Fusion, "average") => c.fusion = FusionMethod::Average,
            (Axis::Fusion, "maximum") => c.fusion = FusionMethod::Maximum,
            (Axis::Fusion, "weighted_without_selection") => c.fusion = FusionMethod::WeightedWithoutSelection,
            (Axis::Fusion, "weighted") => c.fusion = FusionMethod::Weighted,
            (Axis::Threshold, t) => c.selection.threshold = t.parse().map_err(|_| bad())?,
            (Axis::Feedback, "off") => c.objective.lambda_feed = 0.0,
            (Axis::Feedback, "on") => {}
            _ => return Err(bad()),
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub steps: u64,
    pub heldout_ppl: f64,
    pub ct_ppl: f64,
    pub degradation_rate: f64,
}

/// Trains one run per axis value, plus a shared continual-training
/// reference, and returns one row per run.
pub fn ablate(base: &TrainConfig, axes: &[Axis], bench: &Benchmark, out: &Path) -> Result<Vec<AblationRow>, CliError> {
    let ct = train_variant(base, Variant::Continual, bench, out)?;
    let ct_ppl = ppl(&ct, bench)?;
    let ct_domains = domain_ppl(&ct, bench)?;
    let mut rows = Vec::new();
    for &axis in axes {
        for value in axis.values() {
            let cfg = axis.apply(base, &value)?;
            let dir = out.join(axis.name()).join(&value);
            let run = run_training(&cfg, &bench.train, &dir, None)?;
            rows.push(AblationRow {
                axis: axis.name().to_string(),
                value,
                seed: cfg.seed,
                steps: cfg.steps,
                heldout_ppl: ppl(&run, bench)?,
                ct_ppl,
                degradation_rate: degradation_rate(&domain_ppl(&run, bench)?, &ct_domains)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::io(path, std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
