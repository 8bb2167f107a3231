//! Training loop: per-sample selection, fusion, loss, shared AdamW update.

mod checkpoint;
mod optim;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use optim::{adamw_update, clip_grad_norm, cosine_lr, AdamWConfig, OptimState};

use crate::error::{FuseError, Result};
use crate::fusion::FusionMethod;
use crate::numcore::{LmDims, ParamSet, TinyLM};
use crate::objective::{backward_total, forward_batch, Graph, LossBreakdown, ObjectiveConfig, ObjectiveMode, Sample};
use crate::rng;
use crate::selector::{asn_init_xavier, AsnParams, MetricNoise, SelectionConfig, SelectionResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_ratio: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub lm: LmDims,
    pub optimizer: AdamWConfig,
    pub objective: ObjectiveConfig,
    pub selection: SelectionConfig,
    pub fusion: FusionMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 3e-3,
            warmup_ratio: 0.008,
            steps: 500,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 0,
            lm: LmDims::default(),
            optimizer: AdamWConfig::default(),
            objective: ObjectiveConfig::default(),
            selection: SelectionConfig::default(),
            fusion: FusionMethod::Weighted,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for billion-parameter targets.
    pub const LARGE_MODEL_MAX_LR: f64 = 3e-5;

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(FuseError::Config(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if !(self.max_lr.is_finite() && self.max_lr >= 0.0) {
            return Err(FuseError::Config("max_lr must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(FuseError::Config("batch_size must be >= 1".into()));
        }
        self.lm.validate()?;
        self.optimizer.validate()?;
        self.objective.validate()?;
        self.selection.validate()
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    /// Whether any loss term reaches the selection network.
    pub fn asn_trainable(&self) -> bool {
        let o = &self.objective;
        o.mode == ObjectiveMode::Adaptive
            && (o.lambda_feed > 0.0 || (o.lambda_fuse > 0.0 && self.fusion.uses_weights()))
    }
}

/// Target model plus selection network.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub lm: TinyLM,
    pub asn: AsnParams,
}

impl Models {
    pub fn init(config: &TrainConfig, sources: usize) -> Result<Self> {
        let lm = TinyLM::init(config.lm, &mut rng::stream(config.seed, "init.lm", &[]))?;
        let asn = asn_init_xavier(
            sources,
            config.lm.vocab,
            config.selection.layers,
            &mut rng::stream(config.seed, "init.asn", &[]),
        )?;
        Ok(Self { lm, asn })
    }

    pub fn joint_params(&self) -> ParamSet {
        let mut all = self.lm.params().clone();
        all.extend(self.asn.params().clone()).expect("disjoint names");
        all
    }

    fn from_joint(all: &ParamSet, sources: usize, vocab: usize) -> Result<Self> {
        Ok(Self {
            lm: TinyLM::from_params(all.subset("lm."))?,
            asn: AsnParams::from_params(all.subset("asn."), sources, vocab)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub domain: usize,
    pub p: Vec<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub importance: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub traces: Vec<SampleTrace>,
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    step: u64,
    l_lm: f64,
    l_fuse: f64,
    l_feed: f64,
    total: f64,
    importance: &'a [f64],
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: u64,
    samples: &'a [SampleTrace],
}

/// One line of the selection trace file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    pub samples: Vec<SampleTrace>,
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_lm: f64,
    pub l_fuse: f64,
    pub l_feed: f64,
    pub total: f64,
    pub importance: Vec<f64>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| FuseError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| FuseError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| FuseError::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

pub fn read_traces(path: &Path) -> Result<Vec<StepTrace>> {
    read_jsonl(path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    read_jsonl(path)
}

/// Indices of the samples making up the batch at `step`.
pub fn batch_indices(seed: u64, step: u64, data_len: usize, batch: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "data.batch", &[step]);
    rand::seq::index::sample(&mut r, data_len, batch.min(data_len)).into_vec()
}

fn noise_for(config: &TrainConfig, step: u64, count: usize, m: usize) -> Vec<MetricNoise> {
    (0..count)
        .map(|b| {
            let mut r = rng::stream(config.seed, "selection.noise", &[step, b as u64]);
            MetricNoise::draw(&config.selection, m, &mut r)
        })
        .collect()
}

/// One update: selection, fusion, losses, backward, clip, AdamW.
pub fn train_step(
    batch: &[&Sample],
    models: &mut Models,
    state: &mut OptimState,
    config: &TrainConfig,
    step: u64,
) -> Result<StepRecord> {
    let m = models.asn.sources();
    let noise = noise_for(config, step, batch.len(), m);
    let graph = Graph {
        model: &models.lm,
        asn: &models.asn,
        selection: &config.selection,
        fusion: config.fusion,
        objective: &config.objective,
    };
    let fwd = forward_batch(&graph, batch, &noise, None)?;
    if !fwd.loss.is_finite() {
        return Err(FuseError::NumericAbort {
            step,
            reason: format!("non-finite loss {:?}", fwd.loss),
        });
    }
    let grads = backward_total(&graph, batch, &fwd)?;
    let mut all = grads.lm;
    if config.asn_trainable() {
        all.extend(grads.asn)?;
    }
    let grad_norm = clip_grad_norm(&mut all, config.optimizer.clip_norm).map_err(|e| FuseError::NumericAbort {
        step,
        reason: e.to_string(),
    })?;
    let lr = cosine_lr(step, config.steps, config.max_lr, config.warmup_ratio);
    let mut params = models.joint_params();
    adamw_update(&mut params, &all, state, lr)?;
    if !params.all_finite() {
        return Err(FuseError::NumericAbort {
            step,
            reason: "parameters became non-finite".into(),
        });
    }
    *models = Models::from_joint(&params, m, config.lm.vocab)?;

    let traces = batch
        .iter()
        .zip(fwd.samples.iter())
        .filter_map(|(s, sf)| {
            sf.selection.as_ref().map(|c| {
                let r: &SelectionResult = c.result();
                SampleTrace {
                    domain: s.domain,
                    p: r.probs.clone(),
                    selected: r.selected.clone(),
                    weights: r.weights.clone(),
                }
            })
        })
        .collect();
    Ok(StepRecord {
        step,
        loss: fwd.loss,
        importance: fwd.importance.0,
        lr,
        grad_norm,
        traces,
    })
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRACE_FILE: &str = "selection_trace.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.fxck";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.fxck")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Models,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

fn make_checkpoint(config: &TrainConfig, models: &Models, state: &OptimState, step: u64) -> Checkpoint {
    Checkpoint {
        step,
        config_hash: config.hash(),
        params: models.joint_params(),
        adam_m: state.m.clone(),
        adam_v: state.v.clone(),
    }
}

/// Restores models and optimizer from a checkpoint written by the same config.
pub fn restore(config: &TrainConfig, ck: &Checkpoint, sources: usize) -> Result<(Models, OptimState)> {
    if ck.config_hash != config.hash() {
        return Err(FuseError::Config(format!(
            "checkpoint was written by a different config ({})",
            ck.config_hash_hex()
        )));
    }
    let models = Models::from_joint(&ck.params, sources, config.lm.vocab)?;
    let state = OptimState {
        hyper: config.optimizer,
        m: ck.adam_m.clone(),
        v: ck.adam_v.clone(),
        step: ck.step,
    };
    Ok((models, state))
}

/// Keeps the first `keep` lines of a JSONL file (resume support).
fn truncate_lines(path: &Path, keep: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| FuseError::io(path, e))?;
    BufReader::new(f)
        .lines()
        .take(keep as usize)
        .map(|l| l.map_err(|e| FuseError::io(path, e)))
        .collect()
}

fn open_jsonl(path: &Path, keep: &[String]) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| FuseError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for line in keep {
        writeln!(w, "{line}").map_err(|e| FuseError::io(path, e))?;
    }
    Ok(w)
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(w, "{line}").map_err(|e| FuseError::io(path, e))
}

/// Runs `config.steps` updates over `data`, writing metrics, selection
/// traces and checkpoints into `out`. With `resume`, continues from that
/// checkpoint and rewrites the logs so they match an uninterrupted run.
pub fn run_training(
    config: &TrainConfig,
    data: &[Sample],
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = data
        .first()
        .ok_or_else(|| FuseError::Usage("training data is empty".into()))?;
    let m = first.sources.len();
    if let Some(s) = data.iter().find(|s| s.seq.is_empty()) {
        return Err(FuseError::Usage(format!("empty sequence in domain {}", s.domain)));
    }
    std::fs::create_dir_all(out).map_err(|e| FuseError::io(out, e))?;

    let (mut models, mut state) = match resume {
        Some(path) => restore(config, &Checkpoint::read(path)?, m)?,
        None => {
            let models = Models::init(config, m)?;
            let state = OptimState::new(&models.joint_params(), config.optimizer);
            (models, state)
        }
    };
    let start = state.step;
    if start > config.steps {
        return Err(FuseError::Usage(format!(
            "checkpoint step {start} is past the configured {} steps",
            config.steps
        )));
    }

    let metrics_path = out.join(METRICS_FILE);
    let trace_path = out.join(TRACE_FILE);
    let keep_metrics = if resume.is_some() { truncate_lines(&metrics_path, start)? } else { Vec::new() };
    let keep_traces = if resume.is_some() { truncate_lines(&trace_path, start)? } else { Vec::new() };
    let mut metrics = open_jsonl(&metrics_path, &keep_metrics)?;
    let adaptive = config.objective.mode == ObjectiveMode::Adaptive;
    let mut traces = if adaptive { Some(open_jsonl(&trace_path, &keep_traces)?) } else { None };

    let mut records = Vec::with_capacity((config.steps - start) as usize);
    for step in start..config.steps {
        let idx = batch_indices(config.seed, step, data.len(), config.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let rec = match train_step(&batch, &mut models, &mut state, config, step) {
            Ok(r) => r,
            Err(e @ FuseError::NumericAbort { .. }) => {
                let dump = out.join(format!("abort_step_{step:06}.fxck"));
                make_checkpoint(config, &models, &state, step).write(&dump)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        write_line(
            &mut metrics,
            &metrics_path,
            &MetricsLine {
                step,
                l_lm: rec.loss.l_lm,
                l_fuse: rec.loss.l_fuse,
                l_feed: rec.loss.l_feed,
                total: rec.loss.total,
                importance: &rec.importance,
            },
        )?;
        if let Some(w) = traces.as_mut() {
            write_line(w, &trace_path, &TraceLine { step, samples: &rec.traces })?;
        }
        records.push(rec);
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
            make_checkpoint(config, &models, &state, done).write(&out.join(checkpoint_name(done)))?;
        }
    }
    metrics.flush().map_err(|e| FuseError::io(&metrics_path, e))?;
    if let Some(w) = traces.as_mut() {
        w.flush().map_err(|e| FuseError::io(&trace_path, e))?;
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    make_checkpoint(config, &models, &state, config.steps).write(&final_checkpoint)?;
    Ok(TrainOutcome {
        models,
        records,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{ProbMatrix, TokenSeq};
    use crate::selector::SelectionCount;
    use ndarray::Array2;
    use rand::Rng;

    fn toy_data(seed: u64, count: usize, v: usize, m: usize, n: usize) -> Vec<Sample> {
        let mut r = rng::stream(seed, "test.trainer", &[]);
        (0..count)
            .map(|i| {
                let ids: Vec<usize> = (0..n).map(|_| r.random_range(1..v)).collect();
                let sources = (0..m)
                    .map(|_| {
                        ProbMatrix::normalized(Array2::from_shape_fn((n, v), |_| r.random_range(0.05..1.0f64)))
                            .unwrap()
                    })
                    .collect();
                Sample {
                    seq: TokenSeq::new(ids, v).unwrap(),
                    sources,
                    domain: i % 3,
                }
            })
            .collect()
    }

    fn small_config(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            lm: LmDims {
                vocab: 8,
                context: 2,
                embed: 4,
                hidden: 6,
            },
            ..Default::default()
        }
    }

    #[test]
    fn plain_lm_training_leaves_selector_untouched() {
        let data = toy_data(1, 8, 8, 3, 5);
        let mut config = small_config(3);
        config.objective.lambda_fuse = 0.0;
        config.objective.lambda_feed = 0.0;
        assert!(!config.asn_trainable());
        let mut models = Models::init(&config, 3).unwrap();
        let before = models.asn.clone();
        let lm_before = models.lm.clone();
        let mut state = OptimState::new(&models.joint_params(), config.optimizer);
        let batch: Vec<&Sample> = data.iter().take(4).collect();
        train_step(&batch, &mut models, &mut state, &config, 1).unwrap();
        assert_eq!(models.asn, before);
        assert_ne!(models.lm, lm_before);
    }

    #[test]
    fn small_step_descends() {
        let mut passes = 0;
        for seed in 0..20 {
            let data = toy_data(100 + seed, 4, 8, 3, 5);
            let mut config = small_config(10);
            config.seed = seed;
            config.max_lr = 1e-3;
            config.warmup_ratio = 0.0;
            config.optimizer.weight_decay = 0.0;
            config.selection.count = SelectionCount::All;
            let mut models = Models::init(&config, 3).unwrap();
            let mut state = OptimState::new(&models.joint_params(), config.optimizer);
            let batch: Vec<&Sample> = data.iter().collect();
            let before = train_step(&batch, &mut models, &mut state, &config, 0).unwrap().loss.total;
            let after = train_step(&batch, &mut models, &mut state, &config, 0).unwrap().loss.total;
            if after < before {
                passes += 1;
            }
        }
        assert!(passes >= 18, "{passes}/20");
    }

    #[test]
    fn replay_and_resume_are_bit_identical() {
        let data = toy_data(2, 12, 8, 3, 5);
        let mut config = small_config(10);
        config.checkpoint_every = 4;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_training(&config, &data, a.path(), None).unwrap();
        let rb = run_training(&config, &data, b.path(), None).unwrap();
        let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
        for f in [METRICS_FILE, TRACE_FILE, FINAL_CHECKPOINT, "step_000004.fxck", "step_000008.fxck"] {
            assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
        }
        assert_eq!(
            ra.records.iter().map(|r| r.loss).collect::<Vec<_>>(),
            rb.records.iter().map(|r| r.loss).collect::<Vec<_>>()
        );

        // resume into a copy of the logs that already ran past the checkpoint
        let c = tempfile::tempdir().unwrap();
        for f in [METRICS_FILE, TRACE_FILE] {
            std::fs::copy(a.path().join(f), c.path().join(f)).unwrap();
        }
        run_training(&config, &data, c.path(), Some(&a.path().join("step_000004.fxck"))).unwrap();
        for f in [METRICS_FILE, TRACE_FILE, FINAL_CHECKPOINT] {
            assert_eq!(read(a.path(), f), read(c.path(), f), "{f}");
        }

        let ck = Checkpoint::read(&a.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), read(a.path(), FINAL_CHECKPOINT));
        assert_eq!(ck.step, 10);
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let data = toy_data(3, 4, 8, 3, 5);
        let config = small_config(0);
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&config, &data, dir.path(), None).unwrap();
        assert!(out.records.is_empty());
        let ck = Checkpoint::read(&out.final_checkpoint).unwrap();
        assert_eq!(ck.step, 0);
        assert_eq!(ck.params, Models::init(&config, 3).unwrap().joint_params());
        assert_eq!(std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
    }

    #[test]
    fn metrics_lines_have_expected_keys() {
        let data = toy_data(4, 6, 8, 3, 5);
        let dir = tempfile::tempdir().unwrap();
        run_training(&small_config(2), &data, dir.path(), None).unwrap();
        let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["importance", "l_feed", "l_fuse", "l_lm", "step", "total"]);
        assert_eq!(first["importance"].as_array().unwrap().len(), 3);
        let trace: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap().lines().next().unwrap().to_string())
                .unwrap();
        assert_eq!(trace["samples"].as_array().unwrap().len(), 4);
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 2);
        assert_eq!(read_traces(&dir.path().join(TRACE_FILE)).unwrap()[1].step, 1);
    }

    #[test]
    fn resume_rejects_other_config() {
        let data = toy_data(5, 4, 8, 3, 5);
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&small_config(2), &data, dir.path(), None).unwrap();
        let other = small_config(3);
        assert!(matches!(
            run_training(&other, &data, dir.path(), Some(&out.final_checkpoint)),
            Err(FuseError::Config(_))
        ));
    }
}
