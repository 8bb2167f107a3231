use std::path::{Path, PathBuf};

use clap::ValueEnum;
use fusex_core::align::{vocab_map_min_ed, Vocab};
use fusex_core::objective::ObjectiveMode;
use fusex_core::synthbench::{eval_report, Benchmark};
use fusex_core::trainer::{read_metrics, read_traces, run_training, Checkpoint};
use fusex_core::TinyLM;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::experiment::{self, Axis, ALL_AXES};
use crate::gradcheck::{self, Shape};
use crate::{AblateArgs, AlignArgs, EvalArgs, GradcheckArgs, TrainArgs};

pub const CONFIG_ECHO: &str = "config.toml";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ALIGNMENT_CSV: &str = "alignment.csv";

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_bench(cfg: &RunConfig, flag: Option<&PathBuf>) -> Result<Benchmark, CliError> {
    let path = match flag {
        Some(p) => p.as_path(),
        None => cfg.manifest_path()?,
    };
    let bench = Benchmark::load(path)?;
    if bench.config.vocab != cfg.lm.vocab {
        return Err(CliError::Config(format!(
            "benchmark vocabulary {} differs from lm.vocab {}",
            bench.config.vocab, cfg.lm.vocab
        )));
    }
    Ok(bench)
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes")
}

pub fn generate(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let bench = Benchmark::generate(&cfg.bench, cfg.seed)?;
    mkdir(&cfg.out)?;
    let manifest = bench.write(&cfg.out)?;
    Ok(pretty(&json!({
        "manifest": manifest,
        "domains": bench.domains.len(),
        "sources": bench.num_sources(),
        "train": bench.train.len(),
        "eval": bench.eval.len(),
    })))
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<String, CliError> {
    cfg.validate()?;
    let bench = load_bench(cfg, args.manifest.as_ref())?;
    let mut tc = cfg.train_config();
    if args.baseline {
        tc.objective.mode = ObjectiveMode::FuseAllBaseline;
    }
    mkdir(&cfg.out)?;
    let echo = cfg.out.join(CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_toml()).map_err(|e| CliError::io(&echo, e))?;
    let outcome = run_training(&tc, &bench.train, &cfg.out, args.resume.as_deref())?;
    let last = outcome.records.last().map(|r| r.loss.total);
    Ok(pretty(&json!({
        "checkpoint": outcome.final_checkpoint,
        "steps": tc.steps,
        "final_total_loss": last,
    })))
}

fn load_lm(path: &Path) -> Result<TinyLM, CliError> {
    let ck = Checkpoint::read(path)?;
    Ok(TinyLM::from_params(ck.params.subset("lm."))?)
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<String, CliError> {
    let bench = load_bench(cfg, args.manifest.as_ref())?;
    let fused = load_lm(&args.fused)?;
    let baseline = load_lm(&args.baseline)?;
    let traces = args.traces.as_deref().map(read_traces).transpose()?;
    let importance: Vec<Vec<f64>> = match &args.metrics {
        Some(p) => read_metrics(p)?.into_iter().map(|m| m.importance).collect(),
        None => Vec::new(),
    };
    let report = eval_report(
        &fused,
        &baseline,
        &bench.eval,
        bench.domains.len(),
        traces.as_deref(),
        &importance,
        bench.num_sources(),
    )?;
    mkdir(&cfg.out)?;
    report.write(&cfg.out.join(EVAL_JSON), &cfg.out.join(EVAL_CSV))?;
    Ok(pretty(&json!({
        "ppl_fused": report.ppl_fused,
        "ppl_baseline": report.ppl_baseline,
        "degradation_rate": report.degradation_rate,
        "selection_histogram": report.selection_histogram,
        "partial": report.partial,
    })))
}

pub fn parse_axes(name: &str) -> Result<Vec<Axis>, CliError> {
    if name == "all" {
        return Ok(ALL_AXES.to_vec());
    }
    Axis::from_str(name, false).map(|a| vec![a]).map_err(|_| {
        let known: Vec<&str> = ALL_AXES.iter().map(|a| a.name()).collect();
        CliError::Usage(format!("unknown axis `{name}`; expected `all` or one of {known:?}"))
    })
}

pub fn ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<String, CliError> {
    let axes = parse_axes(&args.axis)?;
    cfg.validate()?;
    let bench = load_bench(cfg, args.manifest.as_ref())?;
    let mut tc = cfg.train_config();
    if let Some(steps) = args.steps {
        tc.steps = steps;
    }
    mkdir(&cfg.out)?;
    let rows = experiment::ablate(&tc, &axes, &bench, &cfg.out)?;
    let csv = cfg.out.join(ABLATION_CSV);
    experiment::write_ablation_csv(&rows, &csv)?;
    Ok(pretty(&json!({ "csv": csv, "runs": rows.len() })))
}

pub fn gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<String, CliError> {
    let shape = Shape {
        vocab: args.vocab,
        sources: args.sources,
        positions: args.positions,
    };
    let report = gradcheck::run_suite(cfg.seed, args.seeds, shape, args.inject_fault.as_deref())?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    if report.passed {
        Ok(text)
    } else {
        Err(CliError::GradcheckFailed {
            failed: report.failed(),
            report: text,
        })
    }
}

pub fn align(cfg: &RunConfig, args: &AlignArgs) -> Result<String, CliError> {
    let src = Vocab::read_file(&args.source)?;
    let tgt = Vocab::read_file(&args.target)?;
    let map = vocab_map_min_ed(&src, &tgt)?;
    let path = match &args.output {
        Some(p) => p.clone(),
        None => {
            mkdir(&cfg.out)?;
            cfg.out.join(ALIGNMENT_CSV)
        }
    };
    map.write_csv(&path)?;
    let exact = map.entries().filter(|&(_, _, d)| d == 0).count();
    Ok(pretty(&json!({ "csv": path, "tokens": map.source_len(), "exact": exact })))
}
