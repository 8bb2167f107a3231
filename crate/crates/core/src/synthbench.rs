//! Planted-expert synthetic benchmark.
//!
//! Each domain is a sparse Markov chain over content tokens `1..V`; row 0 of
//! the transition matrix is the start distribution (the pad id 0 is never
//! emitted). Source models are mixtures of the true next-token rows with
//! uniform noise, with per-domain quality `q`:
//!
//! ```text
//! row n = q(1-α) · T[t_{n-1}] + (1 - q(1-α)) · uniform        (t_{-1} = pad)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{FuseError, Result};
use crate::numcore::{cross_entropy_rows, lm_forward, OneHotLabels, ProbMatrix, TinyLM, TokenSeq, PAD_ID};
use crate::objective::Sample;
use crate::rng;
use crate::selector::{select, AsnParams, MetricNoise, SelectionConfig};
use crate::trainer::StepTrace;

const MAX_RETRIES: u64 = 100;
const STATIONARY_ITERS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub domains: usize,
    pub vocab: usize,
    pub sources: usize,
    pub seq_len: usize,
    pub train_per_domain: usize,
    pub eval_per_domain: usize,
    /// Nonzero successors per transition row.
    pub successors: usize,
    pub alpha: f64,
    pub planted_source: usize,
    pub planted_quality: f64,
    pub expert_quality: f64,
    pub base_quality: f64,
    pub min_tv: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            domains: 12,
            vocab: 32,
            sources: 4,
            seq_len: 32,
            train_per_domain: 8,
            eval_per_domain: 16,
            successors: 2,
            alpha: 0.05,
            planted_source: 3,
            planted_quality: 0.9,
            expert_quality: 0.5,
            base_quality: 0.2,
            min_tv: 0.2,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(FuseError::Config(m));
        if self.domains < 2 {
            return fail(format!("need at least 2 domains, got {}", self.domains));
        }
        if self.vocab < 4 {
            return fail(format!("vocabulary must be >= 4, got {}", self.vocab));
        }
        if self.sources < 2 || self.planted_source >= self.sources {
            return fail("need >= 2 sources and a planted source index below the count".into());
        }
        if self.seq_len == 0 || self.train_per_domain == 0 || self.eval_per_domain == 0 {
            return fail("sequence length and sample counts must be >= 1".into());
        }
        if self.successors == 0 || self.successors >= self.vocab {
            return fail(format!("successors must lie in 1..{}", self.vocab));
        }
        let q = [self.planted_quality, self.expert_quality, self.base_quality];
        if !(0.0..=1.0).contains(&self.alpha) || q.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return fail("alpha and qualities must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Domains on which the planted source is an expert (first half).
    pub fn planted_domains(&self) -> Vec<usize> {
        (0..self.domains / 2).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    /// V×V; row 0 is the start distribution, column 0 is always zero.
    pub transitions: Vec<Vec<f64>>,
    pub seq_len: usize,
    pub samples: usize,
}

impl DomainSpec {
    pub fn vocab(&self) -> usize {
        self.transitions.len()
    }

    pub fn matrix(&self) -> Array2<f64> {
        let v = self.vocab();
        Array2::from_shape_fn((v, v), |(i, j)| self.transitions[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab();
        for (i, row) in self.transitions.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != v || (sum - 1.0).abs() > 1e-9 || row.iter().any(|x| !(*x >= 0.0)) {
                return Err(FuseError::InvalidDistribution(format!(
                    "domain {} transition row {i} is not a distribution",
                    self.id
                )));
            }
            if row[PAD_ID] != 0.0 {
                return Err(FuseError::InvalidDistribution(format!(
                    "domain {} can emit the pad id",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Samples `len` tokens, starting from the pad context.
    pub fn sample_tokens<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut prev = PAD_ID;
        for _ in 0..len {
            let row = &self.transitions[prev];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = row.iter().rposition(|&x| x > 0.0).expect("row has mass");
            for (t, &p) in row.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    next = t;
                    break;
                }
            }
            out.push(next);
            prev = next;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceModelSpec {
    pub id: usize,
    /// Quality per domain, 1 = oracle, 0 = uniform.
    pub quality: Vec<f64>,
    pub alpha: f64,
}

fn random_row<R: Rng + ?Sized>(v: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let mut row = vec![0.0; v];
    let picks = sample_indices(rng, v - 1, k);
    let weights: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = weights.iter().sum();
    for (i, w) in picks.iter().zip(&weights) {
        row[i + 1] = w / total;
    }
    row
}

/// Long-run token distribution from the start row: Cesàro average of
/// `start · T^k`, which also settles for periodic chains.
pub fn stationary(domain: &DomainSpec) -> Vec<f64> {
    let v = domain.vocab();
    let mut cur = domain.transitions[PAD_ID].clone();
    let mut acc = vec![0.0; v];
    for _ in 0..STATIONARY_ITERS {
        acc.iter_mut().zip(&cur).for_each(|(a, c)| *a += c);
        let mut next = vec![0.0; v];
        for (s, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (t, &p) in domain.transitions[s].iter().enumerate() {
                next[t] += mass * p;
            }
        }
        cur = next;
    }
    acc.iter().map(|a| a / STATIONARY_ITERS as f64).collect()
}

/// Total variation between the stationary bigram distributions
/// `π(s)·T(s, t)` of two domains.
pub fn domain_tv(a: &DomainSpec, b: &DomainSpec) -> f64 {
    let (pa, pb) = (stationary(a), stationary(b));
    let mut sum = 0.0;
    for s in 0..a.vocab() {
        for t in 0..a.vocab() {
            sum += (pa[s] * a.transitions[s][t] - pb[s] * b.transitions[s][t]).abs();
        }
    }
    0.5 * sum
}

/// `D` random sparse chains, each regenerated until it is at least
/// `min_tv` away from every earlier one.
pub fn gen_domains(config: &BenchConfig, seed: u64) -> Result<Vec<DomainSpec>> {
    config.validate()?;
    let v = config.vocab;
    let mut out: Vec<DomainSpec> = Vec::with_capacity(config.domains);
    for d in 0..config.domains {
        let mut accepted = None;
        for attempt in 0..MAX_RETRIES {
            let mut r = rng::stream(seed, "bench.domain", &[d as u64, attempt]);
            let transitions = (0..v).map(|_| random_row(v, config.successors, &mut r)).collect();
            let cand = DomainSpec {
                id: d,
                transitions,
                seq_len: config.seq_len,
                samples: config.train_per_domain,
            };
            if out.iter().all(|o| domain_tv(o, &cand) >= config.min_tv) {
                accepted = Some(cand);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            FuseError::Generation(format!(
                "domain {d}: no chain {} away from the others after {MAX_RETRIES} tries",
                config.min_tv
            ))
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeq {
    pub domain: usize,
    pub ids: Vec<usize>,
}

/// `count` sequences per domain, domain-major order.
pub fn gen_corpus(domains: &[DomainSpec], count: usize, split: Split, seed: u64) -> Vec<LabeledSeq> {
    let mut out = Vec::with_capacity(domains.len() * count);
    for d in domains {
        for i in 0..count {
            let mut r = rng::stream(seed, "bench.corpus", &[split.tag(), d.id as u64, i as u64]);
            out.push(LabeledSeq {
                domain: d.id,
                ids: d.sample_tokens(d.seq_len, &mut r),
            });
        }
    }
    out
}

pub fn default_sources(config: &BenchConfig) -> Vec<SourceModelSpec> {
    let planted = config.planted_domains();
    let rest: Vec<usize> = (config.domains / 2..config.domains).collect();
    let others: Vec<usize> = (0..config.sources).filter(|&j| j != config.planted_source).collect();
    let per = rest.len().div_ceil(others.len()).max(1);
    (0..config.sources)
        .map(|j| {
            let mut quality = vec![config.base_quality; config.domains];
            if j == config.planted_source {
                planted.iter().for_each(|&d| quality[d] = config.planted_quality);
            } else {
                let rank = others.iter().position(|&o| o == j).expect("non-planted");
                for &d in rest.iter().skip(rank * per).take(per) {
                    quality[d] = config.expert_quality;
                }
            }
            SourceModelSpec {
                id: j,
                quality,
                alpha: config.alpha,
            }
        })
        .collect()
}

pub fn gen_source_matrices(spec: &SourceModelSpec, seq: &TokenSeq, domain: &DomainSpec) -> Result<ProbMatrix> {
    let v = domain.vocab();
    let q = *spec
        .quality
        .get(domain.id)
        .ok_or_else(|| FuseError::Usage(format!("source {} has no quality for domain {}", spec.id, domain.id)))?;
    if let Some(&id) = seq.ids().iter().find(|&&id| id >= v) {
        return Err(FuseError::Vocabulary { id, vocab: v });
    }
    let keep = q * (1.0 - spec.alpha);
    let uniform = 1.0 / v as f64;
    let mut out = Array2::zeros((seq.len(), v));
    let mut prev = PAD_ID;
    for (n, &tok) in seq.ids().iter().enumerate() {
        for (t, &p) in domain.transitions[prev].iter().enumerate() {
            out[[n, t]] = keep * p + (1.0 - keep) * uniform;
        }
        prev = tok;
    }
    ProbMatrix::new(out)
}

/// A generated benchmark held in memory.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchConfig,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub sources: Vec<SourceModelSpec>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn build_samples(
    corpus: &[LabeledSeq],
    domains: &[DomainSpec],
    sources: &[SourceModelSpec],
    vocab: usize,
) -> Result<Vec<Sample>> {
    corpus
        .iter()
        .map(|c| {
            let seq = TokenSeq::new(c.ids.clone(), vocab)?;
            let mats = sources
                .iter()
                .map(|s| gen_source_matrices(s, &seq, &domains[c.domain]))
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                seq,
                sources: mats,
                domain: c.domain,
            })
        })
        .collect()
}

impl Benchmark {
    pub fn generate(config: &BenchConfig, seed: u64) -> Result<Self> {
        let domains = gen_domains(config, seed)?;
        let sources = default_sources(config);
        let train_c = gen_corpus(&domains, config.train_per_domain, Split::Train, seed);
        let eval_c = gen_corpus(&domains, config.eval_per_domain, Split::Eval, seed);
        Ok(Self {
            train: build_samples(&train_c, &domains, &sources, config.vocab)?,
            eval: build_samples(&eval_c, &domains, &sources, config.vocab)?,
            config: config.clone(),
            seed,
            domains,
            sources,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    /// Writes corpora, stacked `.pdm` matrices and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let pdm_dir = dir.join("pdm");
        std::fs::create_dir_all(&pdm_dir).map_err(|e| FuseError::io(&pdm_dir, e))?;
        let mut files = Vec::new();
        let mut corpora = BTreeMap::new();
        for (split, samples) in [(Split::Train, &self.train), (Split::Eval, &self.eval)] {
            let corpus: Vec<LabeledSeq> = samples
                .iter()
                .map(|s| LabeledSeq {
                    domain: s.domain,
                    ids: s.seq.ids().to_vec(),
                })
                .collect();
            let name = format!("corpus_{}.json", split.name());
            let path = dir.join(&name);
            write_json(&path, &corpus)?;
            corpora.insert(split, name);
            for d in &self.domains {
                let rows: Vec<&Sample> = samples.iter().filter(|s| s.domain == d.id).collect();
                for j in 0..self.num_sources() {
                    let parts: Vec<ProbMatrix> = rows.iter().map(|s| s.sources[j].clone()).collect();
                    let rel = format!("pdm/{}_d{:02}_s{}.pdm", split.name(), d.id, j);
                    ProbMatrix::vstack(&parts)?.write_pdm(dir.join(&rel))?;
                    files.push(PdmEntry {
                        split,
                        domain: d.id,
                        source: j,
                        sequences: rows.len(),
                        path: rel,
                    });
                }
            }
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            seed: self.seed,
            config: self.config.clone(),
            domains: self.domains.clone(),
            sources: self.sources.clone(),
            corpora,
            matrices: files,
        };
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, &manifest)?;
        Ok(path)
    }

    /// Reads a benchmark back from its manifest; matrices come from the
    /// `.pdm` files, not regenerated.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| FuseError::io(manifest_path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| FuseError::format(manifest_path, e.to_string()))?;
        m.validate(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut splits = BTreeMap::new();
        for split in [Split::Train, Split::Eval] {
            let name = m
                .corpora
                .get(&split)
                .ok_or_else(|| FuseError::format(manifest_path, format!("no {} corpus", split.name())))?;
            let path = dir.join(name);
            let raw = std::fs::read_to_string(&path).map_err(|e| FuseError::io(&path, e))?;
            let corpus: Vec<LabeledSeq> =
                serde_json::from_str(&raw).map_err(|e| FuseError::format(&path, e.to_string()))?;
            let mut samples = Vec::with_capacity(corpus.len());
            let mut mats: BTreeMap<(usize, usize), ProbMatrix> = BTreeMap::new();
            for e in m.matrices.iter().filter(|e| e.split == split) {
                mats.insert((e.domain, e.source), ProbMatrix::read_pdm(dir.join(&e.path))?);
            }
            let mut seen = vec![0usize; m.config.domains];
            for c in corpus {
                let seq = TokenSeq::new(c.ids, m.config.vocab)?;
                let k = *seen.get(c.domain).ok_or_else(|| {
                    FuseError::format(&path, format!("unknown domain {}", c.domain))
                })?;
                seen[c.domain] += 1;
                let n = seq.len();
                let sources = (0..m.sources.len())
                    .map(|j| {
                        let stacked = mats.get(&(c.domain, j)).ok_or_else(|| {
                            FuseError::format(manifest_path, format!("missing matrix for domain {} source {j}", c.domain))
                        })?;
                        stacked.slice_rows(k * n..(k + 1) * n)
                    })
                    .collect::<Result<Vec<_>>>()?;
                samples.push(Sample {
                    seq,
                    sources,
                    domain: c.domain,
                });
            }
            splits.insert(split, samples);
        }
        Ok(Self {
            train: splits.remove(&Split::Train).expect("train split"),
            eval: splits.remove(&Split::Eval).expect("eval split"),
            config: m.config,
            seed: m.seed,
            domains: m.domains,
            sources: m.sources,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "fusex-bench-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdmEntry {
    pub split: Split,
    pub domain: usize,
    pub source: usize,
    pub sequences: usize,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: BenchConfig,
    pub domains: Vec<DomainSpec>,
    pub sources: Vec<SourceModelSpec>,
    pub corpora: BTreeMap<Split, String>,
    pub matrices: Vec<PdmEntry>,
}

impl Manifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |r: String| Err(FuseError::format(path, r));
        if self.format != MANIFEST_FORMAT {
            return bad(format!("unknown manifest format {:?}", self.format));
        }
        self.config.validate()?;
        if self.domains.len() != self.config.domains || self.sources.len() != self.config.sources {
            return bad("domain/source counts disagree with config".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.id != i || d.vocab() != self.config.vocab {
                return bad(format!("domain entry {i} is inconsistent"));
            }
            d.validate()?;
        }
        for s in &self.sources {
            if s.quality.len() != self.config.domains || s.quality.iter().any(|q| !(0.0..=1.0).contains(q)) {
                return bad(format!("source {} has invalid qualities", s.id));
            }
        }
        let expected = 2 * self.config.domains * self.config.sources;
        if self.matrices.len() != expected {
            return bad(format!("expected {expected} matrix files, found {}", self.matrices.len()));
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| FuseError::io(path, e))
}

/// Token-level perplexity over a set of samples.
pub fn heldout_perplexity(lm: &TinyLM, samples: &[&Sample]) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for s in samples {
        let pred = lm_forward(lm, &s.seq)?;
        let labels = OneHotLabels::from_seq(&s.seq, lm.dims().vocab)?;
        nll += cross_entropy_rows(&pred, &labels)? * s.seq.len() as f64;
        tokens += s.seq.len();
    }
    if tokens == 0 {
        return Err(FuseError::Usage("no tokens to evaluate".into()));
    }
    Ok((nll / tokens as f64).exp())
}

pub fn domain_perplexities(lm: &TinyLM, samples: &[Sample], domains: usize) -> Result<Vec<f64>> {
    (0..domains)
        .map(|d| {
            let subset: Vec<&Sample> = samples.iter().filter(|s| s.domain == d).collect();
            heldout_perplexity(lm, &subset)
        })
        .collect()
}

/// Fraction of entries where `fused` is strictly worse (higher) than `baseline`.
pub fn degradation_rate(fused: &[f64], baseline: &[f64]) -> Result<f64> {
    if fused.len() != baseline.len() || fused.is_empty() {
        return Err(FuseError::Dimension("perplexity tables must be non-empty and equal length".into()));
    }
    let worse = fused.iter().zip(baseline).filter(|(f, b)| f > b).count();
    Ok(worse as f64 / fused.len() as f64)
}

/// Per-source share of all selections in the traces, optionally only for
/// samples from the given domains. `None` if nothing matched.
pub fn trace_histogram(traces: &[StepTrace], sources: usize, domains: Option<&[usize]>) -> Option<Vec<f64>> {
    let mut counts = vec![0u64; sources];
    for t in traces {
        for s in &t.samples {
            if domains.is_some_and(|ds| !ds.contains(&s.domain)) {
                continue;
            }
            s.selected.iter().filter(|&&j| j < sources).for_each(|&j| counts[j] += 1);
        }
    }
    normalize_counts(&counts)
}

fn normalize_counts(counts: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Runs a trained selection network over samples and returns each source's
/// share of the selections.
pub fn selection_histogram(
    asn: &AsnParams,
    config: &SelectionConfig,
    samples: &[&Sample],
    seed: u64,
) -> Result<Vec<f64>> {
    let m = asn.sources();
    let mut counts = vec![0u64; m];
    for (i, s) in samples.iter().enumerate() {
        let refs: Vec<&ProbMatrix> = s.sources.iter().collect();
        let noise = MetricNoise::draw(config, m, &mut rng::stream(seed, "eval.noise", &[i as u64]));
        let cache = select(asn, &refs, config, noise, None)?;
        cache.result().selected.iter().for_each(|&j| counts[j] += 1);
    }
    normalize_counts(&counts).ok_or_else(|| FuseError::Usage("no samples to select over".into()))
}

/// Squared coefficient of variation of a non-negative vector.
pub fn cv2(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean + 1e-10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: usize,
    pub ppl_fused: f64,
    pub ppl_baseline: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: Vec<DomainRow>,
    pub ppl_fused: f64,
    pub ppl_baseline: f64,
    pub degradation_rate: f64,
    pub selection_histogram: Option<Vec<f64>>,
    /// Set when the histogram could not be computed.
    pub partial: Option<String>,
    pub cv2_trace: Vec<f64>,
}

/// Compares two trained targets on the same held-out samples.
pub fn eval_report(
    fused: &TinyLM,
    baseline: &TinyLM,
    eval: &[Sample],
    domains: usize,
    traces: Option<&[StepTrace]>,
    importance: &[Vec<f64>],
    sources: usize,
) -> Result<EvalReport> {
    let pf = domain_perplexities(fused, eval, domains)?;
    let pb = domain_perplexities(baseline, eval, domains)?;
    let all: Vec<&Sample> = eval.iter().collect();
    let (selection_histogram, partial) = match traces {
        None => (None, Some("selection traces missing; histogram omitted".to_string())),
        Some(t) => match trace_histogram(t, sources, None) {
            Some(h) => (Some(h), None),
            None => (None, Some("selection traces empty; histogram omitted".to_string())),
        },
    };
    Ok(EvalReport {
        domains: (0..domains)
            .map(|d| DomainRow {
                domain: d,
                ppl_fused: pf[d],
                ppl_baseline: pb[d],
                degraded: pf[d] > pb[d],
            })
            .collect(),
        ppl_fused: heldout_perplexity(fused, &all)?,
        ppl_baseline: heldout_perplexity(baseline, &all)?,
        degradation_rate: degradation_rate(&pf, &pb)?,
        selection_histogram,
        partial,
        cv2_trace: importance.iter().map(|i| cv2(i)).collect(),
    })
}

impl EvalReport {
    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        write_json(json_path, self)?;
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| FuseError::format(csv_path, e.to_string()))?;
        for row in &self.domains {
            w.serialize(row).map_err(|e| FuseError::format(csv_path, e.to_string()))?;
        }
        w.flush().map_err(|e| FuseError::io(csv_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::LmDims;
    use crate::trainer::SampleTrace;

    fn small() -> BenchConfig {
        BenchConfig {
            domains: 4,
            vocab: 10,
            sources: 3,
            seq_len: 8,
            train_per_domain: 3,
            eval_per_domain: 2,
            successors: 3,
            planted_source: 2,
            ..Default::default()
        }
    }

    // independent oracle: dense matrix powers and the max(0, a-b) form of TV
    fn oracle_tv(a: &DomainSpec, b: &DomainSpec) -> f64 {
        let pi = |d: &DomainSpec| {
            let t = d.matrix();
            let mut row = ndarray::Array1::from(d.transitions[0].clone());
            let mut acc = ndarray::Array1::<f64>::zeros(d.vocab());
            for _ in 0..STATIONARY_ITERS {
                acc = acc + &row;
                row = row.dot(&t);
            }
            acc / STATIONARY_ITERS as f64
        };
        let (pa, pb) = (pi(a), pi(b));
        let mut pos = 0.0f64;
        for s in 0..a.vocab() {
            for t in 0..a.vocab() {
                pos += (pa[s] * a.transitions[s][t] - pb[s] * b.transitions[s][t]).max(0.0);
            }
        }
        pos
    }

    #[test]
    fn domains_are_valid_deterministic_and_distinct() {
        let cfg = BenchConfig::default();
        let a = gen_domains(&cfg, 11).unwrap();
        assert_eq!(a, gen_domains(&cfg, 11).unwrap());
        assert_ne!(a, gen_domains(&cfg, 12).unwrap());
        assert_eq!(a.len(), 12);
        for d in &a {
            d.validate().unwrap();
            for row in &d.transitions {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(row.iter().filter(|&&x| x > 0.0).count(), cfg.successors);
            }
        }
        for i in 0..a.len() {
            for j in 0..i {
                let tv = oracle_tv(&a[i], &a[j]);
                assert!(tv >= 0.2, "{i},{j}: {tv}");
                assert!((tv - domain_tv(&a[i], &a[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn impossible_distance_is_a_generation_error() {
        let cfg = BenchConfig {
            domains: 3,
            vocab: 4,
            successors: 1,
            min_tv: 1.01,
            ..small()
        };
        assert!(matches!(gen_domains(&cfg, 0), Err(FuseError::Generation(_))));
        assert!(matches!(
            gen_domains(&BenchConfig { domains: 1, ..small() }, 0),
            Err(FuseError::Config(_))
        ));
    }

    #[test]
    fn empirical_bigrams_match_chain() {
        let d = &gen_domains(&BenchConfig::default(), 5).unwrap()[0];
        let toks = d.sample_tokens(100_000, &mut rng::stream(5, "test.bigram", &[]));
        assert!(toks.iter().all(|&t| t != PAD_ID));
        let v = d.vocab();
        let mut emp = vec![0.0; v * v];
        let mut expect = vec![0.0; v * v];
        let mut prev = PAD_ID;
        let n = toks.len() as f64;
        for &t in &toks {
            emp[prev * v + t] += 1.0 / n;
            for (u, &p) in d.transitions[prev].iter().enumerate() {
                expect[prev * v + u] += p / n;
            }
            prev = t;
        }
        let tv: f64 = 0.5 * emp.iter().zip(&expect).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.02, "{tv}");
    }

    #[test]
    fn corpus_is_deterministic_and_partitioned() {
        let cfg = small();
        let ds = gen_domains(&cfg, 1).unwrap();
        let c = gen_corpus(&ds, 5, Split::Train, 1);
        assert_eq!(c, gen_corpus(&ds, 5, Split::Train, 1));
        assert_ne!(c, gen_corpus(&ds, 5, Split::Eval, 1));
        for d in 0..cfg.domains {
            assert_eq!(c.iter().filter(|s| s.domain == d).count(), 5);
        }
        assert_eq!(c.len(), 5 * cfg.domains);
        assert!(c.iter().all(|s| s.ids.iter().all(|&t| t != PAD_ID && t < cfg.vocab)));
    }

    #[test]
    fn source_matrix_examples() {
        let cfg = small();
        let ds = gen_domains(&cfg, 2).unwrap();
        let d = &ds[1];
        let seq = TokenSeq::new(d.sample_tokens(3, &mut rng::stream(2, "t", &[])), cfg.vocab).unwrap();
        let spec = |q: f64, alpha: f64| SourceModelSpec {
            id: 0,
            quality: vec![q; cfg.domains],
            alpha,
        };
        let oracle = gen_source_matrices(&spec(1.0, 0.0), &seq, d).unwrap();
        let prevs = [PAD_ID, seq.ids()[0], seq.ids()[1]];
        for n in 0..3 {
            for t in 0..cfg.vocab {
                assert_eq!(oracle.view()[[n, t]], d.transitions[prevs[n]][t]);
            }
        }
        let noise = gen_source_matrices(&spec(0.0, 0.05), &seq, d).unwrap();
        assert!(noise.view().iter().all(|&x| (x - 0.1).abs() < 1e-15));

        let half = gen_source_matrices(&spec(0.5, 0.05), &seq, d).unwrap();
        let keep = 0.5 * 0.95;
        for n in 0..3 {
            for t in 0..cfg.vocab {
                let hand = keep * d.transitions[prevs[n]][t] + (1.0 - keep) / cfg.vocab as f64;
                assert!((half.view()[[n, t]] - hand).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn oracle_source_cross_entropy_is_conditional_entropy() {
        let d = &gen_domains(&BenchConfig::default(), 9).unwrap()[3];
        let spec = SourceModelSpec {
            id: 0,
            quality: vec![1.0; 12],
            alpha: 0.0,
        };
        let toks = d.sample_tokens(50_000, &mut rng::stream(9, "test.ce", &[]));
        let seq = TokenSeq::new(toks, 32).unwrap();
        let p = gen_source_matrices(&spec, &seq, d).unwrap();
        let labels = OneHotLabels::from_seq(&seq, 32).unwrap();
        let ce = cross_entropy_rows(&p, &labels).unwrap();
        // expected conditional entropy under the empirical state visits
        let mut h = 0.0;
        let mut prev = PAD_ID;
        for &t in seq.ids() {
            h -= d.transitions[prev].iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            prev = t;
        }
        h /= seq.len() as f64;
        assert!((ce - h).abs() < 0.02, "{ce} vs {h}");
    }

    #[test]
    fn default_sources_plant_one_expert() {
        let cfg = BenchConfig::default();
        let s = default_sources(&cfg);
        assert_eq!(s.len(), 4);
        for d in 0..12 {
            let q3 = s[3].quality[d];
            assert_eq!(q3, if d < 6 { 0.9 } else { 0.2 });
        }
        for j in 0..3 {
            let experts: Vec<usize> = (0..12).filter(|&d| s[j].quality[d] == 0.5).collect();
            assert_eq!(experts, vec![6 + 2 * j, 7 + 2 * j]);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = small();
        let bench = Benchmark::generate(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = bench.write(dir.path()).unwrap();
        let back = Benchmark::load(&path).unwrap();
        assert_eq!(back.domains, bench.domains);
        assert_eq!(back.train.len(), bench.train.len());
        for (a, b) in back.train.iter().chain(&back.eval).zip(bench.train.iter().chain(&bench.eval)) {
            assert_eq!(a.seq, b.seq);
            assert_eq!(a.domain, b.domain);
            assert_eq!(a.sources, b.sources);
        }
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["matrices"].as_array().unwrap().len(), 2 * 4 * 3);

        let mut bad: Manifest = serde_json::from_value(raw).unwrap();
        bad.format = "other".into();
        assert!(bad.validate(&path).is_err());
    }

    #[test]
    fn degradation_examples() {
        assert_eq!(degradation_rate(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(degradation_rate(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(degradation_rate(&[3.0, 4.0, 5.0], &[2.0, 3.0, 4.0]).unwrap(), 1.0);
        // counted by hand: only domain 1 is worse
        let rate = degradation_rate(&[5.0, 7.5, 6.0], &[5.5, 7.0, 6.0]).unwrap();
        assert_eq!(rate, 1.0 / 3.0);
        let (a, b) = ([1.0, 5.0, 2.0, 8.0], [2.0, 4.0, 3.0, 7.0]);
        assert_eq!(degradation_rate(&a, &b).unwrap() + degradation_rate(&b, &a).unwrap(), 1.0);
        assert!(degradation_rate(&[], &[]).is_err());
    }

    #[test]
    fn histogram_is_exact_ratio() {
        let tr = |domain, selected: Vec<usize>| SampleTrace {
            domain,
            p: vec![],
            selected,
            weights: vec![],
        };
        let traces = vec![
            StepTrace {
                step: 0,
                samples: vec![tr(0, vec![0, 2]), tr(1, vec![2])],
            },
            StepTrace {
                step: 1,
                samples: vec![tr(0, vec![1, 2]), tr(2, vec![0])],
            },
        ];
        let h = trace_histogram(&traces, 3, None).unwrap();
        assert_eq!(h, vec![2.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0]);
        let only0 = trace_histogram(&traces, 3, Some(&[0])).unwrap();
        assert_eq!(only0, vec![0.25, 0.25, 0.5]);
        assert!(trace_histogram(&[], 3, None).is_none());
    }

    #[test]
    fn self_comparison_report() {
        let cfg = small();
        let bench = Benchmark::generate(&cfg, 6).unwrap();
        let lm = TinyLM::init(
            LmDims {
                vocab: cfg.vocab,
                ..Default::default()
            },
            &mut rng::stream(6, "lm", &[]),
        )
        .unwrap();
        let rep = eval_report(&lm, &lm, &bench.eval, cfg.domains, None, &[vec![1.0, 1.0, 2.0]], 3).unwrap();
        assert_eq!(rep.degradation_rate, 0.0);
        assert!(rep.selection_histogram.is_none() && rep.partial.is_some());
        assert_eq!(rep.cv2_trace.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        rep.write(&dir.path().join("r.json"), &dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + cfg.domains);
    }
}
