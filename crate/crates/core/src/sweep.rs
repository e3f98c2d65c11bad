//! Hyperparameter sweeps and robustness analytics.
//!
//! Sweeps expand a per-method grid into trials, run them in parallel with no
//! shared mutable state, and emit one [`RunRecord`] per trial. Everything in a
//! [`SweepReport`] is a pure function of the record set, so a report rebuilt
//! from `records.jsonl` is byte-identical to the original.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, fmt_float, length_stats_of, win_rate, EvalReport, LengthStats, Metric, WinCounts};
use crate::objectives::{Method, ObjectiveConfig};
use crate::policy::SamplerConfig;
use crate::synthenv::{DatasetBundle, GoldRewardSpec, VocabSpec};
use crate::trainer::{po_train, Checkpoint, TrialConfig, DEFAULT_BATCH_SIZE};

/// Per-method hyperparameter grids plus the shared learning-rate and epoch lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dpo_beta: Vec<f64>,
    pub simpo_beta: Vec<f64>,
    pub simpo_gamma: Vec<f64>,
    pub lndpo_beta: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dpo_beta: vec![0.01, 0.05, 0.1, 0.3, 0.5],
            simpo_beta: vec![1.0, 1.5, 2.0, 2.5],
            simpo_gamma: vec![0.5, 0.8, 1.0, 1.2, 1.4, 1.6],
            lndpo_beta: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5],
            learning_rates: vec![1e-3, 3e-3, 1e-2],
            epochs: vec![1, 3],
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, xs: &[f64]| -> Result<()> {
            if xs.is_empty() {
                return Err(Error::config(format!("po.grid.{name}"), "list must be nonempty"));
            }
            if xs.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(Error::config(format!("po.grid.{name}"), "values must be positive"));
            }
            Ok(())
        };
        positive("dpo_beta", &self.dpo_beta)?;
        positive("simpo_beta", &self.simpo_beta)?;
        positive("lndpo_beta", &self.lndpo_beta)?;
        positive("learning_rates", &self.learning_rates)?;
        if self.simpo_gamma.is_empty() || self.simpo_gamma.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::config("po.grid.simpo_gamma", "list must be nonempty with values >= 0"));
        }
        if self.epochs.is_empty() || self.epochs.contains(&0) {
            return Err(Error::config("po.grid.epochs", "list must be nonempty with values >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("po.grid.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    fn objectives(&self, method: Method) -> Vec<ObjectiveConfig> {
        match method {
            Method::Dpo => self.dpo_beta.iter().map(|&b| ObjectiveConfig::dpo(b)).collect(),
            Method::Simpo => self
                .simpo_beta
                .iter()
                .flat_map(|&b| self.simpo_gamma.iter().map(move |&g| ObjectiveConfig::simpo(b, g)))
                .collect(),
            Method::Lndpo => self.lndpo_beta.iter().map(|&b| ObjectiveConfig::lndpo(b)).collect(),
        }
    }
}

/// Full per-method Cartesian product, ordered by method then by
/// (beta, gamma, learning rate, epochs).
pub fn expand_grid(spec: &GridSpec, methods: &[Method], seed: u64) -> Result<Vec<TrialConfig>> {
    spec.validate()?;
    let mut trials = Vec::new();
    for method in Method::ALL.into_iter().filter(|m| methods.contains(m)) {
        for objective in spec.objectives(method) {
            for &learning_rate in &spec.learning_rates {
                for &epochs in &spec.epochs {
                    trials.push(TrialConfig {
                        objective,
                        learning_rate,
                        epochs,
                        batch_size: spec.batch_size,
                        seed,
                    });
                }
            }
        }
    }
    Ok(trials)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One trial's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial_id: String,
    pub trial: TrialConfig,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub train_loss_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

impl RunRecord {
    pub fn method(&self) -> Method {
        self.trial.objective.method
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok && self.eval.is_some()
    }

    fn eval(&self) -> &EvalReport {
        self.eval.as_ref().expect("analytics only see ok records")
    }

    pub fn mean_score(&self) -> f64 {
        self.eval().mean_score
    }
}

/// Immutable inputs shared by every trial of a sweep.
#[derive(Clone, Debug)]
pub struct SweepContext {
    pub vocab: VocabSpec,
    pub gold: GoldRewardSpec,
    pub bundle: DatasetBundle,
    pub sft: Checkpoint,
    pub sampler: SamplerConfig,
    pub eval_seed: u64,
    /// When set, each trial's checkpoint goes to `<dir>/<trial-id>/checkpoint.json`.
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains and evaluates one trial. Failures become `Failed` records.
pub fn run_trial(ctx: &SweepContext, trial: &TrialConfig) -> RunRecord {
    let trial_id = trial.id();
    let outcome = po_train(&ctx.sft, &ctx.bundle, trial).and_then(|ck| {
        if let Some(dir) = &ctx.checkpoint_dir {
            let dir = dir.join(&trial_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            ck.params.save_json(&dir.join("checkpoint.json"))?;
        }
        let report = evaluate(
            &ck.params,
            &ctx.sft.params,
            &ctx.bundle,
            &ctx.vocab,
            &ctx.gold,
            &ctx.sampler,
            ctx.eval_seed,
        )?;
        Ok((ck.train_loss_trace, report))
    });
    match outcome {
        Ok((trace, report)) => RunRecord {
            trial_id,
            trial: *trial,
            status: RunStatus::Ok,
            error: None,
            train_loss_trace: trace,
            eval: Some(report),
        },
        Err(e) => RunRecord {
            trial_id,
            trial: *trial,
            status: RunStatus::Failed,
            error: Some(e.to_string()),
            train_loss_trace: Vec::new(),
            eval: None,
        },
    }
}

/// Runs every trial on a pool of `parallelism` threads. `on_record` sees each
/// record with its wall time in seconds as it completes (in completion
/// order); the returned list is sorted by trial id and does not depend on the
/// degree of parallelism.
pub fn run_sweep<F>(ctx: &SweepContext, trials: &[TrialConfig], parallelism: usize, on_record: F) -> Result<Vec<RunRecord>>
where
    F: Fn(&RunRecord, f64) + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::config("run.parallelism", e.to_string()))?;
    let mut records: Vec<RunRecord> = pool.install(|| {
        trials
            .par_iter()
            .map(|t| {
                let started = Instant::now();
                let record = run_trial(ctx, t);
                on_record(&record, started.elapsed().as_secs_f64());
                record
            })
            .collect()
    });
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `records.jsonl`; a malformed line is reported with its line number.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(&line).map_err(|e| Error::CorruptRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

fn ok_records(records: &[RunRecord]) -> Vec<&RunRecord> {
    records.iter().filter(|r| r.is_ok()).collect()
}

/// Descending by mean score, ties by ascending trial id.
fn rank_order(a: &RunRecord, b: &RunRecord) -> std::cmp::Ordering {
    b.mean_score()
        .total_cmp(&a.mean_score())
        .then_with(|| a.trial_id.cmp(&b.trial_id))
}

/// The best `ceil(k/100 * N)` ok runs by mean score.
pub fn top_k_runs<'a>(records: &[&'a RunRecord], k: f64) -> Result<Vec<&'a RunRecord>> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::domain(format!("top-k percentage {k} outside (0, 100]")));
    }
    if records.is_empty() {
        return Err(Error::NoRuns("top-k over an empty record set".into()));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| rank_order(a, b));
    let take = ((k / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted.truncate(take.clamp(1, sorted.len()));
    Ok(sorted)
}

/// The run at the nearest-rank `p`-th percentile of the mean-score
/// distribution (ascending order is the reverse of the top-k ranking, so
/// `p = 100` is the top-1 run).
pub fn percentile_run<'a>(records: &[&'a RunRecord], p: f64) -> Result<&'a RunRecord> {
    if records.is_empty() {
        return Err(Error::NoRuns("percentile over an empty record set".into()));
    }
    let mut ascending = records.to_vec();
    ascending.sort_by(|a, b| rank_order(b, a));
    crate::metrics::nearest_rank(&ascending, p)
}

/// Per-prompt gold-score comparison of `a` against `b`.
pub fn head_to_head(a: &RunRecord, b: &RunRecord) -> Result<WinCounts> {
    let (ea, eb) = match (&a.eval, &b.eval) {
        (Some(ea), Some(eb)) => (ea, eb),
        _ => return Err(Error::Incomparable("both records must be evaluated".into())),
    };
    if ea.prompt_set_hash != eb.prompt_set_hash {
        return Err(Error::Incomparable(format!(
            "prompt sets differ ({} vs {})",
            ea.prompt_set_hash, eb.prompt_set_hash
        )));
    }
    let by_prompt = |e: &EvalReport| {
        e.per_sample
            .iter()
            .map(|s| (s.prompt_id, s.gold_score))
            .collect::<BTreeMap<usize, f64>>()
    };
    let (sa, sb) = (by_prompt(ea), by_prompt(eb));
    if sa.len() != sb.len() || sa.keys().ne(sb.keys()) {
        return Err(Error::Incomparable("per-sample prompt ids differ".into()));
    }
    win_rate(&sa.values().copied().collect::<Vec<_>>(), &sb.values().copied().collect::<Vec<_>>())
}

/// `100 * (v - base) / |base|` rounded to one decimal; `None` when `base == 0`.
pub fn percent_change(v: f64, base: f64) -> Option<f64> {
    if base == 0.0 {
        return None;
    }
    Some((1000.0 * (v - base) / base.abs()).round() / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRow {
    pub method: Method,
    pub trial_id: String,
    /// Raw metric values of the method's best run.
    pub raw: BTreeMap<Metric, f64>,
    /// Signed percent change against DPO; DPO's own row holds its raw values.
    pub normalized: BTreeMap<Metric, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestTable {
    pub rows: Vec<BestRow>,
}

/// Best run (by mean score) of each method, reported relative to DPO's best.
pub fn best_table(by_method: &BTreeMap<Method, Vec<&RunRecord>>) -> Result<BestTable> {
    let mut best = BTreeMap::new();
    for (&method, records) in by_method {
        let ok: Vec<&RunRecord> = records.iter().copied().filter(|r| r.is_ok()).collect();
        if ok.is_empty() {
            return Err(Error::config("po", format!("method {method} has no successful runs")));
        }
        best.insert(method, top_k_runs(&ok, 100.0)?[0]);
    }
    let dpo = *best
        .get(&Method::Dpo)
        .ok_or_else(|| Error::config("po", "the best-run table is normalized by DPO, which is missing"))?;
    let raw_of = |r: &RunRecord| -> BTreeMap<Metric, f64> {
        Metric::ALL.iter().map(|&m| (m, r.eval().metric(m))).collect()
    };
    let dpo_raw = raw_of(dpo);
    let rows = best
        .iter()
        .map(|(&method, r)| {
            let raw = raw_of(r);
            let normalized = raw
                .iter()
                .map(|(&m, &v)| {
                    let value = if method == Method::Dpo { Some(v) } else { percent_change(v, dpo_raw[&m]) };
                    (m, value)
                })
                .collect();
            BestRow { method, trial_id: r.trial_id.clone(), raw, normalized }
        })
        .collect();
    Ok(BestTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Value of the SFT policy on the same metric, when known.
    pub baseline: Option<f64>,
    pub bins: Vec<Bin>,
}

pub const DEFAULT_BINS: usize = 20;

/// Fixed-width histogram over `[min, max]` plus summary statistics.
pub fn distribution_summary(values: &[f64], bins: usize, baseline: Option<f64>) -> Result<DistributionSummary> {
    if values.is_empty() {
        return Err(Error::domain("distribution of an empty set"));
    }
    if bins == 0 {
        return Err(Error::domain("histogram needs at least one bin"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (min, max) = (sorted[0], sorted[n - 1]);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let width = (max - min) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            lo: min + width * i as f64,
            hi: if i + 1 == bins { max } else { min + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &v in &sorted {
        let idx = if width > 0.0 { (((v - min) / width) as usize).min(bins - 1) } else { 0 };
        out[idx].count += 1;
    }
    Ok(DistributionSummary {
        n,
        mean: values.iter().sum::<f64>() / n as f64,
        median,
        min,
        max,
        baseline,
        bins: out,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParam {
    Beta,
    Gamma,
    LearningRate,
    Epochs,
}

impl HyperParam {
    pub fn name(self) -> &'static str {
        match self {
            HyperParam::Beta => "beta",
            HyperParam::Gamma => "gamma",
            HyperParam::LearningRate => "learning_rate",
            HyperParam::Epochs => "epochs",
        }
    }

    pub fn applicable(method: Method) -> &'static [HyperParam] {
        match method {
            Method::Simpo => &[HyperParam::Beta, HyperParam::Gamma, HyperParam::LearningRate, HyperParam::Epochs],
            _ => &[HyperParam::Beta, HyperParam::LearningRate, HyperParam::Epochs],
        }
    }

    fn value(self, trial: &TrialConfig) -> Option<f64> {
        match self {
            HyperParam::Beta => Some(trial.objective.beta),
            HyperParam::Gamma => trial.objective.gamma,
            HyperParam::LearningRate => Some(trial.learning_rate),
            HyperParam::Epochs => Some(trial.epochs as f64),
        }
    }
}

impl std::str::FromStr for HyperParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(HyperParam::Beta),
            "gamma" => Ok(HyperParam::Gamma),
            "learning_rate" | "lr" => Ok(HyperParam::LearningRate),
            "epochs" => Ok(HyperParam::Epochs),
            other => Err(Error::domain(format!("unknown hyperparameter `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesGroup {
    pub value: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperparamSeries {
    pub param: HyperParam,
    /// `(param value, mean score)` per run, in record order.
    pub points: Vec<(f64, f64)>,
    /// Per-value aggregates, ascending by value.
    pub groups: Vec<SeriesGroup>,
}

/// Mean score of every ok run against one hyperparameter.
pub fn hyperparam_series(records: &[&RunRecord], param: HyperParam) -> Result<HyperparamSeries> {
    let mut points = Vec::with_capacity(records.len());
    for r in records.iter().filter(|r| r.is_ok()) {
        let value = param.value(&r.trial).ok_or_else(|| {
            Error::domain(format!("{} does not apply to {}", param.name(), r.method()))
        })?;
        points.push((value, r.mean_score()));
    }
    let mut grouped: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut sorted = points.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (v, s) in sorted {
        match grouped.last_mut() {
            Some((last, scores)) if *last == v => scores.push(s),
            _ => grouped.push((v, vec![s])),
        }
    }
    let groups = grouped
        .into_iter()
        .map(|(value, scores)| {
            let n = scores.len();
            let mean = scores.iter().sum::<f64>() / n as f64;
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
            SeriesGroup {
                value,
                n,
                mean,
                std: var.sqrt(),
                min: scores.iter().copied().fold(f64::INFINITY, f64::min),
                max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(HyperparamSeries { param, points, groups })
}

/// Selection points used for head-to-head tables.
pub const SELECTIONS: [(&str, f64); 2] = [("best", 100.0), ("p75", 75.0)];

/// Top-k% pools used for the length and KL analysis.
pub const TOP_K: [f64; 3] = [1.0, 10.0, 25.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadToHeadCell {
    pub row: Method,
    pub col: Method,
    pub row_trial: String,
    pub col_trial: String,
    pub win: f64,
    pub tie: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadToHead {
    pub selection: String,
    pub percentile: f64,
    pub cells: Vec<HeadToHeadCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlStats {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKPool {
    pub method: Method,
    pub k: f64,
    pub trial_ids: Vec<String>,
    pub length: LengthStats,
    pub kl: KlStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub distributions: BTreeMap<Metric, DistributionSummary>,
    pub series: Vec<HyperparamSeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub n_records: usize,
    pub n_failed: usize,
    pub failure_rate: f64,
    pub prompt_set_hash: String,
    pub methods: Vec<MethodSummary>,
    pub best_table: Option<BestTable>,
    pub head_to_head: Vec<HeadToHead>,
    pub top_k: Vec<TopKPool>,
}

fn sft_baseline(eval: &EvalReport, metric: Metric) -> Option<f64> {
    match metric {
        Metric::MeanScore => Some(eval.sft_mean_score),
        Metric::MeanLength => Some(eval.sft_mean_length),
        Metric::KlVsSft => Some(0.0),
        Metric::WinVsSft => Some(0.0),
        Metric::WinVsChosen => None,
    }
}

/// Pools per-sample lengths and KL values over the selected runs.
pub fn pool_top_k(method: Method, k: f64, runs: &[&RunRecord]) -> Result<TopKPool> {
    let samples: Vec<_> = runs.iter().flat_map(|r| &r.eval().per_sample).collect();
    let lengths: Vec<usize> = samples.iter().map(|s| s.length).collect();
    let mut kls: Vec<f64> = samples.iter().map(|s| s.kl()).collect();
    kls.sort_by(f64::total_cmp);
    if kls.is_empty() {
        return Err(Error::NoRuns(format!("no samples in the top {k}% of {method}")));
    }
    Ok(TopKPool {
        method,
        k,
        trial_ids: runs.iter().map(|r| r.trial_id.clone()).collect(),
        length: length_stats_of(&lengths)?,
        kl: KlStats {
            mean: kls.iter().sum::<f64>() / kls.len() as f64,
            p50: crate::metrics::nearest_rank(&kls, 50.0)?,
            p90: crate::metrics::nearest_rank(&kls, 90.0)?,
        },
    })
}

/// Builds the full report from a record set.
pub fn build_report(records: &[RunRecord]) -> Result<SweepReport> {
    if records.is_empty() {
        return Err(Error::NoRuns("the record set is empty".into()));
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let ok = ok_records(&sorted);
    let n_failed = sorted.len() - ok.len();
    let first = ok
        .first()
        .ok_or_else(|| Error::NoRuns("every run failed".into()))?;
    let hash = first.eval().prompt_set_hash.clone();
    if let Some(other) = ok.iter().find(|r| r.eval().prompt_set_hash != hash) {
        return Err(Error::Incomparable(format!(
            "record {} was evaluated on prompt set {}, expected {hash}",
            other.trial_id,
            other.eval().prompt_set_hash
        )));
    }

    let mut by_method: BTreeMap<Method, Vec<&RunRecord>> = BTreeMap::new();
    for r in &ok {
        by_method.entry(r.method()).or_default().push(r);
    }

    let mut methods = Vec::new();
    for method in Method::ALL {
        let n_failed = sorted.iter().filter(|r| r.method() == method && !r.is_ok()).count();
        let Some(runs) = by_method.get(&method) else {
            if n_failed > 0 {
                methods.push(MethodSummary {
                    method,
                    n_ok: 0,
                    n_failed,
                    distributions: BTreeMap::new(),
                    series: Vec::new(),
                });
            }
            continue;
        };
        let mut distributions = BTreeMap::new();
        for metric in Metric::ALL {
            let values: Vec<f64> = runs.iter().map(|r| r.eval().metric(metric)).collect();
            let summary = distribution_summary(&values, DEFAULT_BINS, sft_baseline(first.eval(), metric))?;
            distributions.insert(metric, summary);
        }
        let series = HyperParam::applicable(method)
            .iter()
            .map(|&p| hyperparam_series(runs, p))
            .collect::<Result<Vec<_>>>()?;
        methods.push(MethodSummary { method, n_ok: runs.len(), n_failed, distributions, series });
    }

    let best_table = if by_method.contains_key(&Method::Dpo) {
        Some(best_table(&by_method)?)
    } else {
        None
    };

    let mut head_to_head_tables = Vec::new();
    for (name, p) in SELECTIONS {
        let picks: Vec<(Method, &RunRecord)> = by_method
            .iter()
            .map(|(&m, runs)| Ok((m, percentile_run(runs, p)?)))
            .collect::<Result<_>>()?;
        let mut cells = Vec::new();
        for &(row, a) in &picks {
            for &(col, b) in &picks {
                if row == col {
                    continue;
                }
                let w = head_to_head(a, b)?;
                cells.push(HeadToHeadCell {
                    row,
                    col,
                    row_trial: a.trial_id.clone(),
                    col_trial: b.trial_id.clone(),
                    win: w.win(),
                    tie: w.tie(),
                });
            }
        }
        head_to_head_tables.push(HeadToHead { selection: name.to_string(), percentile: p, cells });
    }

    let mut top_k = Vec::new();
    for (&method, runs) in &by_method {
        for k in TOP_K {
            top_k.push(pool_top_k(method, k, &top_k_runs(runs, k)?)?);
        }
    }

    Ok(SweepReport {
        n_records: sorted.len(),
        n_failed,
        failure_rate: n_failed as f64 / sorted.len() as f64,
        prompt_set_hash: hash,
        methods,
        best_table,
        head_to_head: head_to_head_tables,
        top_k,
    })
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";

pub fn report_json(report: &SweepReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the plot-ready CSV tables under `dir` (created if missing):
///
/// * `best_table.csv`: method,trial_id,metric,raw,normalized
/// * `head_to_head_<selection>.csv`: row,col,row_trial,col_trial,win,tie
/// * `distribution_<metric>.csv`: method,bin_lo,bin_hi,count
/// * `hyperparam_series.csv`: method,param,value,mean_score
/// * `top_k_samples.csv`: method,k,trial_id,prompt_id,length,kl
pub fn write_tables(dir: &Path, report: &SweepReport, records: &[RunRecord]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();

    let mut best = String::from("method,trial_id,metric,raw,normalized\n");
    if let Some(table) = &report.best_table {
        for row in &table.rows {
            for (metric, raw) in &row.raw {
                best += &format!(
                    "{},{},{},{},{}\n",
                    row.method,
                    row.trial_id,
                    metric.name(),
                    fmt_float(*raw),
                    opt(row.normalized[metric])
                );
            }
        }
    }
    write_file(&dir.join("best_table.csv"), &best)?;

    for h in &report.head_to_head {
        let mut csv = String::from("row,col,row_trial,col_trial,win,tie\n");
        for c in &h.cells {
            csv += &format!(
                "{},{},{},{},{},{}\n",
                c.row,
                c.col,
                c.row_trial,
                c.col_trial,
                fmt_float(c.win),
                fmt_float(c.tie)
            );
        }
        write_file(&dir.join(format!("head_to_head_{}.csv", h.selection)), &csv)?;
    }

    for metric in Metric::ALL {
        let mut csv = String::from("method,bin_lo,bin_hi,count\n");
        for m in &report.methods {
            if let Some(d) = m.distributions.get(&metric) {
                for b in &d.bins {
                    csv += &format!("{},{},{},{}\n", m.method, fmt_float(b.lo), fmt_float(b.hi), b.count);
                }
            }
        }
        write_file(&dir.join(format!("distribution_{}.csv", metric.name())), &csv)?;
    }

    let mut series = String::from("method,param,value,mean_score\n");
    for m in &report.methods {
        for s in &m.series {
            for (v, score) in &s.points {
                series += &format!("{},{},{},{}\n", m.method, s.param.name(), fmt_float(*v), fmt_float(*score));
            }
        }
    }
    write_file(&dir.join("hyperparam_series.csv"), &series)?;

    let by_id: BTreeMap<&str, &RunRecord> = records.iter().map(|r| (r.trial_id.as_str(), r)).collect();
    let mut pool = String::from("method,k,trial_id,prompt_id,length,kl\n");
    for t in &report.top_k {
        for id in &t.trial_ids {
            let Some(eval) = by_id.get(id.as_str()).and_then(|r| r.eval.as_ref()) else {
                continue;
            };
            for s in &eval.per_sample {
                pool += &format!("{},{},{},{},{},{}\n", t.method, t.k, id, s.prompt_id, s.length, fmt_float(s.kl()));
            }
        }
    }
    write_file(&dir.join("top_k_samples.csv"), &pool)
}
