//! On-disk pipeline stages shared by the CLI and the end-to-end tests.
//!
//! Layout under the output root:
//!
//! ```text
//! data/{train.jsonl, eval.jsonl, meta.json, manifest.json}
//! sft/{checkpoint.json, selection.json}
//! runs/<sweep-id>/{records.jsonl, report.json, timings.jsonl, tables/*.csv}
//! runs/<trial-id>/checkpoint.json
//! eval/{report.json, per_sample.csv}
//! ```
//!
//! Every stage derives its randomness from the master seed with a fixed
//! component name: `data`, `base`, `sft-train`, `sft-select`, `po-train`, `eval`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::objectives::Method;
use crate::policy::PolicyParams;
use crate::seed::{content_id, derive_seed, sha256_hex};
use crate::sweep::{
    build_report, expand_grid, read_records, report_json, run_sweep, sort_records, write_records, write_tables,
    RunRecord, SweepContext, SweepReport, RECORDS_FILE, REPORT_FILE,
};
use crate::synthenv::{build_dataset, load_bundle, save_bundle, BundleMeta, DatasetBundle, META_FILE};
use crate::trainer::{select_best_sft, sft_train, Checkpoint, SftConfig};

pub const LOCK_FILE: &str = ".prefbench.lock";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.jsonl";

/// Paths of the output tree.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn sft_dir(&self) -> PathBuf {
        self.root.join("sft")
    }

    pub fn sft_checkpoint(&self) -> PathBuf {
        self.sft_dir().join("checkpoint.json")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Held for the lifetime of a stage; removes the lock file on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub flip_rate: f64,
    pub eval_prompt_hash: String,
    /// SHA-256 of each written file.
    pub files: BTreeMap<String, String>,
}

/// Generates the preference dataset and writes it with a hash manifest.
pub fn gen_data(cfg: &AppConfig, layout: &Layout) -> Result<DataManifest> {
    let seed = cfg.run.seed;
    let data_policy = cfg.env.data_policy(derive_seed(seed, "data", 0))?;
    let bundle = build_dataset(&cfg.env, cfg.env.n_train, cfg.eval.n_eval, &data_policy, derive_seed(seed, "data", 1))?;
    let dir = layout.data_dir();
    save_bundle(&dir, &bundle, &BundleMeta::new(&cfg.env, &bundle, seed))?;
    let mut files = BTreeMap::new();
    for name in [crate::synthenv::TRAIN_FILE, crate::synthenv::EVAL_FILE, META_FILE] {
        files.insert(name.to_string(), file_hash(&dir.join(name))?);
    }
    let manifest = DataManifest {
        seed,
        n_train: bundle.train.len(),
        n_eval: bundle.eval_prompts.len(),
        flip_rate: bundle.flip_rate(),
        eval_prompt_hash: bundle.eval_prompt_hash(),
        files,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_data(layout: &Layout) -> Result<(DatasetBundle, BundleMeta)> {
    let dir = layout.data_dir();
    if !dir.join(META_FILE).exists() {
        return Err(Error::MissingArtifact {
            path: dir,
            hint: "run `prefbench gen-data` with the same config and --out first".into(),
        });
    }
    load_bundle(&dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftCandidate {
    pub index: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub final_loss: f64,
    pub mean_score: f64,
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub winner: usize,
    pub winner_hash: String,
    pub candidates: Vec<SftCandidate>,
}

/// Trains every SFT grid candidate from the base policy and keeps the one
/// whose generations score best on the evaluation prompts.
pub fn sft(cfg: &AppConfig, layout: &Layout) -> Result<SftReport> {
    let (bundle, _) = load_data(layout)?;
    let seed = cfg.run.seed;
    let base = cfg.env.base_policy(derive_seed(seed, "base", 0))?;
    let mut checkpoints = Vec::new();
    for &learning_rate in &cfg.sft.learning_rates {
        for &epochs in &cfg.sft.epochs {
            let sft_cfg = SftConfig {
                learning_rate,
                epochs,
                batch_size: cfg.sft.batch_size,
                seed: derive_seed(seed, "sft-train", 0),
            };
            checkpoints.push(sft_train(&base, &bundle, &sft_cfg)?);
        }
    }
    let params: Vec<PolicyParams> = checkpoints.iter().map(|c| c.params.clone()).collect();
    let selection = select_best_sft(
        &params,
        &cfg.env.vocab,
        &bundle.eval_prompts,
        &cfg.eval.sampler,
        &cfg.env.reward,
        derive_seed(seed, "sft-select", 0),
    )?;
    let candidates = checkpoints
        .iter()
        .zip(&selection.mean_scores)
        .enumerate()
        .map(|(index, (ck, &mean_score))| {
            let crate::trainer::TrainedWith::Sft(c) = ck.trial else {
                unreachable!("sft_train always records its config")
            };
            SftCandidate {
                index,
                learning_rate: c.learning_rate,
                epochs: c.epochs,
                final_loss: *ck.train_loss_trace.last().unwrap_or(&f64::NAN),
                mean_score,
                params_hash: ck.params_hash(),
            }
        })
        .collect();
    let winner = &checkpoints[selection.winner];
    let report = SftReport { winner: selection.winner, winner_hash: winner.params_hash(), candidates };
    let dir = layout.sft_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&layout.sft_checkpoint(), winner)?;
    write_json(&dir.join("selection.json"), &report)?;
    Ok(report)
}

pub fn load_sft(layout: &Layout) -> Result<Checkpoint> {
    let path = layout.sft_checkpoint();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "run `prefbench sft` with the same config and --out first".into(),
        });
    }
    read_json(&path)
}

/// Which methods a sweep covers.
pub fn sweep_label(methods: &[Method]) -> String {
    if Method::ALL.iter().all(|m| methods.contains(m)) {
        "all".into()
    } else {
        methods.iter().map(|m| m.name()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub report: SweepReport,
    /// Trials skipped because a record already existed.
    pub resumed: usize,
}

#[derive(Serialize)]
struct Timing<'a> {
    trial_id: &'a str,
    wall_time: f64,
}

/// Records already on disk, ignoring a trailing partial line left by an
/// interrupted write.
fn existing_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        fs::write(path, &text[..keep]).map_err(|e| Error::io(path, e))?;
    }
    read_records(path)
}

/// Expands the grid for `methods`, runs every trial without a record yet,
/// and writes the sorted records, the report and its tables.
pub fn sweep(cfg: &AppConfig, layout: &Layout, methods: &[Method]) -> Result<SweepOutcome> {
    let (bundle, _) = load_data(layout)?;
    let sft = load_sft(layout)?;
    let seed = cfg.run.seed;
    let trials = expand_grid(&cfg.po.grid, methods, derive_seed(seed, "po-train", 0))?;
    let ids: BTreeSet<String> = trials.iter().map(|t| t.id()).collect();

    let fingerprint = format!(
        "{}|{}|{}|{}",
        ids.iter().cloned().collect::<Vec<_>>().join(","),
        sft.params_hash(),
        bundle.eval_prompt_hash(),
        serde_json::to_string(&cfg.eval)?
    );
    let dir = layout.runs_dir().join(format!("{}-{}", sweep_label(methods), content_id(fingerprint.as_bytes())));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let records_path = dir.join(RECORDS_FILE);

    let mut records: Vec<RunRecord> = existing_records(&records_path)?
        .into_iter()
        .filter(|r| ids.contains(&r.trial_id))
        .collect();
    let done: BTreeSet<String> = records.iter().map(|r| r.trial_id.clone()).collect();
    let pending: Vec<_> = trials.into_iter().filter(|t| !done.contains(&t.id())).collect();

    let ctx = SweepContext {
        vocab: cfg.env.vocab.clone(),
        gold: cfg.env.reward,
        bundle,
        sft,
        sampler: cfg.eval.sampler,
        eval_seed: derive_seed(seed, "eval", 0),
        checkpoint_dir: Some(layout.runs_dir()),
    };
    let open_append = |path: &Path| {
        OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))
    };
    let sinks = Mutex::new((open_append(&records_path)?, open_append(&dir.join(TIMINGS_FILE))?));
    let fresh = run_sweep(&ctx, &pending, cfg.run.parallelism, |record, wall_time| {
        let mut sinks = sinks.lock().expect("record sink poisoned");
        // Best effort: the final sorted rewrite below is authoritative.
        if let Ok(line) = serde_json::to_string(record) {
            let _ = writeln!(sinks.0, "{line}");
        }
        if let Ok(line) = serde_json::to_string(&Timing { trial_id: &record.trial_id, wall_time }) {
            let _ = writeln!(sinks.1, "{line}");
        }
    })?;
    drop(sinks);

    records.extend(fresh);
    sort_records(&mut records);
    records.dedup_by(|a, b| a.trial_id == b.trial_id);
    write_records(&records_path, &records)?;
    let report = write_report(&dir, &records)?;
    Ok(SweepOutcome { dir, records, report, resumed: done.len() })
}

fn write_report(dir: &Path, records: &[RunRecord]) -> Result<SweepReport> {
    let report = build_report(records)?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report_json(&report)?).map_err(|e| Error::io(&path, e))?;
    write_tables(&dir.join("tables"), &report, records)?;
    Ok(report)
}

/// Rebuilds `report.json` and the tables next to `records_path` from the
/// records alone.
pub fn report(records_path: &Path) -> Result<SweepReport> {
    if !records_path.exists() {
        return Err(Error::MissingArtifact {
            path: records_path.to_path_buf(),
            hint: "point at the records.jsonl of a finished `prefbench sweep`".into(),
        });
    }
    let records = read_records(records_path)?;
    let dir = records_path.parent().unwrap_or(Path::new("."));
    write_report(dir, &records)
}

/// Evaluates a single policy checkpoint against the stored SFT policy.
pub fn eval_checkpoint(cfg: &AppConfig, layout: &Layout, checkpoint: &Path) -> Result<EvalReport> {
    let (bundle, _) = load_data(layout)?;
    let sft = load_sft(layout)?;
    let theta = PolicyParams::load_json(checkpoint)?;
    let report = evaluate(
        &theta,
        &sft.params,
        &bundle,
        &cfg.env.vocab,
        &cfg.env.reward,
        &cfg.eval.sampler,
        derive_seed(cfg.run.seed, "eval", 0),
    )?;
    let dir = layout.eval_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("report.json"), &report)?;
    let csv_path = dir.join("per_sample.csv");
    let mut csv = Vec::new();
    report.write_per_sample_csv(&mut csv).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(report)
}

/// gen-data, sft and a sweep over `methods`, in one call.
pub fn run_all(cfg: &AppConfig, layout: &Layout, methods: &[Method]) -> Result<SweepOutcome> {
    gen_data(cfg, layout)?;
    sft(cfg, layout)?;
    sweep(cfg, layout, methods)
}
