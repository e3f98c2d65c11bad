mod common;

use std::fs;
use std::path::Path;

use common::{synthetic_record, tiny_config};
use prefbench_core::config::AppConfig;
use prefbench_core::objectives::{Method, ObjectiveConfig};
use prefbench_core::pipeline::{self, Layout};
use prefbench_core::seed::{derive_seed, rng_from_seed};
use prefbench_core::sweep::{
    build_report, expand_grid, head_to_head, percentile_run, read_records, run_sweep, top_k_runs, write_records,
    RunRecord, RunStatus, SweepContext, RECORDS_FILE, REPORT_FILE,
};
use prefbench_core::trainer::TrialConfig;
use prefbench_core::Error;
use proptest::prelude::*;

fn context(cfg: &AppConfig, root: &Path) -> SweepContext {
    let layout = Layout::new(root);
    pipeline::gen_data(cfg, &layout).unwrap();
    pipeline::sft(cfg, &layout).unwrap();
    let (bundle, _) = pipeline::load_data(&layout).unwrap();
    SweepContext {
        vocab: cfg.env.vocab.clone(),
        gold: cfg.env.reward,
        bundle,
        sft: pipeline::load_sft(&layout).unwrap(),
        sampler: cfg.eval.sampler,
        eval_seed: derive_seed(cfg.run.seed, "eval", 0),
        checkpoint_dir: None,
    }
}

/// Every file under `dir` except wall-clock timings, keyed by relative path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timings.jsonl" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn parallelism_does_not_change_any_output_byte() {
    let mut cfg = tiny_config();
    let mut snaps = Vec::new();
    for p in [1, 4] {
        cfg.run.parallelism = p;
        let dir = tempfile::tempdir().unwrap();
        run_all_quiet(&cfg, dir.path());
        snaps.push(snapshot(dir.path()));
    }
    assert!(snaps[0].iter().any(|(name, _)| name.ends_with(REPORT_FILE)));
    assert_eq!(snaps[0], snaps[1]);
}

fn run_all_quiet(cfg: &AppConfig, root: &Path) -> pipeline::SweepOutcome {
    pipeline::run_all(cfg, &Layout::new(root), &Method::ALL).unwrap()
}

#[test]
fn a_diverging_trial_fails_alone() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(&cfg, dir.path());
    let healthy = expand_grid(&cfg.po.grid, &[Method::Dpo], 1).unwrap();
    let poison = TrialConfig {
        objective: ObjectiveConfig::dpo(0.1),
        learning_rate: f64::MAX,
        epochs: 1,
        batch_size: 32,
        seed: 1,
    };
    let mut with_poison = healthy.clone();
    with_poison.insert(1, poison);

    let clean = run_sweep(&ctx, &healthy, 2, |_, _| {}).unwrap();
    let mixed = run_sweep(&ctx, &with_poison, 2, |_, _| {}).unwrap();
    let failed: Vec<RunRecord> = mixed.iter().filter(|r| !r.is_ok()).cloned().collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].trial_id, poison.id());
    assert_eq!(failed[0].status, RunStatus::Failed);
    let msg = failed[0].error.as_deref().unwrap();
    assert!(msg.contains("NaN") || msg.contains("diverged"), "{msg}");
    let survivors: Vec<RunRecord> = mixed.iter().filter(|r| r.is_ok()).cloned().collect();
    assert_eq!(survivors, clean);

    let report = build_report(&[clean[0].clone(), failed[0].clone()]).unwrap();
    assert_eq!(report.n_failed, 1);
    assert_eq!(report.failure_rate, 0.5);
    assert!(matches!(build_report(&failed), Err(Error::NoRuns(_))));
}

#[test]
fn empty_inputs() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(&cfg, dir.path());
    assert!(run_sweep(&ctx, &[], 3, |_, _| {}).unwrap().is_empty());
    assert!(matches!(build_report(&[]), Err(Error::NoRuns(_))));
}

#[test]
fn interrupted_sweeps_resume_to_the_same_result() {
    let cfg = tiny_config();
    let full = tempfile::tempdir().unwrap();
    let reference = run_all_quiet(&cfg, full.path());
    let want = fs::read(reference.dir.join(RECORDS_FILE)).unwrap();

    let part = tempfile::tempdir().unwrap();
    let first = run_all_quiet(&cfg, part.path());
    let path = first.dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let kept = format!("{}\n{}\n{}", lines.next().unwrap(), lines.next().unwrap(), &lines.next().unwrap()[..40]);
    fs::write(&path, kept).unwrap();

    let resumed = pipeline::sweep(&cfg, &Layout::new(part.path()), &Method::ALL).unwrap();
    assert_eq!(resumed.resumed, 2);
    assert_eq!(fs::read(&path).unwrap(), want);
    assert_eq!(
        fs::read(resumed.dir.join(REPORT_FILE)).unwrap(),
        fs::read(reference.dir.join(REPORT_FILE)).unwrap()
    );
}

#[test]
fn corrupt_and_incomparable_records_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(RECORDS_FILE);
    let a = synthetic_record(Method::Dpo, 0.1, 0.0, 1e-2, 1, &[1.0, 2.0], "aaaa");
    let b = synthetic_record(Method::Simpo, 2.0, 0.5, 1e-2, 1, &[1.0, 0.0], "bbbb");
    write_records(&path, &[a.clone(), b.clone()]).unwrap();
    assert_eq!(read_records(&path).unwrap().len(), 2);
    assert!(matches!(build_report(&[a.clone(), b.clone()]), Err(Error::Incomparable(_))));
    assert!(matches!(head_to_head(&a, &b), Err(Error::Incomparable(_))));

    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"trial_id\": \"x\"\n");
    fs::write(&path, text).unwrap();
    match read_records(&path) {
        Err(Error::CorruptRecord { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a corrupt record error, got {other:?}"),
    }
}

fn table(scores: &[f64]) -> Vec<RunRecord> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| synthetic_record(Method::Lndpo, 1.0 + i as f64, 0.0, 1e-3, 1, &[s, s], "h"))
        .collect()
}

proptest! {
    #[test]
    fn top_k_pools_are_nested(scores in prop::collection::vec(0u8..5, 1..40), k1 in 1u8..=100, k2 in 1u8..=100) {
        let records = table(&scores.iter().map(|&s| s as f64).collect::<Vec<_>>());
        let refs: Vec<&RunRecord> = records.iter().collect();
        let (lo, hi) = (k1.min(k2) as f64, k1.max(k2) as f64);
        let small = top_k_runs(&refs, lo).unwrap();
        let big = top_k_runs(&refs, hi).unwrap();
        prop_assert!(small.len() <= big.len());
        prop_assert_eq!(&big[..small.len()], &small[..]);
        prop_assert_eq!(&percentile_run(&refs, 100.0).unwrap().trial_id, &top_k_runs(&refs, 1.0).unwrap()[0].trial_id);
    }

    #[test]
    fn percentile_is_monotone(scores in prop::collection::vec(-5.0f64..5.0, 1..40), p1 in 0.0f64..=100.0, p2 in 0.0f64..=100.0) {
        let records = table(&scores);
        let refs: Vec<&RunRecord> = records.iter().collect();
        let (lo, hi) = (p1.min(p2), p1.max(p2));
        prop_assert!(percentile_run(&refs, lo).unwrap().mean_score() <= percentile_run(&refs, hi).unwrap().mean_score());
    }

    #[test]
    fn head_to_head_is_antisymmetric(a in prop::collection::vec(0u8..3, 1..30), seed in any::<u64>()) {
        use rand::Rng as _;
        let mut rng = rng_from_seed(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(0..3) as f64).collect();
        let a: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let ra = synthetic_record(Method::Dpo, 0.1, 0.0, 1e-3, 1, &a, "h");
        let rb = synthetic_record(Method::Dpo, 0.3, 0.0, 1e-3, 1, &b, "h");
        let ab = head_to_head(&ra, &rb).unwrap();
        let ba = head_to_head(&rb, &ra).unwrap();
        prop_assert_eq!((ab.wins, ab.ties, ab.losses), (ba.losses, ba.ties, ba.wins));
        prop_assert_eq!(ab.total(), a.len());
    }
}
