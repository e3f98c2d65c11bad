#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prefbench_core::config::AppConfig;
use prefbench_core::metrics::{EvalReport, SampleEval};
use prefbench_core::objectives::{Method, ObjectiveConfig};
use prefbench_core::policy::{PolicyParams, Role, Token};
use prefbench_core::seed::Rng;
use prefbench_core::sweep::{RunRecord, RunStatus};
use prefbench_core::trainer::TrialConfig;
use rand::Rng as _;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn desk_config() -> AppConfig {
    AppConfig::load(&repo_root().join("configs/desk.json")).expect("desk config loads")
}

pub fn tiny_config() -> AppConfig {
    AppConfig::load(&repo_root().join("configs/tiny.json")).expect("tiny config loads")
}

/// `|a - b| / max(|a|, |b|)`, zero when both are exactly zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn random_policy(v: usize, k: usize, bos: Token, eos: Token, scale: f64, rng: &mut Rng) -> PolicyParams {
    let n = v.pow(k as u32) * v;
    let logits = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    PolicyParams::new(v, k, bos, eos, Role::Theta, logits).unwrap()
}

/// Random eos-terminated response over non-eos tokens.
pub fn random_response(v: usize, eos: Token, max_content: usize, rng: &mut Rng) -> Vec<Token> {
    let len = rng.gen_range(0..=max_content);
    let mut y: Vec<Token> = (0..len)
        .map(|_| loop {
            let t = rng.gen_range(0..v as Token);
            if t != eos {
                break t;
            }
        })
        .collect();
    y.push(eos);
    y
}

pub fn random_prompt(v: usize, max_len: usize, rng: &mut Rng) -> Vec<Token> {
    let len = rng.gen_range(0..=max_len);
    (0..len).map(|_| rng.gen_range(0..v as Token)).collect()
}

/// A synthetic evaluated record with the given per-prompt scores.
pub fn synthetic_record(method: Method, beta: f64, gamma: f64, lr: f64, epochs: usize, scores: &[f64], hash: &str) -> RunRecord {
    let objective = match method {
        Method::Dpo => ObjectiveConfig::dpo(beta),
        Method::Simpo => ObjectiveConfig::simpo(beta, gamma),
        Method::Lndpo => ObjectiveConfig::lndpo(beta),
    };
    let trial = TrialConfig { objective, learning_rate: lr, epochs, batch_size: 8, seed: 0 };
    let per_sample: Vec<SampleEval> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| SampleEval {
            prompt_id: i,
            response: vec![1],
            length: 1 + i % 4,
            gold_score: s,
            chosen_score: 0.0,
            sft_score: 0.0,
            logp_theta: -1.0 - s.abs(),
            logp_sft: -2.0,
        })
        .collect();
    let n = scores.len() as f64;
    RunRecord {
        trial_id: trial.id(),
        trial,
        status: RunStatus::Ok,
        error: None,
        train_loss_trace: vec![0.5; epochs],
        eval: Some(EvalReport {
            mean_score: scores.iter().sum::<f64>() / n,
            win_vs_chosen: 0.0,
            tie_vs_chosen: 0.0,
            win_vs_sft: 0.0,
            tie_vs_sft: 0.0,
            kl_vs_sft: per_sample.iter().map(|s| s.kl()).sum::<f64>() / n,
            mean_length: per_sample.iter().map(|s| s.length as f64).sum::<f64>() / n,
            sft_mean_score: 0.0,
            sft_mean_length: 1.0,
            prompt_set_hash: hash.to_string(),
            per_sample,
        }),
    }
}
