//! Evaluation metrics: mean gold score, win rates against the dataset's chosen
//! responses and against the SFT policy, sampled KL to SFT, and response length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, SamplerConfig, Token};
use crate::seed::{derive_seed, rng_from_seed};
use crate::synthenv::{gold_reward, prompt_set_hash, DatasetBundle, GoldRewardSpec, VocabSpec};

pub fn mean_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::domain("mean of an empty score list"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Outcome counts of a paired comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCounts {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

impl WinCounts {
    pub fn total(&self) -> usize {
        self.wins + self.ties + self.losses
    }

    pub fn win(&self) -> f64 {
        self.wins as f64 / self.total() as f64
    }

    pub fn tie(&self) -> f64 {
        self.ties as f64 / self.total() as f64
    }

    pub fn loss(&self) -> f64 {
        self.losses as f64 / self.total() as f64
    }
}

/// Counts `a > b` (strict) wins and exact ties over aligned score lists.
pub fn win_rate(a: &[f64], b: &[f64]) -> Result<WinCounts> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::domain("win rate over an empty comparison"));
    }
    let mut counts = WinCounts { wins: 0, ties: 0, losses: 0 };
    for (x, y) in a.iter().zip(b) {
        if x > y {
            counts.wins += 1;
        } else if x == y {
            counts.ties += 1;
        } else {
            counts.losses += 1;
        }
    }
    Ok(counts)
}

/// One response per prompt; prompt `i` draws from the stream
/// `derive_seed(seed, "eval-sample", i)`, so a given prompt sees the same
/// random numbers whatever the policy and whatever the evaluation order.
pub fn generate_responses(
    policy: &PolicyParams,
    prompts: &[Vec<Token>],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Vec<Token>>> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = rng_from_seed(derive_seed(seed, "eval-sample", i as u64));
            policy.sample(x, cfg, &mut rng)
        })
        .collect()
}

fn check_pair(theta: &PolicyParams, sft: &PolicyParams) -> Result<()> {
    if !theta.compatible_with(sft) {
        return Err(Error::domain(format!(
            "policies differ in shape: V={} k={} vs V={} k={}",
            theta.vocab_size(),
            theta.order(),
            sft.vocab_size(),
            sft.order()
        )));
    }
    Ok(())
}

/// Mean over prompts of `log pi_theta(y|x) - log pi_sft(y|x)` with `y` drawn
/// from `theta` by the evaluation sampler.
pub fn kl_vs_sft(
    theta: &PolicyParams,
    sft: &PolicyParams,
    prompts: &[Vec<Token>],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    check_pair(theta, sft)?;
    if prompts.is_empty() {
        return Err(Error::domain("KL over an empty prompt set"));
    }
    let responses = generate_responses(theta, prompts, cfg, seed)?;
    let mut total = 0.0;
    for (x, y) in prompts.iter().zip(&responses) {
        total += theta.seq_logprob(x, y)? - sft.seq_logprob(x, y)?;
    }
    Ok(total / prompts.len() as f64)
}

/// Nearest-rank percentile of an ascending slice: element at rank `ceil(p/100 * n)`.
pub fn nearest_rank<T: Copy>(sorted: &[T], p: f64) -> Result<T> {
    if sorted.is_empty() {
        return Err(Error::domain("percentile of an empty list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::domain(format!("percentile {p} outside [0, 100]")));
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub p50: usize,
    pub p90: usize,
    /// length -> count
    pub histogram: BTreeMap<usize, usize>,
}

/// Length statistics; lengths count every token including the terminal eos.
pub fn length_stats(responses: &[Vec<Token>]) -> Result<LengthStats> {
    length_stats_of(&responses.iter().map(Vec::len).collect::<Vec<_>>())
}

pub fn length_stats_of(lengths: &[usize]) -> Result<LengthStats> {
    if lengths.is_empty() {
        return Err(Error::domain("length statistics of an empty set"));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &l in &sorted {
        *histogram.entry(l).or_insert(0) += 1;
    }
    Ok(LengthStats {
        mean: sorted.iter().sum::<usize>() as f64 / sorted.len() as f64,
        p50: nearest_rank(&sorted, 50.0)?,
        p90: nearest_rank(&sorted, 90.0)?,
        histogram,
    })
}

/// Per-prompt evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub prompt_id: usize,
    pub response: Vec<Token>,
    pub length: usize,
    pub gold_score: f64,
    pub chosen_score: f64,
    pub sft_score: f64,
    pub logp_theta: f64,
    pub logp_sft: f64,
}

impl SampleEval {
    pub fn kl(&self) -> f64 {
        self.logp_theta - self.logp_sft
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_score: f64,
    pub win_vs_chosen: f64,
    pub tie_vs_chosen: f64,
    pub win_vs_sft: f64,
    pub tie_vs_sft: f64,
    pub kl_vs_sft: f64,
    pub mean_length: f64,
    /// Mean gold score and length of the SFT policy's own generations.
    pub sft_mean_score: f64,
    pub sft_mean_length: f64,
    pub prompt_set_hash: String,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    pub fn scores(&self) -> Vec<f64> {
        self.per_sample.iter().map(|s| s.gold_score).collect()
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::MeanScore => self.mean_score,
            Metric::WinVsChosen => self.win_vs_chosen,
            Metric::WinVsSft => self.win_vs_sft,
            Metric::KlVsSft => self.kl_vs_sft,
            Metric::MeanLength => self.mean_length,
        }
    }

    /// `prompt_id,length,gold_score,logp_theta,logp_sft`
    pub fn write_per_sample_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "prompt_id,length,gold_score,logp_theta,logp_sft")?;
        for s in &self.per_sample {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.prompt_id,
                s.length,
                fmt_float(s.gold_score),
                fmt_float(s.logp_theta),
                fmt_float(s.logp_sft)
            )?;
        }
        Ok(())
    }
}

/// The five headline metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MeanScore,
    MeanLength,
    KlVsSft,
    WinVsChosen,
    WinVsSft,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::MeanScore,
        Metric::MeanLength,
        Metric::KlVsSft,
        Metric::WinVsChosen,
        Metric::WinVsSft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MeanScore => "mean_score",
            Metric::MeanLength => "mean_length",
            Metric::KlVsSft => "kl_vs_sft",
            Metric::WinVsChosen => "win_vs_chosen",
            Metric::WinVsSft => "win_vs_sft",
        }
    }
}

/// Float formatting for CSV output: 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Generates one response per evaluation prompt from `theta` (and, with the
/// same per-prompt streams, from `sft`) and computes every metric on them.
pub fn evaluate(
    theta: &PolicyParams,
    sft: &PolicyParams,
    bundle: &DatasetBundle,
    vocab: &VocabSpec,
    gold: &GoldRewardSpec,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<EvalReport> {
    check_pair(theta, sft)?;
    let prompts = &bundle.eval_prompts;
    if prompts.is_empty() {
        return Err(Error::domain("evaluation needs at least one prompt"));
    }
    if bundle.eval_chosen.len() != prompts.len() {
        return Err(Error::domain("eval_chosen is not aligned with eval_prompts"));
    }
    let responses = generate_responses(theta, prompts, cfg, seed)?;
    let sft_responses = generate_responses(sft, prompts, cfg, seed)?;

    let mut per_sample = Vec::with_capacity(prompts.len());
    for (i, x) in prompts.iter().enumerate() {
        let y = &responses[i];
        per_sample.push(SampleEval {
            prompt_id: i,
            response: y.clone(),
            length: y.len(),
            gold_score: gold_reward(gold, vocab, y)?,
            chosen_score: gold_reward(gold, vocab, &bundle.eval_chosen[i])?,
            sft_score: gold_reward(gold, vocab, &sft_responses[i])?,
            logp_theta: theta.seq_logprob(x, y)?,
            logp_sft: sft.seq_logprob(x, y)?,
        });
    }

    let column = |f: fn(&SampleEval) -> f64| per_sample.iter().map(f).collect::<Vec<f64>>();
    let scores = column(|s| s.gold_score);
    let vs_chosen = win_rate(&scores, &column(|s| s.chosen_score))?;
    let vs_sft = win_rate(&scores, &column(|s| s.sft_score))?;
    Ok(EvalReport {
        mean_score: mean_score(&scores)?,
        win_vs_chosen: vs_chosen.win(),
        tie_vs_chosen: vs_chosen.tie(),
        win_vs_sft: vs_sft.win(),
        tie_vs_sft: vs_sft.tie(),
        kl_vs_sft: mean_score(&column(|s| s.kl()))?,
        mean_length: mean_score(&column(|s| s.length as f64))?,
        sft_mean_score: mean_score(&column(|s| s.sft_score))?,
        sft_mean_length: sft_responses.iter().map(Vec::len).sum::<usize>() as f64 / prompts.len() as f64,
        prompt_set_hash: prompt_set_hash(prompts),
        per_sample,
    })
}
