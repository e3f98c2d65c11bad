//! Two-stage training: supervised fine-tuning on chosen responses, then
//! preference optimization against a frozen copy of the SFT policy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::generate_responses;
use crate::objectives::{ObjectiveConfig, PairLogProbs};
use crate::optim::{optimizer_step, AdamState};
use crate::policy::{PolicyParams, Role, SamplerConfig, Token};
use crate::seed::{content_id, derive_seed, rng_from_seed};
use crate::synthenv::{gold_reward, DatasetBundle, GoldRewardSpec, PreferenceExample, VocabSpec};

pub const DEFAULT_BATCH_SIZE: usize = 64;

/// One preference-optimization trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub objective: ObjectiveConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        check_schedule(self.learning_rate, self.epochs, self.batch_size)
    }

    /// Content hash of the serialized configuration.
    pub fn id(&self) -> String {
        content_id(&serde_json::to_vec(self).expect("trial config serializes"))
    }
}

fn check_schedule(lr: f64, epochs: usize, batch_size: usize) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::config("learning_rate", "must be nonnegative"));
    }
    if epochs == 0 {
        return Err(Error::config("epochs", "must be at least 1"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Po,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainedWith {
    Sft(SftConfig),
    Po(TrialConfig),
}

/// Trained parameters plus how they were trained and the per-epoch mean training loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub stage: Stage,
    pub trial: TrainedWith,
    pub train_loss_trace: Vec<f64>,
}

impl Checkpoint {
    /// Hash of the parameter table.
    pub fn params_hash(&self) -> String {
        content_id(&serde_json::to_vec(&self.params).expect("params serialize"))
    }
}

fn epoch_order(n: usize, seed: u64, component: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, component, epoch as u64)));
    order
}

fn step(state: &mut AdamState, params: &mut PolicyParams, grad: &[f64], lr: f64) -> Result<()> {
    optimizer_step(state, params.logits_mut(), grad, lr)?;
    if params.logits().iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("parameters diverged at step {}", state.step)));
    }
    Ok(())
}

/// Maximum likelihood on chosen responses: minimizes `-mean log pi(y_w | x)`.
pub fn sft_train(init: &PolicyParams, data: &DatasetBundle, cfg: &SftConfig) -> Result<Checkpoint> {
    if data.train.is_empty() {
        return Err(Error::config("env.n_train", "SFT needs a nonempty training set"));
    }
    check_schedule(cfg.learning_rate, cfg.epochs, cfg.batch_size)?;
    let mut params = init.freeze(Role::Theta);
    let mut state = AdamState::new(params.logits().len());
    let mut grad = vec![0.0; params.logits().len()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.train.len(), cfg.seed, "sft-shuffle", epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &data.train[i];
                // Ascent on log-likelihood = descent on its negation.
                epoch_loss -= params.accumulate_seq_logprob_grad(&ex.prompt, &ex.chosen, -scale, &mut grad)?;
            }
            step(&mut state, &mut params, &grad, cfg.learning_rate)?;
        }
        trace.push(epoch_loss / data.train.len() as f64);
    }
    Ok(Checkpoint {
        params: params.freeze(Role::Sft),
        stage: Stage::Sft,
        trial: TrainedWith::Sft(*cfg),
        train_loss_trace: trace,
    })
}

/// Outcome of SFT checkpoint selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftSelection {
    pub winner: usize,
    /// Mean gold score of each candidate's generations, in candidate order.
    pub mean_scores: Vec<f64>,
}

/// Picks the candidate whose generations on `eval_prompts` have the highest
/// mean gold score; ties go to the lowest index.
pub fn select_best_sft(
    candidates: &[PolicyParams],
    vocab: &VocabSpec,
    eval_prompts: &[Vec<Token>],
    sampler: &SamplerConfig,
    gold: &GoldRewardSpec,
    seed: u64,
) -> Result<SftSelection> {
    if candidates.is_empty() {
        return Err(Error::config("sft", "no SFT candidates to select from"));
    }
    if eval_prompts.is_empty() {
        return Err(Error::config("eval.n_eval", "selection needs evaluation prompts"));
    }
    let mut mean_scores = Vec::with_capacity(candidates.len());
    for params in candidates {
        let responses = generate_responses(params, eval_prompts, sampler, seed)?;
        let total = responses
            .iter()
            .map(|y| gold_reward(gold, vocab, y))
            .sum::<Result<f64>>()?;
        mean_scores.push(total / responses.len() as f64);
    }
    let winner = mean_scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > mean_scores[best] { i } else { best });
    Ok(SftSelection { winner, mean_scores })
}

/// Reference log-probabilities of every training pair, `None` for SimPO.
pub fn reference_logprobs(
    reference: &PolicyParams,
    data: &[PreferenceExample],
    objective: &ObjectiveConfig,
) -> Result<Vec<Option<(f64, f64)>>> {
    data.iter()
        .map(|ex| {
            if !objective.method.uses_reference() {
                return Ok(None);
            }
            let w = reference.seq_logprob(&ex.prompt, &ex.chosen)?;
            let l = reference.seq_logprob(&ex.prompt, &ex.rejected)?;
            Ok(Some((w, l)))
        })
        .collect()
}

fn pair_logprobs(theta: &PolicyParams, ex: &PreferenceExample, reference: Option<(f64, f64)>) -> Result<PairLogProbs> {
    Ok(PairLogProbs {
        s_w_theta: theta.seq_logprob(&ex.prompt, &ex.chosen)?,
        s_l_theta: theta.seq_logprob(&ex.prompt, &ex.rejected)?,
        s_w_ref: reference.map(|r| r.0),
        s_l_ref: reference.map(|r| r.1),
        len_w: ex.chosen.len(),
        len_l: ex.rejected.len(),
    })
}

/// Mean preference loss over `batch` (indices into `data`).
pub fn po_batch_loss(
    theta: &PolicyParams,
    data: &[PreferenceExample],
    reference: &[Option<(f64, f64)>],
    batch: &[usize],
    objective: &ObjectiveConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in batch {
        total += objective.evaluate(&pair_logprobs(theta, &data[i], reference[i])?)?.loss;
    }
    Ok(total / batch.len() as f64)
}

/// Mean preference loss over `batch` and its gradient w.r.t. the logit table,
/// written into `grad` (overwritten).
pub fn po_batch_loss_and_grad(
    theta: &PolicyParams,
    data: &[PreferenceExample],
    reference: &[Option<(f64, f64)>],
    batch: &[usize],
    objective: &ObjectiveConfig,
    grad: &mut [f64],
) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        let ex = &data[i];
        let eval = objective.evaluate(&pair_logprobs(theta, ex, reference[i])?)?;
        total += eval.loss;
        theta.accumulate_seq_logprob_grad(&ex.prompt, &ex.chosen, scale * eval.d_s_w_theta, grad)?;
        theta.accumulate_seq_logprob_grad(&ex.prompt, &ex.rejected, scale * eval.d_s_l_theta, grad)?;
    }
    Ok(total * scale)
}

/// Preference optimization from an SFT checkpoint. The reference policy is a
/// frozen copy of the SFT parameters and is never touched by SimPO.
pub fn po_train(sft: &Checkpoint, data: &DatasetBundle, trial: &TrialConfig) -> Result<Checkpoint> {
    if sft.stage != Stage::Sft {
        return Err(Error::config("sft", "preference optimization must start from an SFT checkpoint"));
    }
    if data.train.is_empty() {
        return Err(Error::config("env.n_train", "preference optimization needs training pairs"));
    }
    trial.validate()?;
    let objective = trial.objective;
    let reference_policy = sft.params.freeze(Role::Ref);
    let reference = reference_logprobs(&reference_policy, &data.train, &objective)?;
    let mut theta = sft.params.freeze(Role::Theta);
    let mut state = AdamState::new(theta.logits().len());
    let mut grad = vec![0.0; theta.logits().len()];
    let mut trace = Vec::with_capacity(trial.epochs);
    for epoch in 0..trial.epochs {
        let order = epoch_order(data.train.len(), trial.seed, "po-shuffle", epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(trial.batch_size) {
            let loss = po_batch_loss_and_grad(&theta, &data.train, &reference, batch, &objective, &mut grad)?;
            epoch_loss += loss * batch.len() as f64;
            step(&mut state, &mut theta, &grad, trial.learning_rate)?;
        }
        let mean = epoch_loss / data.train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch} mean loss is {mean}")));
        }
        trace.push(mean);
    }
    Ok(Checkpoint {
        params: theta,
        stage: Stage::Po,
        trial: TrainedWith::Po(*trial),
        train_loss_trace: trace,
    })
}
