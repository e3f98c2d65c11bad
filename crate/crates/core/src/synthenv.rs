//! Synthetic preference task.
//!
//! A small vocabulary split into helpful, toxic and neutral tokens, two prompt
//! distributions over it (in-distribution training prompts and shifted
//! evaluation prompts), a gold reward that scores responses by token class,
//! length and repetition, and Bradley-Terry labeling of sampled response pairs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::sigmoid;
use crate::policy::{draw_categorical, PolicyParams, Role, SamplerConfig, Token};
use crate::seed::{derive_seed, rng_from_seed, sha256_hex, Rng};

/// Attempts at drawing two distinct responses before giving up on a prompt.
pub const RESAMPLE_BUDGET: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Helpful,
    Toxic,
    Neutral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VocabLists {
    size: usize,
    bos: Token,
    eos: Token,
    helpful: Vec<Token>,
    toxic: Vec<Token>,
    neutral: Vec<Token>,
}

/// Vocabulary with two special tokens; every other id has exactly one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabLists", into = "VocabLists")]
pub struct VocabSpec {
    lists: VocabLists,
    class_of: Vec<Option<TokenClass>>,
}

impl TryFrom<VocabLists> for VocabSpec {
    type Error = Error;

    fn try_from(lists: VocabLists) -> Result<Self> {
        let v = lists.size;
        if v < 3 {
            return Err(Error::config("env.vocab.size", "need bos, eos and at least one content token"));
        }
        if lists.bos == lists.eos {
            return Err(Error::config("env.vocab.eos", "bos and eos must differ"));
        }
        if lists.bos as usize >= v || lists.eos as usize >= v {
            return Err(Error::config("env.vocab.size", "bos and eos must be < size"));
        }
        let mut class_of = vec![None; v];
        let groups = [
            ("helpful", &lists.helpful, TokenClass::Helpful),
            ("toxic", &lists.toxic, TokenClass::Toxic),
            ("neutral", &lists.neutral, TokenClass::Neutral),
        ];
        for (name, ids, class) in groups {
            for &t in ids {
                let field = format!("env.vocab.{name}");
                if t as usize >= v || t == lists.bos || t == lists.eos {
                    return Err(Error::config(field, format!("token {t} is special or out of range")));
                }
                if class_of[t as usize].replace(class).is_some() {
                    return Err(Error::config(field, format!("token {t} has more than one class")));
                }
            }
        }
        for t in 0..v as Token {
            if t != lists.bos && t != lists.eos && class_of[t as usize].is_none() {
                return Err(Error::config("env.vocab", format!("token {t} has no class")));
            }
        }
        Ok(Self { lists, class_of })
    }
}

impl From<VocabSpec> for VocabLists {
    fn from(v: VocabSpec) -> Self {
        v.lists
    }
}

impl VocabSpec {
    pub fn new(
        size: usize,
        bos: Token,
        eos: Token,
        helpful: Vec<Token>,
        toxic: Vec<Token>,
        neutral: Vec<Token>,
    ) -> Result<Self> {
        VocabLists { size, bos, eos, helpful, toxic, neutral }.try_into()
    }

    pub fn size(&self) -> usize {
        self.lists.size
    }

    pub fn bos(&self) -> Token {
        self.lists.bos
    }

    pub fn eos(&self) -> Token {
        self.lists.eos
    }

    pub fn class_of(&self, token: Token) -> Option<TokenClass> {
        self.class_of.get(token as usize).copied().flatten()
    }

    /// Non-special tokens in increasing id order.
    pub fn content_tokens(&self) -> Vec<Token> {
        (0..self.size() as Token)
            .filter(|&t| self.class_of(t).is_some())
            .collect()
    }

    pub fn tokens_of(&self, class: TokenClass) -> &[Token] {
        match class {
            TokenClass::Helpful => &self.lists.helpful,
            TokenClass::Toxic => &self.lists.toxic,
            TokenClass::Neutral => &self.lists.neutral,
        }
    }
}

/// Unigram prompt distribution over content tokens (ascending id order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDistribution {
    pub weights: Vec<f64>,
    pub length_range: [usize; 2],
}

impl PromptDistribution {
    /// Normalizes nonnegative raw weights.
    pub fn from_weights(raw: &[f64], length_range: [usize; 2]) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) || total.is_nan() || total <= 0.0 {
            return Err(Error::config("weights", "weights must be nonnegative with positive sum"));
        }
        let dist = Self {
            weights: raw.iter().map(|w| w / total).collect(),
            length_range,
        };
        dist.check_range()?;
        Ok(dist)
    }

    fn check_range(&self) -> Result<()> {
        let [lo, hi] = self.length_range;
        if lo < 1 || lo > hi {
            return Err(Error::config("length_range", "need 1 <= min <= max"));
        }
        Ok(())
    }

    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        if self.weights.len() != vocab.content_tokens().len() {
            return Err(Error::config(
                "weights",
                format!("expected one weight per content token ({})", vocab.content_tokens().len()),
            ));
        }
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::config("weights", "weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("weights", format!("weights sum to {total}, not 1")));
        }
        self.check_range()
    }
}

/// Draws `n` prompts: uniform length in the range, i.i.d. unigram tokens.
pub fn gen_prompts(dist: &PromptDistribution, vocab: &VocabSpec, n: usize, seed: u64) -> Vec<Vec<Token>> {
    let tokens = vocab.content_tokens();
    let mut rng = rng_from_seed(seed);
    let [lo, hi] = dist.length_range;
    (0..n)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            (0..len)
                .map(|_| tokens[draw_categorical(&dist.weights, &mut rng)])
                .collect()
        })
        .collect()
}

/// Total-variation distance between the unigram distributions of two corpora.
pub fn unigram_tv(a: &[Vec<Token>], b: &[Vec<Token>], vocab_size: usize) -> f64 {
    let freq = |corpus: &[Vec<Token>]| {
        let mut counts = vec![0.0_f64; vocab_size];
        let mut total = 0.0_f64;
        for t in corpus.iter().flatten() {
            counts[*t as usize] += 1.0;
            total += 1.0;
        }
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        }
        counts
    };
    let (fa, fb) = (freq(a), freq(b));
    0.5 * fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoldRewardSpec {
    pub w_help: f64,
    pub w_toxic: f64,
    pub w_len: f64,
    pub w_rep: f64,
    pub len_cap: usize,
}

impl Default for GoldRewardSpec {
    fn default() -> Self {
        Self {
            w_help: 1.0,
            w_toxic: 2.0,
            w_len: 0.05,
            w_rep: 0.5,
            len_cap: 40,
        }
    }
}

impl GoldRewardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.len_cap < 1 {
            return Err(Error::config("env.reward.len_cap", "must be at least 1"));
        }
        let finite = [self.w_help, self.w_toxic, self.w_len, self.w_rep]
            .iter()
            .all(|w| w.is_finite());
        if !finite {
            return Err(Error::config("env.reward", "weights must be finite"));
        }
        Ok(())
    }
}

/// `w_help * #helpful - w_toxic * #toxic + w_len * min(len, cap) - w_rep * #repeats`,
/// counted over the response without its terminal eos.
pub fn gold_reward(spec: &GoldRewardSpec, vocab: &VocabSpec, response: &[Token]) -> Result<f64> {
    let body = match response.split_last() {
        Some((&last, body)) if last == vocab.eos() => body,
        _ => return Err(Error::MalformedResponse("response must end with eos".into())),
    };
    let (mut helpful, mut toxic) = (0usize, 0usize);
    for &t in body {
        match vocab.class_of(t) {
            Some(TokenClass::Helpful) => helpful += 1,
            Some(TokenClass::Toxic) => toxic += 1,
            _ => {}
        }
    }
    let repeats = body.windows(2).filter(|w| w[0] == w[1]).count();
    Ok(spec.w_help * helpful as f64 - spec.w_toxic * toxic as f64
        + spec.w_len * body.len().min(spec.len_cap) as f64
        - spec.w_rep * repeats as f64)
}

/// Bradley-Terry probability that the first response is preferred.
pub fn preference_probability(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Sample the preference from the Bradley-Terry probability.
    #[default]
    BradleyTerry,
    /// Prefer the higher reward outright (ties go to the first response).
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub flipped: bool,
}

/// Orders a response pair by preference, then flips the label with
/// probability `noise`.
pub fn label_pair(
    y1: &[Token],
    y2: &[Token],
    r1: f64,
    r2: f64,
    noise: f64,
    mode: LabelMode,
    rng: &mut Rng,
) -> Result<(Vec<Token>, Vec<Token>, bool)> {
    if !(0.0..=0.5).contains(&noise) {
        return Err(Error::config("env.label_noise", "must lie in [0, 0.5]"));
    }
    if y1 == y2 {
        return Err(Error::DegeneratePair);
    }
    let first_wins = match mode {
        LabelMode::BradleyTerry => rng.gen::<f64>() < preference_probability(r1, r2),
        LabelMode::Argmax => r1 >= r2,
    };
    let flipped = rng.gen::<f64>() < noise;
    let (chosen, rejected) = if first_wins != flipped { (y1, y2) } else { (y2, y1) };
    Ok((chosen.to_vec(), rejected.to_vec(), flipped))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassLogits {
    #[serde(default)]
    pub eos: f64,
    #[serde(default)]
    pub helpful: f64,
    #[serde(default)]
    pub toxic: f64,
    #[serde(default)]
    pub neutral: f64,
}

impl ClassLogits {
    pub const ZERO: ClassLogits = ClassLogits { eos: 0.0, helpful: 0.0, toxic: 0.0, neutral: 0.0 };
}

impl Default for ClassLogits {
    fn default() -> Self {
        Self::ZERO
    }
}

fn default_bos_logit() -> f64 {
    -20.0
}

/// Recipe for a class-structured logit table (used for the data-generating
/// policy and for the base model that SFT starts from).
///
/// The logit of target `v` at a context whose last token is `c` is
/// `base[class(v)] + after[class(c)][class(v)] + repeat * [v == c] + jitter * N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub base: ClassLogits,
    #[serde(default)]
    pub after_start: ClassLogits,
    #[serde(default)]
    pub after_helpful: ClassLogits,
    #[serde(default)]
    pub after_toxic: ClassLogits,
    #[serde(default)]
    pub after_neutral: ClassLogits,
    #[serde(default)]
    pub repeat: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default = "default_bos_logit")]
    pub bos_logit: f64,
}

impl PolicySpec {
    pub fn build(&self, vocab: &VocabSpec, order: usize, role: Role, seed: u64) -> Result<PolicyParams> {
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::config("jitter", "must be nonnegative"));
        }
        let mut params = PolicyParams::zeros(vocab.size(), order, vocab.bos(), vocab.eos(), role)?;
        let noise = Normal::new(0.0, self.jitter).map_err(|e| Error::config("jitter", e.to_string()))?;
        let mut rng = rng_from_seed(seed);
        let v = vocab.size();
        for ctx in 0..params.num_contexts() {
            let last = if order == 0 { vocab.bos() } else { (ctx % v) as Token };
            let after = match vocab.class_of(last) {
                None => &self.after_start,
                Some(TokenClass::Helpful) => &self.after_helpful,
                Some(TokenClass::Toxic) => &self.after_toxic,
                Some(TokenClass::Neutral) => &self.after_neutral,
            };
            let row = params.row_mut(ctx);
            for (t, logit) in row.iter_mut().enumerate() {
                let t = t as Token;
                let pick = |c: &ClassLogits| match vocab.class_of(t) {
                    Some(TokenClass::Helpful) => c.helpful,
                    Some(TokenClass::Toxic) => c.toxic,
                    Some(TokenClass::Neutral) => c.neutral,
                    None if t == vocab.eos() => c.eos,
                    None => 0.0,
                };
                *logit = if t == vocab.bos() {
                    self.bos_logit
                } else {
                    pick(&self.base) + pick(after) + if t == last && order > 0 { self.repeat } else { 0.0 }
                };
                if self.jitter > 0.0 {
                    *logit += noise.sample(&mut rng);
                }
            }
        }
        Ok(params)
    }
}

/// Synthetic-task description (the `env` section of the app config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub vocab: VocabSpec,
    /// Context order `k` of every policy.
    pub order: usize,
    pub train_prompts: PromptDistribution,
    pub ood_prompts: PromptDistribution,
    pub reward: GoldRewardSpec,
    pub data_policy: PolicySpec,
    pub base_policy: PolicySpec,
    pub data_sampler: SamplerConfig,
    pub n_train: usize,
    pub label_noise: f64,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default = "default_tv_floor")]
    pub tv_floor: f64,
}

fn default_tv_floor() -> f64 {
    0.1
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let nested = |section: &'static str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config { field, message } => Error::config(format!("env.{section}.{field}"), message),
                other => other,
            })
        };
        nested("train_prompts", self.train_prompts.validate(&self.vocab))?;
        nested("ood_prompts", self.ood_prompts.validate(&self.vocab))?;
        self.reward.validate()?;
        nested("data_sampler", self.data_sampler.validate())?;
        if !(0.0..=0.5).contains(&self.label_noise) {
            return Err(Error::config("env.label_noise", format!("{} is outside [0, 0.5]", self.label_noise)));
        }
        if self.order > 4 {
            return Err(Error::config("env.order", "context order above 4 is not supported"));
        }
        Ok(())
    }

    pub fn data_policy(&self, seed: u64) -> Result<PolicyParams> {
        self.data_policy
            .build(&self.vocab, self.order, Role::Data, derive_seed(seed, "data-policy", 0))
    }

    pub fn base_policy(&self, seed: u64) -> Result<PolicyParams> {
        self.base_policy
            .build(&self.vocab, self.order, Role::Theta, derive_seed(seed, "base-policy", 0))
    }
}

/// Training pairs plus the shifted evaluation prompts and their reference
/// "chosen" responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub train: Vec<PreferenceExample>,
    pub eval_prompts: Vec<Vec<Token>>,
    pub eval_chosen: Vec<Vec<Token>>,
}

impl DatasetBundle {
    /// Identifies the evaluation prompt set; records are only comparable
    /// when this matches.
    pub fn eval_prompt_hash(&self) -> String {
        prompt_set_hash(&self.eval_prompts)
    }

    pub fn flip_rate(&self) -> f64 {
        if self.train.is_empty() {
            return 0.0;
        }
        self.train.iter().filter(|e| e.flipped).count() as f64 / self.train.len() as f64
    }
}

pub fn prompt_set_hash(prompts: &[Vec<Token>]) -> String {
    let bytes = serde_json::to_vec(prompts).expect("token lists always serialize");
    sha256_hex(&bytes)[..16].to_string()
}

fn distinct_pair(
    policy: &PolicyParams,
    prompt: &[Token],
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(Vec<Token>, Vec<Token>)> {
    let y1 = policy.sample(prompt, sampler, rng)?;
    for _ in 0..RESAMPLE_BUDGET {
        let y2 = policy.sample(prompt, sampler, rng)?;
        if y2 != y1 {
            return Ok((y1, y2));
        }
    }
    Err(Error::GenerationFailure(format!(
        "no distinct response pair after {RESAMPLE_BUDGET} attempts for prompt {prompt:?}"
    )))
}

/// Samples, scores and labels `n_train` training pairs from the training
/// prompt distribution and one reference response for each of `n_eval`
/// shifted evaluation prompts.
pub fn build_dataset(
    env: &EnvConfig,
    n_train: usize,
    n_eval: usize,
    data_policy: &PolicyParams,
    seed: u64,
) -> Result<DatasetBundle> {
    env.validate()?;
    let vocab = &env.vocab;
    let train_prompts = gen_prompts(&env.train_prompts, vocab, n_train, derive_seed(seed, "train-prompts", 0));
    let eval_prompts = gen_prompts(&env.ood_prompts, vocab, n_eval, derive_seed(seed, "eval-prompts", 0));

    let mut train = Vec::with_capacity(n_train);
    for (i, prompt) in train_prompts.into_iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, "train-pair", i as u64));
        let (y1, y2) = distinct_pair(data_policy, &prompt, &env.data_sampler, &mut rng)?;
        let r1 = gold_reward(&env.reward, vocab, &y1)?;
        let r2 = gold_reward(&env.reward, vocab, &y2)?;
        let (chosen, rejected, flipped) = label_pair(&y1, &y2, r1, r2, env.label_noise, env.label_mode, &mut rng)?;
        train.push(PreferenceExample { prompt, chosen, rejected, flipped });
    }

    let mut eval_chosen = Vec::with_capacity(n_eval);
    for (i, prompt) in eval_prompts.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(seed, "eval-pair", i as u64));
        let (y1, y2) = distinct_pair(data_policy, prompt, &env.data_sampler, &mut rng)?;
        let r1 = gold_reward(&env.reward, vocab, &y1)?;
        let r2 = gold_reward(&env.reward, vocab, &y2)?;
        eval_chosen.push(if r1 >= r2 { y1 } else { y2 });
    }

    Ok(DatasetBundle { train, eval_prompts, eval_chosen })
}

/// Sidecar metadata written next to the dataset files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub vocab: VocabSpec,
    pub train_prompts: PromptDistribution,
    pub ood_prompts: PromptDistribution,
    pub reward: GoldRewardSpec,
    pub label_noise: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub eval_prompt_hash: String,
}

impl BundleMeta {
    pub fn new(env: &EnvConfig, bundle: &DatasetBundle, seed: u64) -> Self {
        Self {
            vocab: env.vocab.clone(),
            train_prompts: env.train_prompts.clone(),
            ood_prompts: env.ood_prompts.clone(),
            reward: env.reward,
            label_noise: env.label_noise,
            label_mode: env.label_mode,
            seed,
            n_train: bundle.train.len(),
            n_eval: bundle.eval_prompts.len(),
            eval_prompt_hash: bundle.eval_prompt_hash(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EvalLine {
    prompt: Vec<Token>,
    chosen: Vec<Token>,
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const META_FILE: &str = "meta.json";

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| Error::CorruptRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(items)
}

/// Writes `train.jsonl`, `eval.jsonl` and `meta.json` into `dir`.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle, meta: &BundleMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(&dir.join(TRAIN_FILE), &bundle.train)?;
    write_lines(
        &dir.join(EVAL_FILE),
        bundle
            .eval_prompts
            .iter()
            .zip(&bundle.eval_chosen)
            .map(|(p, c)| EvalLine { prompt: p.clone(), chosen: c.clone() }),
    )?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&meta_path, e))
}

pub fn load_bundle(dir: &Path) -> Result<(DatasetBundle, BundleMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    let train = read_lines(&dir.join(TRAIN_FILE))?;
    let (eval_prompts, eval_chosen) = read_lines::<EvalLine>(&dir.join(EVAL_FILE))?
        .into_iter()
        .map(|l| (l.prompt, l.chosen))
        .unzip();
    Ok((DatasetBundle { train, eval_prompts, eval_chosen }, meta))
}

/// Per-class token counts of a corpus, mostly for diagnostics.
pub fn class_histogram(vocab: &VocabSpec, responses: &[Vec<Token>]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for &t in responses.iter().flatten() {
        let key = match vocab.class_of(t) {
            Some(TokenClass::Helpful) => "helpful",
            Some(TokenClass::Toxic) => "toxic",
            Some(TokenClass::Neutral) => "neutral",
            None if t == vocab.eos() => "eos",
            None => "bos",
        };
        *counts.entry(key.to_string()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabSpec {
        VocabSpec::new(8, 0, 1, vec![2, 3], vec![4], vec![5, 6, 7]).unwrap()
    }

    #[test]
    fn vocab_invariants() {
        assert!(VocabSpec::new(4, 0, 0, vec![2], vec![], vec![3]).is_err());
        assert!(VocabSpec::new(4, 0, 1, vec![2], vec![2], vec![3]).is_err());
        assert!(VocabSpec::new(4, 0, 1, vec![2], vec![], vec![]).is_err());
        assert!(VocabSpec::new(4, 0, 1, vec![1], vec![2], vec![3]).is_err());
        let v = vocab();
        assert_eq!(v.content_tokens(), vec![2, 3, 4, 5, 6, 7]);
        assert_eq!(v.class_of(4), Some(TokenClass::Toxic));
        assert_eq!(v.class_of(1), None);
    }

    #[test]
    fn vocab_serde_revalidates() {
        let text = r#"{"size":4,"bos":0,"eos":1,"helpful":[2],"toxic":[2],"neutral":[3]}"#;
        assert!(serde_json::from_str::<VocabSpec>(text).is_err());
        let v = vocab();
        let back: VocabSpec = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn prompts_empty_and_deterministic() {
        let v = vocab();
        let d = PromptDistribution::from_weights(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], [2, 5]).unwrap();
        assert!(gen_prompts(&d, &v, 0, 3).is_empty());
        let a = gen_prompts(&d, &v, 100, 7);
        assert_eq!(a, gen_prompts(&d, &v, 100, 7));
        assert!(a.iter().all(|p| (2..=5).contains(&p.len())));
        assert!(a.iter().flatten().all(|t| v.class_of(*t).is_some()));
    }

    #[test]
    fn prompt_distribution_validation() {
        let v = vocab();
        assert!(PromptDistribution::from_weights(&[1.0; 6], [3, 2]).is_err());
        assert!(PromptDistribution::from_weights(&[1.0; 6], [0, 2]).is_err());
        assert!(PromptDistribution::from_weights(&[-1.0, 2.0], [1, 2]).is_err());
        let d = PromptDistribution::from_weights(&[1.0; 5], [1, 2]).unwrap();
        assert!(d.validate(&v).is_err());
        let unnormalized = PromptDistribution { weights: vec![0.5; 6], length_range: [1, 2] };
        assert!(unnormalized.validate(&v).is_err());
    }

    #[test]
    fn gold_reward_examples() {
        let v = vocab();
        let zero = GoldRewardSpec { w_help: 0.0, w_toxic: 0.0, w_len: 0.0, w_rep: 0.0, len_cap: 5 };
        assert_eq!(gold_reward(&zero, &v, &[2, 4, 4, 1]).unwrap(), 0.0);
        let d = GoldRewardSpec::default();
        // 2 helpful + 1 toxic, length 3, no repeats: 2 - 2 + 0.15.
        let r = gold_reward(&d, &v, &[2, 4, 3, 1]).unwrap();
        assert!((r - 0.15).abs() < 1e-12);
        let r = gold_reward(&d, &v, &[5, 6, 7, 1]).unwrap();
        assert!((r - 0.15).abs() < 1e-12);
        // Repeats are adjacent equal pairs: 5,5,5 has two.
        let r = gold_reward(&d, &v, &[5, 5, 5, 1]).unwrap();
        assert!((r - (0.15 - 1.0)).abs() < 1e-12);
        assert!(matches!(gold_reward(&d, &v, &[2, 3]), Err(Error::MalformedResponse(_))));
        assert!(gold_reward(&d, &v, &[]).is_err());
    }

    #[test]
    fn length_bonus_is_capped() {
        let v = vocab();
        let spec = GoldRewardSpec { w_help: 0.0, w_toxic: 0.0, w_len: 1.0, w_rep: 0.0, len_cap: 3 };
        assert_eq!(gold_reward(&spec, &v, &[5, 6, 5, 6, 5, 1]).unwrap(), 3.0);
    }

    #[test]
    fn label_pair_rules() {
        let mut rng = rng_from_seed(0);
        assert!(matches!(
            label_pair(&[2, 1], &[2, 1], 0.0, 0.0, 0.0, LabelMode::BradleyTerry, &mut rng),
            Err(Error::DegeneratePair)
        ));
        assert!(label_pair(&[2, 1], &[3, 1], 0.0, 0.0, 0.6, LabelMode::BradleyTerry, &mut rng).is_err());
        let (c, r, f) = label_pair(&[2, 1], &[3, 1], 0.1, 0.5, 0.0, LabelMode::Argmax, &mut rng).unwrap();
        assert_eq!((c, r, f), (vec![3, 1], vec![2, 1], false));
        assert_eq!(preference_probability(1.0, 1.0), 0.5);
        assert!((preference_probability(1.0, 0.0) - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn policy_spec_shapes_rows() {
        let v = vocab();
        let spec = PolicySpec {
            base: ClassLogits { eos: -1.0, helpful: 0.5, toxic: -0.5, neutral: 0.0 },
            after_start: ClassLogits { eos: -10.0, ..ClassLogits::ZERO },
            after_helpful: ClassLogits::ZERO,
            after_toxic: ClassLogits::ZERO,
            after_neutral: ClassLogits::ZERO,
            repeat: -2.0,
            jitter: 0.0,
            bos_logit: -20.0,
        };
        let p = spec.build(&v, 1, Role::Data, 0).unwrap();
        assert_eq!(p.row(0), &[-20.0, -11.0, 0.5, 0.5, -0.5, 0.0, 0.0, 0.0]);
        assert_eq!(p.row(2), &[-20.0, -1.0, -1.5, 0.5, -0.5, 0.0, 0.0, 0.0]);
        let jittered = PolicySpec { jitter: 0.1, ..spec };
        assert_eq!(jittered.build(&v, 1, Role::Data, 4).unwrap(), jittered.build(&v, 1, Role::Data, 4).unwrap());
    }
}
