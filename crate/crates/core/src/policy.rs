//! Order-k autoregressive softmax policy.
//!
//! The policy is a table of logits indexed by the last `k` tokens of the
//! bos-padded history `x || y_<t`. Sequence log-probabilities are exact and
//! their gradients with respect to the table are analytic, which is all the
//! preference objectives need.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

pub type Token = u32;

/// Upper bound on the number of table entries (`V^k * V`).
const MAX_TABLE_ENTRIES: usize = 1 << 26;

/// Which part a parameter table plays in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Theta,
    Ref,
    Sft,
    Data,
}

/// Logit table of an order-k softmax model.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    order: usize,
    bos: Token,
    eos: Token,
    role: Role,
    logits: Vec<f64>,
}

/// Sparse gradient: visited context row -> gradient over the `V` logits of that row.
pub type SparseGrad = BTreeMap<usize, Vec<f64>>;

impl PolicyParams {
    pub fn new(
        vocab_size: usize,
        order: usize,
        bos: Token,
        eos: Token,
        role: Role,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let contexts = context_count(vocab_size, order)?;
        if (bos as usize) >= vocab_size || (eos as usize) >= vocab_size {
            return Err(Error::domain(format!(
                "bos ({bos}) and eos ({eos}) must be < V ({vocab_size})"
            )));
        }
        if logits.len() != contexts * vocab_size {
            return Err(Error::domain(format!(
                "logit table has {} entries, expected {} x {}",
                logits.len(),
                contexts,
                vocab_size
            )));
        }
        if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("logit {i} is not finite")));
        }
        Ok(Self {
            vocab_size,
            order,
            bos,
            eos,
            role,
            logits,
        })
    }

    pub fn zeros(vocab_size: usize, order: usize, bos: Token, eos: Token, role: Role) -> Result<Self> {
        let contexts = context_count(vocab_size, order)?;
        Self::new(vocab_size, order, bos, eos, role, vec![0.0; contexts * vocab_size])
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bos(&self) -> Token {
        self.bos
    }

    pub fn eos(&self) -> Token {
        self.eos
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable access to the table. Callers must keep every entry finite.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.logits[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        let v = self.vocab_size;
        &mut self.logits[context * v..(context + 1) * v]
    }

    /// Same shape and special tokens.
    pub fn compatible_with(&self, other: &PolicyParams) -> bool {
        self.vocab_size == other.vocab_size
            && self.order == other.order
            && self.bos == other.bos
            && self.eos == other.eos
    }

    /// Independent value copy carrying `role`.
    pub fn freeze(&self, role: Role) -> PolicyParams {
        let mut copy = self.clone();
        copy.role = role;
        copy
    }

    /// Context index of the all-bos history.
    fn start_context(&self) -> usize {
        let v = self.vocab_size;
        let mut ctx = 0usize;
        for _ in 0..self.order {
            ctx = ctx * v + self.bos as usize;
        }
        ctx
    }

    fn push_context(&self, ctx: usize, token: Token) -> usize {
        if self.order == 0 {
            return 0;
        }
        let modulus = self.num_contexts();
        (ctx * self.vocab_size + token as usize) % modulus
    }

    /// Context index for the last `k` tokens of the bos-padded `history`.
    pub fn context_index(&self, history: &[Token]) -> Result<usize> {
        self.check_tokens(history, "history")?;
        Ok(self.context_after(history))
    }

    fn context_after(&self, history: &[Token]) -> usize {
        let skip = history.len().saturating_sub(self.order);
        history[skip..]
            .iter()
            .fold(self.start_context(), |ctx, &t| self.push_context(ctx, t))
    }

    fn check_tokens(&self, tokens: &[Token], what: &str) -> Result<()> {
        match tokens.iter().find(|&&t| (t as usize) >= self.vocab_size) {
            Some(t) => Err(Error::domain(format!(
                "{what} token {t} out of range for V = {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    fn check_pair(&self, prompt: &[Token], response: &[Token]) -> Result<()> {
        self.check_tokens(prompt, "prompt")?;
        self.check_tokens(response, "response")?;
        if response.last() != Some(&self.eos) {
            return Err(Error::MalformedResponse(
                "response must be nonempty and end with eos".into(),
            ));
        }
        Ok(())
    }

    /// `log pi(y | x)`: natural-log sum over every token of `y`, eos included.
    pub fn seq_logprob(&self, prompt: &[Token], response: &[Token]) -> Result<f64> {
        self.check_pair(prompt, response)?;
        let mut ctx = self.context_after(prompt);
        let mut total = 0.0;
        for &tok in response {
            let row = self.row(ctx);
            total += row[tok as usize] - log_sum_exp(row);
            ctx = self.push_context(ctx, tok);
        }
        Ok(total)
    }

    /// Value and sparse gradient of [`seq_logprob`](Self::seq_logprob) with
    /// respect to the logit table.
    pub fn seq_logprob_grad(&self, prompt: &[Token], response: &[Token]) -> Result<(f64, SparseGrad)> {
        self.check_pair(prompt, response)?;
        let v = self.vocab_size;
        let mut grad = SparseGrad::new();
        let mut probs = vec![0.0; v];
        let mut ctx = self.context_after(prompt);
        let mut total = 0.0;
        for &tok in response {
            let row = self.row(ctx);
            let lse = log_sum_exp(row);
            total += row[tok as usize] - lse;
            softmax_into(row, lse, &mut probs);
            let g = grad.entry(ctx).or_insert_with(|| vec![0.0; v]);
            for (gi, p) in g.iter_mut().zip(&probs) {
                *gi -= p;
            }
            g[tok as usize] += 1.0;
            ctx = self.push_context(ctx, tok);
        }
        Ok((total, grad))
    }

    /// Adds `scale * d seq_logprob / d logits` into the dense `grad` buffer and
    /// returns the log-probability. `grad` must have the table's length.
    pub fn accumulate_seq_logprob_grad(
        &self,
        prompt: &[Token],
        response: &[Token],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_pair(prompt, response)?;
        if grad.len() != self.logits.len() {
            return Err(Error::domain("gradient buffer does not match the table"));
        }
        let v = self.vocab_size;
        let mut probs = vec![0.0; v];
        let mut ctx = self.context_after(prompt);
        let mut total = 0.0;
        for &tok in response {
            let row = self.row(ctx);
            let lse = log_sum_exp(row);
            total += row[tok as usize] - lse;
            softmax_into(row, lse, &mut probs);
            let g = &mut grad[ctx * v..(ctx + 1) * v];
            for (gi, p) in g.iter_mut().zip(&probs) {
                *gi -= scale * p;
            }
            g[tok as usize] += scale;
            ctx = self.push_context(ctx, tok);
        }
        Ok(total)
    }

    /// Next-token distribution at `context` after dividing logits by `temperature`.
    pub fn next_token_probs(&self, context: usize, temperature: f64) -> Vec<f64> {
        let scaled: Vec<f64> = self.row(context).iter().map(|l| l / temperature).collect();
        let lse = log_sum_exp(&scaled);
        let mut probs = vec![0.0; scaled.len()];
        softmax_into(&scaled, lse, &mut probs);
        probs
    }

    /// Draws a response for `prompt`: temperature, then nucleus truncation, then
    /// a categorical draw, until eos. After `max_len` tokens without eos an eos
    /// is appended.
    pub fn sample(&self, prompt: &[Token], cfg: &SamplerConfig, rng: &mut Rng) -> Result<Vec<Token>> {
        cfg.validate()?;
        self.check_tokens(prompt, "prompt")?;
        let mut ctx = self.context_after(prompt);
        let mut response = Vec::new();
        while response.len() < cfg.max_len {
            let probs = nucleus(&self.next_token_probs(ctx, cfg.temperature), cfg.top_p);
            let tok = draw_categorical(&probs, rng) as Token;
            response.push(tok);
            if tok == self.eos {
                return Ok(response);
            }
            ctx = self.push_context(ctx, tok);
        }
        response.push(self.eos);
        Ok(response)
    }

    pub fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            header: CheckpointHeader {
                vocab_size: self.vocab_size,
                order: self.order,
                bos: self.bos,
                eos: self.eos,
                role: self.role,
            },
            logits: self.logits.clone(),
        }
    }

    pub fn from_checkpoint(file: CheckpointFile) -> Result<Self> {
        let h = file.header;
        Self::new(h.vocab_size, h.order, h.bos, h.eos, h.role, file.logits)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// JSON checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "k")]
    pub order: usize,
    pub bos: Token,
    pub eos: Token,
    pub role: Role,
}

/// On-disk checkpoint: header plus the flat row-major logit table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub header: CheckpointHeader,
    pub logits: Vec<f64>,
}

impl Serialize for PolicyParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_checkpoint().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PolicyParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = CheckpointFile::deserialize(d)?;
        PolicyParams::from_checkpoint(file).map_err(serde::de::Error::custom)
    }
}

fn context_count(vocab_size: usize, order: usize) -> Result<usize> {
    if vocab_size == 0 {
        return Err(Error::domain("vocabulary must be nonempty"));
    }
    let contexts = u32::try_from(order)
        .ok()
        .and_then(|k| vocab_size.checked_pow(k))
        .filter(|c| c.saturating_mul(vocab_size) <= MAX_TABLE_ENTRIES)
        .ok_or_else(|| Error::domain(format!("table V^k x V too large (V={vocab_size}, k={order})")))?;
    Ok(contexts)
}

/// Sampler settings: temperature, nucleus mass, and generation cap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.95,
            max_len: 256,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be a positive finite number"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p", "must lie in (0, 1]"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        Ok(())
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], lse: f64, out: &mut [f64]) {
    for (o, l) in out.iter_mut().zip(row) {
        *o = (l - lse).exp();
    }
}

/// Nucleus truncation: keeps the smallest descending-probability prefix whose
/// mass reaches `top_p` and renormalizes it. Dropped tokens get probability 0.
/// Equal probabilities are ordered by token id.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        let total: f64 = probs.iter().sum();
        return probs.iter().map(|p| p / total).collect();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..kept] {
        out[i] = probs[i] / mass;
    }
    out
}

/// Inverse-CDF draw from a (normalized) distribution.
pub fn draw_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn uniform(v: usize) -> PolicyParams {
        PolicyParams::zeros(v, 1, 0, 1, Role::Theta).unwrap()
    }

    #[test]
    fn uniform_two_tokens() {
        let p = uniform(4);
        let lp = p.seq_logprob(&[2], &[3, 1]).unwrap();
        assert!((lp - (-2.772588722239781)).abs() < 1e-12);
    }

    #[test]
    fn single_token_vocab_is_certain() {
        let p = PolicyParams::zeros(1, 1, 0, 0, Role::Theta).unwrap();
        assert_eq!(p.seq_logprob(&[], &[0]).unwrap(), 0.0);
    }

    #[test]
    fn hand_softmax_two_tokens() {
        // V=2, every row [0, ln 3]: p(1) = 3/4.
        let mut p = PolicyParams::zeros(2, 1, 0, 1, Role::Theta).unwrap();
        for c in 0..2 {
            p.row_mut(c)[1] = 3f64.ln();
        }
        let lp = p.seq_logprob(&[0], &[1]).unwrap();
        assert!((lp - (0.75f64).ln()).abs() < 1e-12);
        assert!((lp - (-0.28768207245178085)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_tokens_and_unterminated() {
        let p = uniform(4);
        assert!(matches!(p.seq_logprob(&[9], &[1]), Err(Error::Domain(_))));
        assert!(matches!(p.seq_logprob(&[2], &[7, 1]), Err(Error::Domain(_))));
        assert!(matches!(p.seq_logprob(&[2], &[2, 3]), Err(Error::MalformedResponse(_))));
        assert!(matches!(p.seq_logprob(&[2], &[]), Err(Error::MalformedResponse(_))));
    }

    #[test]
    fn rejects_non_finite_logits() {
        let mut logits = vec![0.0; 4];
        logits[3] = f64::NAN;
        assert!(PolicyParams::new(2, 1, 0, 1, Role::Theta, logits).is_err());
    }

    #[test]
    fn gradient_single_visit_uniform() {
        // Target 0 (eos = 0 here) from the bos row.
        let p = PolicyParams::zeros(2, 1, 1, 0, Role::Theta).unwrap();
        let (lp, g) = p.seq_logprob_grad(&[], &[0]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[&1], vec![0.5, -0.5]);
        assert_eq!(lp, 0.5f64.ln());

        let q = uniform(2);
        let (_, g) = q.seq_logprob_grad(&[], &[1]).unwrap();
        assert_eq!(g[&0], vec![-0.5, 0.5]);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = rng_from_seed(3);
        let mut p = uniform(5);
        for l in p.logits_mut() {
            *l = rng.gen_range(-2.0..2.0);
        }
        let (_, g) = p.seq_logprob_grad(&[2, 3], &[4, 4, 2, 1]).unwrap();
        for row in g.values() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn context_index_pads_with_bos() {
        let p = PolicyParams::zeros(3, 2, 0, 1, Role::Theta).unwrap();
        assert_eq!(p.context_index(&[]).unwrap(), 0);
        assert_eq!(p.context_index(&[2]).unwrap(), 2);
        assert_eq!(p.context_index(&[2, 1]).unwrap(), 2 * 3 + 1);
        assert_eq!(p.context_index(&[1, 1, 2, 1]).unwrap(), 2 * 3 + 1);
    }

    #[test]
    fn nucleus_hand_example() {
        // 0.3 / 0.8 is one ulp below 0.375 in binary floating point.
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15;
        let out = nucleus(&[0.5, 0.3, 0.2], 0.6);
        assert!(close(out[0], 0.625) && close(out[1], 0.375), "{out:?}");
        assert_eq!(out[2], 0.0);
        let out = nucleus(&[0.2, 0.3, 0.5], 0.6);
        assert!(close(out[2], 0.625) && close(out[1], 0.375), "{out:?}");
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn nucleus_keeps_everything_at_one() {
        let out = nucleus(&[0.1, 0.2, 0.7], 1.0);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(out.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let mut p = PolicyParams::zeros(4, 1, 0, 1, Role::Theta).unwrap();
        for c in 0..4 {
            let row = p.row_mut(c);
            row.copy_from_slice(&[-5.0, -1.0, 0.0, 0.3]);
        }
        // Greedy from any context picks token 3 forever; eos is appended at max_len.
        let cfg = SamplerConfig { temperature: 1e-9, top_p: 1.0, max_len: 5 };
        let mut rng = rng_from_seed(1);
        for _ in 0..20 {
            assert_eq!(p.sample(&[2], &cfg, &mut rng).unwrap(), vec![3, 3, 3, 3, 3, 1]);
        }
    }

    #[test]
    fn truncation_appends_eos() {
        let p = uniform(6);
        let cfg = SamplerConfig { temperature: 1.0, top_p: 1.0, max_len: 3 };
        let mut rng = rng_from_seed(11);
        for _ in 0..200 {
            let y = p.sample(&[2], &cfg, &mut rng).unwrap();
            assert!(y.len() <= 4);
            assert_eq!(*y.last().unwrap(), 1);
            assert!(y[..y.len() - 1].iter().all(|&t| t != 1));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = uniform(6);
        let cfg = SamplerConfig::default();
        let a = p.sample(&[2, 3], &cfg, &mut rng_from_seed(5)).unwrap();
        let b = p.sample(&[2, 3], &cfg, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn freeze_is_a_value_copy() {
        let mut original = uniform(3);
        let before = original.seq_logprob(&[2], &[2, 1]).unwrap();
        let frozen = original.freeze(Role::Ref);
        original.logits_mut()[5] = 4.0;
        assert_eq!(frozen.role(), Role::Ref);
        assert_eq!(frozen.logits(), uniform(3).logits());
        assert_eq!(frozen.seq_logprob(&[2], &[2, 1]).unwrap(), before);
    }

    #[test]
    fn sampler_config_validation() {
        let ok = SamplerConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SamplerConfig { top_p: 0.0, ..ok }.validate().is_err());
        assert!(SamplerConfig { top_p: 1.5, ..ok }.validate().is_err());
        assert!(SamplerConfig { temperature: 0.0, ..ok }.validate().is_err());
        assert!(SamplerConfig { max_len: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
