//! Preference objectives over sequence log-probabilities.
//!
//! Each loss is `softplus(-z)` of a method-specific margin `z`:
//!
//! ```text
//! DPO     z = beta * [(s_w - r_w) - (s_l - r_l)]
//! SimPO   z = beta * s_w / |y_w| - beta * s_l / |y_l| - gamma
//! LN-DPO  z = beta * (s_w - r_w) / |y_w| - beta * (s_l - r_l) / |y_l|
//! ```
//!
//! where `s` are policy log-probabilities and `r` reference log-probabilities.
//! Derivatives are returned with respect to `s_w` and `s_l` so the trainer can
//! chain them through the policy's own gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dpo,
    Simpo,
    Lndpo,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Dpo, Method::Simpo, Method::Lndpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Simpo => "simpo",
            Method::Lndpo => "lndpo",
        }
    }

    pub fn uses_reference(self) -> bool {
        !matches!(self, Method::Simpo)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(Method::Dpo),
            "simpo" => Ok(Method::Simpo),
            "lndpo" | "ln-dpo" => Ok(Method::Lndpo),
            other => Err(Error::domain(format!("unknown method `{other}`"))),
        }
    }
}

/// Method tag plus its hyperparameters. `gamma` is present iff the method is SimPO.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub method: Method,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl ObjectiveConfig {
    pub fn dpo(beta: f64) -> Self {
        Self { method: Method::Dpo, beta, gamma: None }
    }

    pub fn simpo(beta: f64, gamma: f64) -> Self {
        Self { method: Method::Simpo, beta, gamma: Some(gamma) }
    }

    pub fn lndpo(beta: f64) -> Self {
        Self { method: Method::Lndpo, beta, gamma: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive and finite"));
        }
        match (self.method, self.gamma) {
            (Method::Simpo, Some(g)) if g >= 0.0 && g.is_finite() => Ok(()),
            (Method::Simpo, Some(_)) => Err(Error::config("gamma", "must be nonnegative and finite")),
            (Method::Simpo, None) => Err(Error::config("gamma", "SimPO requires a target margin")),
            (_, Some(_)) => Err(Error::config("gamma", "only SimPO takes a target margin")),
            (_, None) => Ok(()),
        }
    }

    pub fn evaluate(&self, p: &PairLogProbs) -> Result<LossEval> {
        self.validate()?;
        match self.method {
            Method::Dpo => dpo_loss(p, self.beta),
            Method::Simpo => simpo_loss(p, self.beta, self.gamma.unwrap_or_default()),
            Method::Lndpo => lndpo_loss(p, self.beta),
        }
    }
}

/// Everything a loss needs about one preference pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLogProbs {
    pub s_w_theta: f64,
    pub s_l_theta: f64,
    pub s_w_ref: Option<f64>,
    pub s_l_ref: Option<f64>,
    pub len_w: usize,
    pub len_l: usize,
}

impl PairLogProbs {
    fn refs(&self) -> Result<(f64, f64)> {
        match (self.s_w_ref, self.s_l_ref) {
            (Some(w), Some(l)) => Ok((w, l)),
            _ => Err(Error::config("reference", "objective needs reference log-probabilities")),
        }
    }

    fn lengths(&self) -> Result<(f64, f64)> {
        if self.len_w == 0 || self.len_l == 0 {
            return Err(Error::domain("response lengths must be at least 1"));
        }
        Ok((self.len_w as f64, self.len_l as f64))
    }
}

/// Loss value, its margin, and derivatives w.r.t. the policy log-probabilities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub margin: f64,
    pub d_s_w_theta: f64,
    pub d_s_l_theta: f64,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(-z)` with derivatives, given `dz/ds_w` and `dz/ds_l`.
fn logistic_loss(z: f64, dz_dw: f64, dz_dl: f64) -> LossEval {
    let weight = sigmoid(-z);
    LossEval {
        loss: softplus(-z),
        margin: z,
        d_s_w_theta: -weight * dz_dw,
        d_s_l_theta: -weight * dz_dl,
    }
}

pub fn dpo_loss(p: &PairLogProbs, beta: f64) -> Result<LossEval> {
    let (r_w, r_l) = p.refs()?;
    let z = beta * ((p.s_w_theta - r_w) - (p.s_l_theta - r_l));
    Ok(logistic_loss(z, beta, -beta))
}

pub fn simpo_loss(p: &PairLogProbs, beta: f64, gamma: f64) -> Result<LossEval> {
    let (len_w, len_l) = p.lengths()?;
    let (a_w, a_l) = (beta / len_w, beta / len_l);
    let z = a_w * p.s_w_theta - a_l * p.s_l_theta - gamma;
    Ok(logistic_loss(z, a_w, -a_l))
}

pub fn lndpo_loss(p: &PairLogProbs, beta: f64) -> Result<LossEval> {
    let (r_w, r_l) = p.refs()?;
    let (len_w, len_l) = p.lengths()?;
    let (a_w, a_l) = (beta / len_w, beta / len_l);
    let z = a_w * (p.s_w_theta - r_w) - a_l * (p.s_l_theta - r_l);
    Ok(logistic_loss(z, a_w, -a_l))
}

/// Per-pair margin under which SimPO reproduces LN-DPO:
/// `beta * (r_w / |y_w| - r_l / |y_l|)`.
pub fn adaptive_margin(p: &PairLogProbs, beta: f64) -> Result<f64> {
    let (r_w, r_l) = p.refs()?;
    let (len_w, len_l) = p.lengths()?;
    Ok(beta * (r_w / len_w - r_l / len_l))
}

/// `log pi_theta(y|x) - log pi_ref(y|x)`.
pub fn implicit_reward(s_theta: f64, s_ref: f64) -> f64 {
    s_theta - s_ref
}
