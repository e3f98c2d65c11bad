//! Desk-scale preference optimization: DPO, SimPO and LN-DPO trained on a
//! tabular autoregressive policy over a synthetic task, with the evaluation
//! metrics and sweep analytics used to compare them.

pub mod config;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod seed;
pub mod sweep;
pub mod synthenv;
pub mod trainer;

pub use error::{Error, Result};
