//! Invariant feature selection for cross-sectional stock-return prediction.
//!
//! The crate trains a binary feature mask so that the features it keeps
//! predict next-period returns consistently across date-defined market
//! environments. Two twin prediction modules — one that sees an environment
//! code, one that does not — are trained alternately with a feature-selection
//! phase that shrinks the gap between them. Around that sit a panel-data
//! pipeline, a synthetic market generator with planted invariant structure,
//! IC-family evaluation metrics, and a TopK backtester that models China
//! price-limit rules and US long-short execution.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
