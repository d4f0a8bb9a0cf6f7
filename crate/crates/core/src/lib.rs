//! Unsupervised detection of outlier events in temporal point process data.
//!
//! A generator agent reads a (possibly corrupted) event sequence and decides,
//! event by event, whether to remove it. A discriminator tries to tell the
//! generator's corrected sequences from the observed ones; its score on the
//! corrected sequence is the generator's reward. The generator's per-event
//! removal probability is the outlier score.

pub mod agent;
pub mod baselines;
pub mod config;
pub mod discriminator;
pub mod error;
pub mod evalkit;
pub mod neural;
pub mod seqdata;
pub mod tppsim;
pub mod train;

pub use error::{Error, Result};
