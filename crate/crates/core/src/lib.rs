//! Deterministic simulator for personalized federated prompt learning.
//!
//! Each client holds global and local prompts for both the text and the
//! vision branch of a frozen dual encoder, fuses them with its own
//! cross-attention modules, and ships only the global prompts to the server,
//! which averages them by sample count.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: dense tensors and a reverse-mode tape.
//! - [`encoder`]: the frozen encoder and similarity classification head.
//! - [`prompts`]: prompt containers, cross-attention fusion, binary records.
//! - [`data`]: synthetic data and heterogeneity partitions.
//! - [`federation`]: client training, aggregation, the round loop.
//! - [`harness`]: experiment plans, sweeps, summaries.

pub mod data;
pub mod encoder;
pub mod error;
pub mod federation;
pub mod harness;
pub mod numerics;
pub mod prompts;
pub mod seed;

pub use error::{Error, Result};
