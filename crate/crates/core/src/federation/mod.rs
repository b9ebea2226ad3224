//! Client-local training, server aggregation, and the round loop.

mod client;
mod log;
mod run;
mod server;

pub use client::{
    batch_forward, evaluate, evaluate_weighted, local_train, ClientParams, ClientState, Evaluation, LocalUpdate, Slot,
    TrainStats,
};
pub(crate) use log::mean_std;
pub use log::{RoundLog, RoundRecord, RoundSummary, Split, CSV_HEADER};
pub use run::{
    client_test_set, run_federation, run_federation_with_channel, FederationOutcome, MessageChannel, NullChannel, Setup,
};
pub use server::{
    aggregate, aggregation_weights, decode_message, encode_message, participants, sample_clients, ClientMessage,
    GlobalState,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss above which local training is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Training method; variants switch off parts of the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Cross-attention fusion on both branches.
    Pfeddc,
    /// Only the global prompts exist; plain prompt averaging.
    GlobalOnly,
    /// Only local prompts, no communication.
    LocalOnly,
    /// Both branches fuse by elementwise mean.
    NoFusion,
    /// Attention on the text branch, mean on the vision branch.
    TextAttnOnly,
    /// Attention on the vision branch, mean on the text branch.
    VisionAttnOnly,
}

/// How one branch turns its (global, local) pair into the encoder prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Attention,
    Mean,
    GlobalOnly,
    LocalOnly,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pfeddc,
        Method::GlobalOnly,
        Method::LocalOnly,
        Method::NoFusion,
        Method::TextAttnOnly,
        Method::VisionAttnOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pfeddc => "pfeddc",
            Method::GlobalOnly => "global-only",
            Method::LocalOnly => "local-only",
            Method::NoFusion => "no-fusion",
            Method::TextAttnOnly => "text-attn-only",
            Method::VisionAttnOnly => "vision-attn-only",
        }
    }

    pub fn text_fusion(self) -> Fusion {
        match self {
            Method::Pfeddc | Method::TextAttnOnly => Fusion::Attention,
            Method::NoFusion | Method::VisionAttnOnly => Fusion::Mean,
            Method::GlobalOnly => Fusion::GlobalOnly,
            Method::LocalOnly => Fusion::LocalOnly,
        }
    }

    pub fn vision_fusion(self) -> Fusion {
        match self {
            Method::Pfeddc | Method::VisionAttnOnly => Fusion::Attention,
            Method::NoFusion | Method::TextAttnOnly => Fusion::Mean,
            Method::GlobalOnly => Fusion::GlobalOnly,
            Method::LocalOnly => Fusion::LocalOnly,
        }
    }

    /// Whether clients send global-prompt copies and the server aggregates.
    pub fn communicates(self) -> bool {
        self != Method::LocalOnly
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// K
    pub clients: usize,
    /// T
    pub rounds: usize,
    /// R, fraction of clients sampled per round.
    pub participation: f64,
    /// E, local SGD iterations per round.
    pub local_iters: usize,
    pub eta: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub method: Method,
    pub master_seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            rounds: 20,
            participation: 1.0,
            local_iters: 5,
            eta: 0.01,
            tau: 0.05,
            batch_size: 32,
            method: Method::Pfeddc,
            master_seed: 0,
        }
    }
}

impl FederationConfig {
    /// Every violated invariant, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            p.push(format!("participation must be in (0, 1], got {}", self.participation));
        }
        for (name, v) in [
            ("clients", self.clients),
            ("rounds", self.rounds),
            ("local_iters", self.local_iters),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                p.push(format!("{name} must be >= 1"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            p.push(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            p.push(format!("tau must be > 0, got {}", self.tau));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!(matches!("fedavg".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_switches() {
        assert_eq!(Method::TextAttnOnly.text_fusion(), Fusion::Attention);
        assert_eq!(Method::TextAttnOnly.vision_fusion(), Fusion::Mean);
        assert_eq!(Method::VisionAttnOnly.text_fusion(), Fusion::Mean);
        assert_eq!(Method::VisionAttnOnly.vision_fusion(), Fusion::Attention);
        assert!(!Method::LocalOnly.communicates());
        assert!(Method::GlobalOnly.communicates());
    }

    #[test]
    fn config_problems_listed() {
        let cfg = FederationConfig {
            participation: 1.5,
            rounds: 0,
            tau: 0.0,
            ..FederationConfig::default()
        };
        let p = cfg.problems();
        assert_eq!(p.len(), 3, "{p:?}");
        assert!(p[0].contains("participation"));
        assert!(FederationConfig::default().validate().is_ok());
    }
}
