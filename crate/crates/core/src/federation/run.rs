use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::client::{evaluate_weighted, local_train, ClientParams, ClientState};
use super::log::{RoundLog, RoundRecord, Split};
use super::server::{aggregate, decode_message, encode_message, sample_clients, ClientMessage, GlobalState};
use super::FederationConfig;
use crate::data::{Dataset, Sample};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::prompts::{init_global_prompts, init_prompts, CrossAttention, PromptShape};
use crate::seed::{derive_seed, Stream};

/// Everything a run reads but never changes.
#[derive(Clone, Copy)]
pub struct Setup<'a> {
    pub encoder: &'a FrozenEncoder,
    pub dataset: &'a Dataset,
    /// Training-sample indices per client.
    pub shards: &'a [Vec<usize>],
    pub prompt_shape: PromptShape,
}

/// Observes every serialized client → server message.
pub trait MessageChannel {
    fn observe(&mut self, round: usize, client: usize, bytes: &[u8]);
}

pub struct NullChannel;

impl MessageChannel for NullChannel {
    fn observe(&mut self, _: usize, _: usize, _: &[u8]) {}
}

#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub log: RoundLog,
    pub global: GlobalState,
    /// Final personalized state of every client, by id.
    pub clients: Vec<ClientState>,
    pub messages_sent: usize,
}

/// A client's personalized test set: every test sample from a (domain, class)
/// cell the client trains on, weighted so the cells count in proportion to
/// the client's own training data. Weights sum to 1.
pub fn client_test_set(dataset: &Dataset, shard: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let mut train_cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &i in shard {
        let s = &dataset.train[i];
        *train_cells.entry((s.domain, s.label)).or_default() += 1;
    }
    let mut test_cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for s in &dataset.test {
        if train_cells.contains_key(&(s.domain, s.label)) {
            *test_cells.entry((s.domain, s.label)).or_default() += 1;
        }
    }
    let n = shard.len() as f64;
    dataset
        .test
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let cell = (s.domain, s.label);
            let held = *train_cells.get(&cell)? as f64;
            Some((i, held / (n * test_cells[&cell] as f64)))
        })
        .unzip()
}

fn init_clients(cfg: &FederationConfig, setup: &Setup) -> Result<Vec<ClientState>> {
    let d = setup.prompt_shape.d;
    setup
        .shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let seed = |branch| derive_seed(cfg.master_seed, Stream::Attention, k as u64, branch);
            let (test, test_weights) = client_test_set(setup.dataset, shard);
            Ok(ClientState {
                id: k,
                shard: shard.clone(),
                test,
                test_weights,
                params: ClientParams {
                    prompts: init_prompts(cfg.master_seed, k, setup.prompt_shape)?,
                    attn_text: CrossAttention::init(seed(0), d)?,
                    attn_vision: CrossAttention::init(seed(1), d)?,
                },
            })
        })
        .collect()
}

fn check_setup(cfg: &FederationConfig, setup: &Setup) -> Result<()> {
    cfg.validate()?;
    setup.prompt_shape.validate()?;
    if setup.shards.len() != cfg.clients {
        return Err(Error::Config(format!(
            "config has {} clients but the partition has {}",
            cfg.clients,
            setup.shards.len()
        )));
    }
    if setup.prompt_shape.d != setup.encoder.dims().d {
        return Err(Error::Config(format!(
            "prompt width {} differs from encoder width {}",
            setup.prompt_shape.d,
            setup.encoder.dims().d
        )));
    }
    if setup.encoder.num_classes() != setup.dataset.spec.num_classes {
        return Err(Error::Config("encoder and dataset disagree on class count".into()));
    }
    let n = setup.dataset.train.len();
    for (k, shard) in setup.shards.iter().enumerate() {
        if shard.is_empty() {
            return Err(Error::Config(format!("client {k} has an empty shard")));
        }
        if let Some(bad) = shard.iter().find(|&&i| i >= n) {
            return Err(Error::Domain(format!("client {k} references sample {bad} of {n}")));
        }
    }
    Ok(())
}

pub fn run_federation(cfg: &FederationConfig, setup: &Setup) -> Result<FederationOutcome> {
    run_federation_with_channel(cfg, setup, &mut NullChannel)
}

/// The full round loop: sample, broadcast, train locally, aggregate, evaluate.
///
/// Local training of the sampled clients runs in parallel; every reduction
/// happens afterwards in ascending client id, so the outcome does not depend
/// on scheduling. Each round logs one `train` row per participant and one
/// `test` row per client.
pub fn run_federation_with_channel(
    cfg: &FederationConfig,
    setup: &Setup,
    channel: &mut dyn MessageChannel,
) -> Result<FederationOutcome> {
    check_setup(cfg, setup)?;
    let (text, vision) = init_global_prompts(cfg.master_seed, setup.prompt_shape)?;
    let mut global = GlobalState { round: 0, text, vision };
    let mut clients = init_clients(cfg, setup)?;
    let mut log = RoundLog {
        method: Some(cfg.method),
        seed: cfg.master_seed,
        ..RoundLog::default()
    };
    let mut messages_sent = 0;

    for round in 1..=cfg.rounds {
        let round_seed = derive_seed(cfg.master_seed, Stream::ClientSampling, 0, round as u64);
        let selected: BTreeSet<usize> = sample_clients(cfg.clients, cfg.participation, round_seed)
            .into_iter()
            .collect();

        let broadcast = &global;
        let updates = clients
            .par_iter_mut()
            .filter(|c| selected.contains(&c.id))
            .map(|c| local_train(c, broadcast, cfg, setup.encoder, setup.dataset))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;

        for u in &updates {
            log.records.push(RoundRecord {
                round,
                client_id: u.client,
                split: Split::Train,
                loss: u.stats.mean_loss,
                accuracy: u.stats.accuracy,
            });
        }

        if cfg.method.communicates() {
            let mut received = Vec::with_capacity(updates.len());
            for u in &updates {
                let bytes = encode_message(&ClientMessage {
                    client: u.client,
                    n_k: u.n_k,
                    text: u.global_text.values().clone(),
                    vision: u.global_vision.values().clone(),
                });
                channel.observe(round, u.client, &bytes);
                messages_sent += 1;
                received.push(decode_message(&bytes)?);
            }
            let (text, vision) = aggregate(&received)?;
            global.text.values_mut().copy_from(&text)?;
            global.vision.values_mut().copy_from(&vision)?;
        }
        global.round = round;

        let evals = clients
            .par_iter()
            .map(|c| {
                let samples: Vec<&Sample> = c.test.iter().map(|&i| &setup.dataset.test[i]).collect();
                evaluate_weighted(
                    c,
                    &global,
                    &samples,
                    &c.test_weights,
                    cfg.method,
                    cfg.tau,
                    setup.encoder,
                )
                .map(|e| (c.id, e))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        for (client_id, e) in evals {
            log.records.push(RoundRecord {
                round,
                client_id,
                split: Split::Test,
                loss: e.loss,
                accuracy: e.accuracy,
            });
        }
        log.close_round(round);
    }

    Ok(FederationOutcome {
        log,
        global,
        clients,
        messages_sent,
    })
}
