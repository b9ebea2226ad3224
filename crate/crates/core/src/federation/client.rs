use rand::seq::SliceRandom;

use super::{FederationConfig, Fusion, GlobalState, Method, DIVERGENCE_LIMIT};
use crate::data::{Dataset, Sample};
use crate::encoder::{argmax_rows, predict_probs_node, FrozenEncoder};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, Graph, NodeId, Tensor2};
use crate::prompts::{fuse_node, mean_fuse_node, AttentionIds, CrossAttention, DualPromptSet, PromptTensor};
use crate::seed::{derived_rng, Stream};

/// Names one trainable tensor of a client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    GlobalText,
    LocalText,
    GlobalVision,
    LocalVision,
    /// Index into `[w_q, w_k, w_v, w_o]`.
    AttnText(usize),
    AttnVision(usize),
}

impl Slot {
    pub fn name(self) -> String {
        const MAPS: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];
        match self {
            Slot::GlobalText => "global_text".into(),
            Slot::LocalText => "local_text".into(),
            Slot::GlobalVision => "global_vision".into(),
            Slot::LocalVision => "local_vision".into(),
            Slot::AttnText(i) => format!("attn_text.{}", MAPS[i]),
            Slot::AttnVision(i) => format!("attn_vision.{}", MAPS[i]),
        }
    }
}

/// Every trainable tensor one client touches.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientParams {
    pub prompts: DualPromptSet,
    pub attn_text: CrossAttention,
    pub attn_vision: CrossAttention,
}

impl ClientParams {
    pub fn get(&self, slot: Slot) -> &Tensor2 {
        match slot {
            Slot::GlobalText => self.prompts.global_text.values(),
            Slot::LocalText => self.prompts.local_text.values(),
            Slot::GlobalVision => self.prompts.global_vision.values(),
            Slot::LocalVision => self.prompts.local_vision.values(),
            Slot::AttnText(i) => self.attn_text.tensors()[i],
            Slot::AttnVision(i) => self.attn_vision.tensors()[i],
        }
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut Tensor2 {
        match slot {
            Slot::GlobalText => self.prompts.global_text.values_mut(),
            Slot::LocalText => self.prompts.local_text.values_mut(),
            Slot::GlobalVision => self.prompts.global_vision.values_mut(),
            Slot::LocalVision => self.prompts.local_vision.values_mut(),
            Slot::AttnText(i) => self.attn_text.tensors_mut().into_iter().nth(i).expect("index < 4"),
            Slot::AttnVision(i) => self.attn_vision.tensors_mut().into_iter().nth(i).expect("index < 4"),
        }
    }

    /// Disjoint mutable borrows of every slot.
    fn slots_mut(&mut self) -> Vec<(Slot, &mut Tensor2)> {
        let ClientParams {
            prompts,
            attn_text,
            attn_vision,
        } = self;
        let mut out = vec![
            (Slot::GlobalText, prompts.global_text.values_mut()),
            (Slot::LocalText, prompts.local_text.values_mut()),
            (Slot::GlobalVision, prompts.global_vision.values_mut()),
            (Slot::LocalVision, prompts.local_vision.values_mut()),
        ];
        out.extend(
            attn_text
                .tensors_mut()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (Slot::AttnText(i), t)),
        );
        out.extend(
            attn_vision
                .tensors_mut()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (Slot::AttnVision(i), t)),
        );
        out
    }

    /// Tensors that never leave the client: local prompts and attention.
    pub fn private_tensors(&self) -> Vec<&Tensor2> {
        let mut out = vec![self.prompts.local_text.values(), self.prompts.local_vision.values()];
        out.extend(self.attn_text.tensors());
        out.extend(self.attn_vision.tensors());
        out
    }

    /// Checkpoint order: four prompts, then text and vision attention maps.
    pub fn checkpoint_tensors(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = self.prompts.tensors().to_vec();
        out.extend(self.attn_text.tensors());
        out.extend(self.attn_vision.tensors());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Indices into the training split.
    pub shard: Vec<usize>,
    /// Indices into the test split.
    pub test: Vec<usize>,
    /// Evaluation weight of each entry of `test`; they sum to 1.
    pub test_weights: Vec<f64>,
    /// `prompts.global_*` hold this client's latest working copies.
    pub params: ClientParams,
}

impl ClientState {
    pub fn n_k(&self) -> usize {
        self.shard.len()
    }
}

#[allow(clippy::too_many_arguments)]
fn bind_branch(
    g: &mut Graph,
    fusion: Fusion,
    global: &PromptTensor,
    local: &PromptTensor,
    attn: &CrossAttention,
    trainable: bool,
    slots: (Slot, Slot, fn(usize) -> Slot),
    bound: &mut Vec<(Slot, NodeId)>,
) -> Result<NodeId> {
    let mut leaf = |g: &mut Graph, slot: Slot, value: &Tensor2| {
        let id = if trainable {
            g.param(value.clone())
        } else {
            g.constant(value.clone())
        };
        bound.push((slot, id));
        id
    };
    let (global_slot, local_slot, attn_slot) = slots;
    match fusion {
        Fusion::GlobalOnly => Ok(leaf(g, global_slot, global.values())),
        Fusion::LocalOnly => Ok(leaf(g, local_slot, local.values())),
        Fusion::Mean => {
            let gp = leaf(g, global_slot, global.values());
            let lp = leaf(g, local_slot, local.values());
            mean_fuse_node(g, gp, lp)
        }
        Fusion::Attention => {
            let gp = leaf(g, global_slot, global.values());
            let lp = leaf(g, local_slot, local.values());
            let maps = attn.tensors();
            let ids: Vec<NodeId> = (0..4).map(|i| leaf(g, attn_slot(i), maps[i])).collect();
            let attn_ids = AttentionIds {
                w_q: ids[0],
                w_k: ids[1],
                w_v: ids[2],
                w_o: ids[3],
            };
            fuse_node(g, attn_ids, gp, lp)
        }
    }
}

/// Builds the class probabilities `B × C` for a batch of raw inputs under
/// `method`. Returns the probability node and the leaf of every parameter the
/// method uses, in slot order.
pub fn batch_forward(
    g: &mut Graph,
    encoder: &FrozenEncoder,
    params: &ClientParams,
    method: Method,
    trainable: bool,
    inputs: &[&[f64]],
    tau: f64,
) -> Result<(NodeId, Vec<(Slot, NodeId)>)> {
    let mut bound = Vec::new();
    let p = &params.prompts;
    let text = bind_branch(
        g,
        method.text_fusion(),
        &p.global_text,
        &p.local_text,
        &params.attn_text,
        trainable,
        (Slot::GlobalText, Slot::LocalText, Slot::AttnText),
        &mut bound,
    )?;
    let vision = bind_branch(
        g,
        method.vision_fusion(),
        &p.global_vision,
        &p.local_vision,
        &params.attn_vision,
        trainable,
        (Slot::GlobalVision, Slot::LocalVision, Slot::AttnVision),
        &mut bound,
    )?;
    let mut enc = encoder.bind(g);
    let classes = enc.class_embeddings(g, text)?;
    let images = enc.encode_images(g, vision, inputs.iter().copied())?;
    let probs = predict_probs_node(g, images, classes, tau)?;
    bound.sort_by_key(|(slot, _)| *slot);
    Ok((probs, bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStats {
    /// Mean pre-step batch loss over the local iterations.
    pub mean_loss: f64,
    /// Pre-step batch accuracy pooled over the local iterations.
    pub accuracy: f64,
    pub iterations: usize,
}

/// What a client hands back after a round of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub client: usize,
    pub n_k: usize,
    pub global_text: PromptTensor,
    pub global_vision: PromptTensor,
    pub stats: TrainStats,
}

/// One round of local training for `client`.
///
/// The broadcast global prompts are copied into the client's working copies;
/// local prompts and attention resume from the previous round. Each of the
/// `E` iterations takes the next mini-batch of a per-(client, round) shuffle
/// of the shard, cycling when it runs out, and applies one SGD step to every
/// parameter the method uses.
pub fn local_train(
    client: &mut ClientState,
    global: &GlobalState,
    cfg: &FederationConfig,
    encoder: &FrozenEncoder,
    dataset: &Dataset,
) -> Result<LocalUpdate> {
    if client.shard.is_empty() {
        return Err(Error::Config(format!("client {} has an empty shard", client.id)));
    }
    if cfg.method.communicates() {
        client.params.prompts.global_text.copy_from(&global.text)?;
        client.params.prompts.global_vision.copy_from(&global.vision)?;
    }

    let mut order = client.shard.clone();
    order.shuffle(&mut derived_rng(
        cfg.master_seed,
        Stream::MiniBatch,
        client.id as u64,
        global.round as u64,
    ));
    let n = order.len();
    let batch = cfg.batch_size.min(n);

    let mut loss_total = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for it in 0..cfg.local_iters {
        let samples: Vec<&Sample> = (0..batch)
            .map(|j| &dataset.train[order[(it * batch + j) % n]])
            .collect();
        let inputs: Vec<&[f64]> = samples.iter().map(|s| s.raw.as_slice()).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();

        let mut g = Graph::new();
        let (probs, bound) = batch_forward(&mut g, encoder, &client.params, cfg.method, true, &inputs, cfg.tau)?;
        let loss = g.nll_rows(probs, &labels)?;
        let value = g.value(loss).get(0, 0);
        if !value.is_finite() || value > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                client: client.id,
                iteration: it,
                loss: value,
            });
        }
        loss_total += value;
        correct += argmax_rows(g.value(probs))
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
        seen += labels.len();

        let grads = g.backward(loss)?;
        let ids: std::collections::BTreeMap<Slot, NodeId> = bound.into_iter().collect();
        let params = client
            .params
            .slots_mut()
            .into_iter()
            .filter_map(|(slot, t)| ids.get(&slot).map(|id| (*id, t)));
        sgd_step(params, &grads, cfg.eta)?;
    }

    Ok(LocalUpdate {
        client: client.id,
        n_k: n,
        global_text: client.params.prompts.global_text.clone(),
        global_vision: client.params.prompts.global_vision.clone(),
        stats: TrainStats {
            mean_loss: loss_total / cfg.local_iters as f64,
            accuracy: correct as f64 / seen as f64,
            iterations: cfg.local_iters,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy of `client` on `samples`, using the
/// current server prompts as the global half.
pub fn evaluate(
    client: &ClientState,
    global: &GlobalState,
    samples: &[&Sample],
    method: Method,
    tau: f64,
    encoder: &FrozenEncoder,
) -> Result<Evaluation> {
    let uniform = vec![1.0; samples.len()];
    evaluate_weighted(client, global, samples, &uniform, method, tau, encoder)
}

/// [`evaluate`] with a non-negative weight per sample; accuracy and loss are
/// weighted means.
pub fn evaluate_weighted(
    client: &ClientState,
    global: &GlobalState,
    samples: &[&Sample],
    weights: &[f64],
    method: Method,
    tau: f64,
    encoder: &FrozenEncoder,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config(format!("client {} has no test samples", client.id)));
    }
    if weights.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} samples",
            weights.len(),
            samples.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || total <= 0.0 {
        return Err(Error::Contract(
            "evaluation weights must be non-negative with a positive sum".into(),
        ));
    }
    let mut params = client.params.clone();
    if method.communicates() {
        params.prompts.global_text.copy_from(&global.text)?;
        params.prompts.global_vision.copy_from(&global.vision)?;
    }
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.raw.as_slice()).collect();
    let mut g = Graph::new();
    let (probs, _) = batch_forward(&mut g, encoder, &params, method, false, &inputs, tau)?;
    let probs = g.value(probs);
    let predicted = argmax_rows(probs);
    let (mut hits, mut loss) = (0.0, 0.0);
    for (i, (s, w)) in samples.iter().zip(weights).enumerate() {
        if predicted[i] == s.label {
            hits += w;
        }
        loss -= w * probs.get(i, s.label).ln();
    }
    Ok(Evaluation {
        accuracy: hits / total,
        loss: loss / total,
    })
}
