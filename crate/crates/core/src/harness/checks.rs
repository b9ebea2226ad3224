use std::fmt;

use serde::Serialize;

use crate::data::{dirichlet_partition, generate_dataset, PartitionStats, SyntheticDatasetSpec};
use crate::encoder::{EncoderDims, FrozenEncoder};
use crate::error::Result;
use crate::federation::{batch_forward, ClientParams, Method, Slot};
use crate::numerics::{finite_diff_grad, max_relative_error, Graph, NodeId, Tensor2};
use crate::prompts::{init_prompts, CrossAttention, PromptShape};
use crate::seed::{derive_seed, rng_from, Stream};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error; gradient entries below this
/// magnitude are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub parameter: String,
    pub max_relative_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_relative_error() <= GRADCHECK_TOLERANCE
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<20} rel err {:.3e}   max |grad| {:.3e}",
                e.parameter, e.max_relative_error, e.max_abs_gradient
            )?;
        }
        write!(
            f,
            "max rel err {:.3e} (tolerance {:.0e}): {}",
            self.max_relative_error(),
            GRADCHECK_TOLERANCE,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub const GRADCHECK_SLOTS: [Slot; 12] = [
    Slot::GlobalText,
    Slot::LocalText,
    Slot::GlobalVision,
    Slot::LocalVision,
    Slot::AttnText(0),
    Slot::AttnText(1),
    Slot::AttnText(2),
    Slot::AttnText(3),
    Slot::AttnVision(0),
    Slot::AttnVision(1),
    Slot::AttnVision(2),
    Slot::AttnVision(3),
];

/// Full-method batch loss against central differences for all twelve
/// trainable tensors: d = 8, four-token prompts, n_tok = 4, depth 2, four
/// classes, 16-dimensional inputs, a batch of six.
///
/// Prompts are drawn at unit-ish scale and `W_o` is made non-zero so that
/// every path, including the attention maps, carries gradient.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let dims = EncoderDims {
        d: 8,
        n_tok: 4,
        depth: 2,
        raw_dim: 16,
        num_classes: 4,
    };
    let shape = PromptShape {
        text_len: 4,
        vision_len: 4,
        d: 8,
    };
    let encoder = FrozenEncoder::new(seed, dims)?;
    let data = generate_dataset(&SyntheticDatasetSpec {
        num_classes: 4,
        num_domains: 2,
        samples_per_class_per_domain: 5,
        raw_dim: 16,
        sep: 1.0,
        noise: 0.5,
        seed,
    })?;
    let batch: Vec<_> = data.train.iter().step_by(5).take(6).collect();
    let inputs: Vec<&[f64]> = batch.iter().map(|s| s.raw.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

    let mut params = ClientParams {
        prompts: init_prompts(seed, 0, shape)?,
        attn_text: CrossAttention::init(derive_seed(seed, Stream::Attention, 0, 0), 8)?,
        attn_vision: CrossAttention::init(derive_seed(seed, Stream::Attention, 0, 1), 8)?,
    };
    let mut rng = rng_from(derive_seed(seed, Stream::Attention, 1, 0));
    for slot in GRADCHECK_SLOTS {
        let t = params.get_mut(slot);
        let std = match slot {
            Slot::AttnText(3) | Slot::AttnVision(3) => 0.3,
            Slot::AttnText(_) | Slot::AttnVision(_) => 0.0,
            _ => 0.5,
        };
        if std > 0.0 {
            let (r, c) = t.shape();
            *t = Tensor2::gaussian(r, c, std, &mut rng);
        }
    }

    type Forward = (Graph, NodeId, Vec<(Slot, NodeId)>);
    let loss_of = |p: &ClientParams, trainable: bool| -> Result<Forward> {
        let mut g = Graph::new();
        let (probs, bound) = batch_forward(&mut g, &encoder, p, Method::Pfeddc, trainable, &inputs, 0.05)?;
        let loss = g.nll_rows(probs, &labels)?;
        Ok((g, loss, bound))
    };

    let (g, loss, bound) = loss_of(&params, true)?;
    let grads = g.backward(loss)?;
    let mut entries = Vec::new();
    for slot in GRADCHECK_SLOTS {
        let id = bound
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|(_, id)| *id)
            .expect("pfeddc binds every slot");
        let analytic = grads.get(id).expect("reachable parameter").clone();
        let x = params.get(slot).clone();
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |v| {
                probe.get_mut(slot).copy_from(v)?;
                let (g, loss, _) = loss_of(&probe, false)?;
                Ok(g.value(loss).get(0, 0))
            },
            &x,
            GRADCHECK_STEP,
        )?;
        entries.push(GradcheckEntry {
            parameter: slot.name(),
            max_relative_error: max_relative_error(&analytic, &numeric, GRADCHECK_FLOOR),
            max_abs_gradient: analytic.max_abs(),
        });
    }
    Ok(GradcheckReport { entries })
}

/// The dataset `partition-stats` splits: 10 classes, one domain, 100
/// training samples per class.
pub fn stats_dataset_spec(seed: u64) -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        num_classes: 10,
        num_domains: 1,
        samples_per_class_per_domain: 125,
        raw_dim: 4,
        sep: 1.0,
        noise: 0.1,
        seed,
    }
}

/// Label-skew statistics of a Dirichlet split of [`stats_dataset_spec`].
pub fn partition_stats(beta: f64, clients: usize, seed: u64) -> Result<PartitionStats> {
    let spec = stats_dataset_spec(seed);
    let data = generate_dataset(&spec)?;
    let labels = data.train_labels();
    let shards = dirichlet_partition(&labels, clients, beta, seed)?;
    Ok(PartitionStats::compute(&labels, &shards, spec.num_classes))
}
