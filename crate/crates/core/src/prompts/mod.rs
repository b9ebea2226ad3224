//! Prompt containers and per-client cross-attention fusion.

mod record;

pub use record::{decode_record, encode_record, RECORD_MAGIC, RECORD_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor2};
use crate::seed::{derived_rng, Stream};

const PROMPT_INIT_STD: f64 = 0.02;

/// `L × d` block of learnable prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTensor(Tensor2);

impl PromptTensor {
    pub fn new(values: Tensor2) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 || !values.is_finite() {
            return Err(Error::Config(format!(
                "prompt must be a finite non-empty matrix, got {:?}",
                values.shape()
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Tensor2 {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Tensor2 {
        &mut self.0
    }

    pub fn into_values(self) -> Tensor2 {
        self.0
    }

    /// Overwrites `self` with `src`; the two never share storage.
    pub fn copy_from(&mut self, src: &PromptTensor) -> Result<()> {
        self.0.copy_from(&src.0)
    }
}

/// Prompt lengths and token width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptShape {
    pub text_len: usize,
    pub vision_len: usize,
    pub d: usize,
}

impl Default for PromptShape {
    fn default() -> Self {
        Self {
            text_len: 4,
            vision_len: 4,
            d: 8,
        }
    }
}

impl PromptShape {
    pub fn validate(&self) -> Result<()> {
        if self.text_len == 0 || self.vision_len == 0 || self.d == 0 {
            return Err(Error::Config(format!("prompt shape must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Global and local prompts for both branches of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPromptSet {
    pub global_text: PromptTensor,
    pub local_text: PromptTensor,
    pub global_vision: PromptTensor,
    pub local_vision: PromptTensor,
}

/// Round-0 global prompts, shared by every client of a run.
pub fn init_global_prompts(master_seed: u64, shape: PromptShape) -> Result<(PromptTensor, PromptTensor)> {
    shape.validate()?;
    let mut rng = derived_rng(master_seed, Stream::GlobalPrompt, 0, 0);
    let text = Tensor2::gaussian(shape.text_len, shape.d, PROMPT_INIT_STD, &mut rng);
    let vision = Tensor2::gaussian(shape.vision_len, shape.d, PROMPT_INIT_STD, &mut rng);
    Ok((PromptTensor(text), PromptTensor(vision)))
}

/// Prompts for `client`: the shared global pair plus a per-client local pair.
pub fn init_prompts(master_seed: u64, client: usize, shape: PromptShape) -> Result<DualPromptSet> {
    let (global_text, global_vision) = init_global_prompts(master_seed, shape)?;
    let mut rng = derived_rng(master_seed, Stream::LocalPrompt, client as u64, 0);
    let local_text = Tensor2::gaussian(shape.text_len, shape.d, PROMPT_INIT_STD, &mut rng);
    let local_vision = Tensor2::gaussian(shape.vision_len, shape.d, PROMPT_INIT_STD, &mut rng);
    Ok(DualPromptSet {
        global_text,
        local_text: PromptTensor(local_text),
        global_vision,
        local_vision: PromptTensor(local_vision),
    })
}

impl DualPromptSet {
    pub fn tensors(&self) -> [&Tensor2; 4] {
        [
            self.global_text.values(),
            self.local_text.values(),
            self.global_vision.values(),
            self.local_vision.values(),
        ]
    }
}

/// Single-head cross-attention with a residual, zero-initialized output map.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
}

impl CrossAttention {
    pub fn init(seed: u64, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("attention width must be >= 1".into()));
        }
        let mut rng = crate::seed::rng_from(seed);
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_q: Tensor2::gaussian(d, d, std, &mut rng),
            w_k: Tensor2::gaussian(d, d, std, &mut rng),
            w_v: Tensor2::gaussian(d, d, std, &mut rng),
            w_o: Tensor2::zeros(d, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn tensors(&self) -> [&Tensor2; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }

    /// Adds the four maps to `g` as trainable leaves.
    pub fn bind_params(&self, g: &mut Graph) -> AttentionIds {
        AttentionIds {
            w_q: g.param(self.w_q.clone()),
            w_k: g.param(self.w_k.clone()),
            w_v: g.param(self.w_v.clone()),
            w_o: g.param(self.w_o.clone()),
        }
    }

    pub fn bind_constants(&self, g: &mut Graph) -> AttentionIds {
        AttentionIds {
            w_q: g.constant(self.w_q.clone()),
            w_k: g.constant(self.w_k.clone()),
            w_v: g.constant(self.w_v.clone()),
            w_o: g.constant(self.w_o.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionIds {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
}

impl AttentionIds {
    pub fn all(&self) -> [NodeId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// Attention weights `softmax(Q·Kᵀ/√d)` with queries from the local prompt and
/// keys from `[global; local]`. One row per local token.
pub fn attention_weights_node(g: &mut Graph, attn: AttentionIds, global: NodeId, local: NodeId) -> Result<NodeId> {
    let d = g.value(local).cols();
    if g.value(global).cols() != d || g.value(attn.w_q).shape() != (d, d) {
        return Err(Error::Dimension {
            op: "fuse",
            lhs: g.value(global).shape(),
            rhs: g.value(local).shape(),
        });
    }
    let q = g.matmul(local, attn.w_q)?;
    let source = g.concat_rows(&[global, local])?;
    let k = g.matmul(source, attn.w_k)?;
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    Ok(g.row_softmax(scaled))
}

/// `local + softmax(Q·Kᵀ/√d)·V·W_o`, shaped like `local`.
pub fn fuse_node(g: &mut Graph, attn: AttentionIds, global: NodeId, local: NodeId) -> Result<NodeId> {
    let weights = attention_weights_node(g, attn, global, local)?;
    let source = g.concat_rows(&[global, local])?;
    let v = g.matmul(source, attn.w_v)?;
    let context = g.matmul(weights, v)?;
    let projected = g.matmul(context, attn.w_o)?;
    g.add(local, projected)
}

/// Elementwise mean of the two prompts; the fusion used when attention is
/// switched off for a branch.
pub fn mean_fuse_node(g: &mut Graph, global: NodeId, local: NodeId) -> Result<NodeId> {
    let sum = g.add(global, local)?;
    Ok(g.scale(sum, 0.5))
}

pub fn fuse(attn: &CrossAttention, global: &PromptTensor, local: &PromptTensor) -> Result<PromptTensor> {
    if global.dim() != local.dim() || attn.dim() != local.dim() {
        return Err(Error::Dimension {
            op: "fuse",
            lhs: global.values().shape(),
            rhs: local.values().shape(),
        });
    }
    let mut g = Graph::new();
    let ids = attn.bind_constants(&mut g);
    let gp = g.constant(global.values().clone());
    let lp = g.constant(local.values().clone());
    let out = fuse_node(&mut g, ids, gp, lp)?;
    Ok(PromptTensor(g.value(out).clone()))
}

pub fn attention_weights(attn: &CrossAttention, global: &PromptTensor, local: &PromptTensor) -> Result<Tensor2> {
    let mut g = Graph::new();
    let ids = attn.bind_constants(&mut g);
    let gp = g.constant(global.values().clone());
    let lp = g.constant(local.values().clone());
    let out = attention_weights_node(&mut g, ids, gp, lp)?;
    Ok(g.value(out).clone())
}

pub fn copy_into(src: &PromptTensor, dst: &mut PromptTensor) -> Result<()> {
    dst.copy_from(src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn prompt(rows: usize, seed: u64) -> PromptTensor {
        PromptTensor::new(Tensor2::gaussian(rows, 8, 0.5, &mut rng_from(seed))).unwrap()
    }

    #[test]
    fn global_prompts_shared_local_prompts_distinct() {
        let shape = PromptShape::default();
        let a = init_prompts(5, 0, shape).unwrap();
        let b = init_prompts(5, 1, shape).unwrap();
        assert_eq!(a.global_text, b.global_text);
        assert_eq!(a.global_vision, b.global_vision);
        assert_ne!(a.local_text, b.local_text);
        assert_ne!(a.local_vision, b.local_vision);
    }

    #[test]
    fn prompt_init_is_small() {
        for seed in 0..10 {
            let p = init_prompts(seed, seed as usize, PromptShape::default()).unwrap();
            for t in p.tensors() {
                assert!(t.max_abs() < 1.0);
            }
        }
    }

    #[test]
    fn zero_shape_rejected() {
        let shape = PromptShape {
            text_len: 0,
            ..PromptShape::default()
        };
        assert!(matches!(init_prompts(0, 0, shape), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_attention_has_zero_output_map_and_is_seeded() {
        let a = CrossAttention::init(9, 8).unwrap();
        assert!(a.w_o.data().iter().all(|&v| v == 0.0));
        assert_eq!(a, CrossAttention::init(9, 8).unwrap());
        assert_ne!(a, CrossAttention::init(10, 8).unwrap());
    }

    #[test]
    fn fresh_fusion_returns_local_prompt() {
        let attn = CrossAttention::init(1, 8).unwrap();
        let (gp, lp) = (prompt(4, 2), prompt(2, 3));
        let fused = fuse(&attn, &gp, &lp).unwrap();
        assert_eq!(fused.values().shape(), (2, 8));
        for (a, b) in fused.values().data().iter().zip(lp.values().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn nonzero_output_map_changes_fusion() {
        let mut attn = CrossAttention::init(1, 8).unwrap();
        attn.w_o = Tensor2::identity(8);
        let (gp, lp) = (prompt(4, 2), prompt(4, 3));
        assert_ne!(fuse(&attn, &gp, &lp).unwrap(), lp);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let attn = CrossAttention::init(4, 8).unwrap();
        let w = attention_weights(&attn, &prompt(4, 5), &prompt(3, 6)).unwrap();
        assert_eq!(w.shape(), (3, 7));
        for r in 0..3 {
            let s: f64 = w.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.row_slice(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn fusion_dim_mismatch() {
        let attn = CrossAttention::init(1, 8).unwrap();
        let gp = PromptTensor::new(Tensor2::zeros(4, 6)).unwrap();
        assert!(matches!(fuse(&attn, &gp, &prompt(4, 1)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn copy_does_not_alias() {
        let src = prompt(4, 1);
        let mut dst = prompt(4, 2);
        copy_into(&src, &mut dst).unwrap();
        assert_eq!(dst, src);
        dst.values_mut().data_mut()[0] += 1.0;
        assert_ne!(dst, src);
        assert_eq!(src, prompt(4, 1));
        assert!(copy_into(&src, &mut prompt(3, 0)).is_err());
    }

    #[test]
    fn broadcast_gives_independent_copies() {
        let src = prompt(4, 1);
        let mut copies: Vec<PromptTensor> = (0..5).map(|k| prompt(4, 10 + k)).collect();
        for c in &mut copies {
            copy_into(&src, c).unwrap();
        }
        copies[0].values_mut().data_mut()[3] = 42.0;
        assert!(copies[1..].iter().all(|c| *c == src));
    }
}
