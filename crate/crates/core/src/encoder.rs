//! Frozen dual-branch encoder and the similarity classification head.
//!
//! Both branches share one layer shape: a token-wise affine map with `tanh`,
//! then a cross-token mixing step that adds the token mean, projected through
//! a fixed `d × d` map, back onto every token:
//!
//! ```text
//! T  = tanh(H·W + 1·b)
//! H' = T + 1·mean_rows(T)·M
//! ```
//!
//! The readout is a mean over tokens followed by L2 normalization. Prompt
//! rows are prepended to the token sequence, so they reach the readout both
//! directly and through the mixing step.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor2};
use crate::seed::{rng_from, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Token width, shared with the prompts.
    pub d: usize,
    /// Tokens produced from one raw input.
    pub n_tok: usize,
    pub depth: usize,
    pub raw_dim: usize,
    pub num_classes: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d", self.d),
            ("n_tok", self.n_tok),
            ("depth", self.depth),
            ("raw_dim", self.raw_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// The bias is shared by every token, so at full scale it drowns the token
/// content: near-zero prompt rows all map to `tanh(b)` and the class
/// embeddings end up almost parallel. A quarter of the weight scale keeps
/// them well apart.
const BIAS_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    weight: Tensor2,
    bias: Tensor2,
    mix: Tensor2,
}

impl Layer {
    fn sample(d: usize, rng: &mut impl rand::Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            weight: Tensor2::gaussian(d, d, std, rng),
            bias: Tensor2::gaussian(1, d, BIAS_SCALE * std, rng),
            mix: Tensor2::gaussian(d, d, std, rng),
        }
    }

    fn tensors(&self) -> [&Tensor2; 3] {
        [&self.weight, &self.bias, &self.mix]
    }
}

/// Seeded stand-in for a pretrained dual encoder. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    dims: EncoderDims,
    seed: u64,
    text_layers: Vec<Layer>,
    vision_layers: Vec<Layer>,
    /// `raw_dim × (n_tok · d)`
    input_embed: Tensor2,
    /// One "[CLASS]" token per class, `C × d`.
    class_tokens: Tensor2,
}

impl FrozenEncoder {
    pub fn new(seed: u64, dims: EncoderDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng_from(crate::seed::derive_seed(seed, Stream::Encoder, 0, 0));
        let text_layers = (0..dims.depth).map(|_| Layer::sample(dims.d, &mut rng)).collect();
        let vision_layers = (0..dims.depth).map(|_| Layer::sample(dims.d, &mut rng)).collect();
        let input_embed = Tensor2::gaussian(
            dims.raw_dim,
            dims.n_tok * dims.d,
            1.0 / (dims.raw_dim as f64).sqrt(),
            &mut rng,
        );
        let class_tokens = Tensor2::gaussian(dims.num_classes, dims.d, 1.0 / (dims.d as f64).sqrt(), &mut rng);
        Ok(Self {
            dims,
            seed,
            text_layers,
            vision_layers,
            input_embed,
            class_tokens,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.dims.num_classes
    }

    pub fn class_tokens(&self) -> &Tensor2 {
        &self.class_tokens
    }

    fn all_weights(&self) -> impl Iterator<Item = &Tensor2> {
        self.text_layers
            .iter()
            .chain(&self.vision_layers)
            .flat_map(|l| l.tensors())
            .chain([&self.input_embed, &self.class_tokens])
    }

    /// SHA-256 over every weight's little-endian bytes.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for t in self.all_weights() {
            hasher.update(t.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Fixed input embedding: `raw_dim` values to an `n_tok × d` token block.
    pub fn embed_input(&self, raw: &[f64]) -> Result<Tensor2> {
        if raw.len() != self.dims.raw_dim {
            return Err(Error::Dimension {
                op: "embed_input",
                lhs: (1, raw.len()),
                rhs: (self.dims.raw_dim, self.dims.n_tok * self.dims.d),
            });
        }
        let flat = Tensor2::row(raw.to_vec()).matmul(&self.input_embed)?;
        Tensor2::from_vec(self.dims.n_tok, self.dims.d, flat.into_data())
    }

    /// Registers the frozen weights in `g` once so that many encodings in the
    /// same graph share them.
    pub fn bind<'e>(&'e self, g: &mut Graph) -> BoundEncoder<'e> {
        let mut bind_layers = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| LayerIds {
                    weight: g.constant(l.weight.clone()),
                    bias: g.constant(l.bias.clone()),
                    mix: g.constant(l.mix.clone()),
                })
                .collect()
        };
        let text = bind_layers(&self.text_layers);
        let vision = bind_layers(&self.vision_layers);
        BoundEncoder {
            enc: self,
            text,
            vision,
            ones: HashMap::new(),
        }
    }

    /// Text embedding of one class under a fused prompt, `1 × d`, unit norm.
    pub fn encode_text(&self, prompt: &Tensor2, class: usize) -> Result<Tensor2> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g);
        let p = g.constant(prompt.clone());
        let out = b.encode_text(&mut g, p, class)?;
        Ok(g.value(out).clone())
    }

    /// All class embeddings under a fused prompt.
    pub fn class_embeddings(&self, prompt: &Tensor2) -> Result<ClassEmbeddings> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g);
        let p = g.constant(prompt.clone());
        let out = b.class_embeddings(&mut g, p)?;
        Ok(ClassEmbeddings(g.value(out).clone()))
    }

    /// Image embedding of one raw input under a fused prompt, `1 × d`, unit norm.
    pub fn encode_image(&self, prompt: &Tensor2, raw: &[f64]) -> Result<Tensor2> {
        let mut g = Graph::new();
        let mut b = self.bind(&mut g);
        let p = g.constant(prompt.clone());
        let out = b.encode_image(&mut g, p, raw)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    weight: NodeId,
    bias: NodeId,
    mix: NodeId,
}

/// A [`FrozenEncoder`] whose weights live as constants in one graph.
pub struct BoundEncoder<'e> {
    enc: &'e FrozenEncoder,
    text: Vec<LayerIds>,
    vision: Vec<LayerIds>,
    ones: HashMap<usize, NodeId>,
}

impl BoundEncoder<'_> {
    fn ones(&mut self, g: &mut Graph, n: usize) -> NodeId {
        *self
            .ones
            .entry(n)
            .or_insert_with(|| g.constant(Tensor2::filled(n, 1, 1.0)))
    }

    fn check_prompt(&self, g: &Graph, prompt: NodeId) -> Result<()> {
        let p = g.value(prompt);
        if p.cols() != self.enc.dims.d || p.rows() == 0 {
            return Err(Error::Dimension {
                op: "encode",
                lhs: p.shape(),
                rhs: (p.rows().max(1), self.enc.dims.d),
            });
        }
        Ok(())
    }

    fn run_layers(&mut self, g: &mut Graph, tokens: NodeId, vision: bool) -> Result<NodeId> {
        let n = g.value(tokens).rows();
        let ones = self.ones(g, n);
        let layers = if vision { &self.vision } else { &self.text };
        let mut h = tokens;
        for layer in layers {
            let lin = g.matmul(h, layer.weight)?;
            let bias = g.matmul(ones, layer.bias)?;
            let pre = g.add(lin, bias)?;
            let t = g.tanh(pre);
            let mean = g.mean_pool_rows(t)?;
            let spread = g.matmul(ones, mean)?;
            let mixed = g.matmul(spread, layer.mix)?;
            h = g.add(t, mixed)?;
        }
        let pooled = g.mean_pool_rows(h)?;
        Ok(g.l2_normalize_rows(pooled))
    }

    pub fn encode_text(&mut self, g: &mut Graph, prompt: NodeId, class: usize) -> Result<NodeId> {
        self.check_prompt(g, prompt)?;
        let c = self.enc.dims.num_classes;
        if class >= c {
            return Err(Error::Domain(format!("class {class} out of range for {c} classes")));
        }
        let d = self.enc.dims.d;
        let token = Tensor2::from_vec(1, d, self.enc.class_tokens.row_slice(class).to_vec())?;
        let token = g.constant(token);
        let seq = g.concat_rows(&[prompt, token])?;
        self.run_layers(g, seq, false)
    }

    /// `C × d` matrix of class embeddings, row `c` for class `c`.
    pub fn class_embeddings(&mut self, g: &mut Graph, prompt: NodeId) -> Result<NodeId> {
        let rows = (0..self.enc.dims.num_classes)
            .map(|c| self.encode_text(g, prompt, c))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    pub fn encode_image(&mut self, g: &mut Graph, prompt: NodeId, raw: &[f64]) -> Result<NodeId> {
        self.check_prompt(g, prompt)?;
        let tokens = g.constant(self.enc.embed_input(raw)?);
        let seq = g.concat_rows(&[prompt, tokens])?;
        self.run_layers(g, seq, true)
    }

    /// `B × d` matrix of image embeddings.
    pub fn encode_images<'r, I>(&mut self, g: &mut Graph, prompt: NodeId, raws: I) -> Result<NodeId>
    where
        I: IntoIterator<Item = &'r [f64]>,
    {
        let rows = raws
            .into_iter()
            .map(|raw| self.encode_image(g, prompt, raw))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }
}

/// `C × d` matrix of unit-norm class embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings(Tensor2);

impl ClassEmbeddings {
    /// Rows must have unit norm within 1e-12.
    pub fn new(rows: Tensor2) -> Result<Self> {
        for r in 0..rows.rows() {
            let norm = rows.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("class embedding {r} has norm {norm}")));
            }
        }
        Ok(Self(rows))
    }

    pub fn as_tensor(&self) -> &Tensor2 {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.rows()
    }
}

pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be > 0, got {tau}")))
    }
}

/// Class probabilities `softmax(image · classesᵀ / τ)` per row.
///
/// Rows are unit norm on both sides, so the dot product is the cosine.
pub fn predict_probs_node(g: &mut Graph, image_embs: NodeId, class_embs: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let ct = g.transpose(class_embs);
    let sims = g.matmul(image_embs, ct)?;
    let logits = g.scale(sims, 1.0 / tau);
    Ok(g.row_softmax(logits))
}

pub fn predict_probs(image_emb: &Tensor2, class_embs: &ClassEmbeddings, tau: f64) -> Result<Tensor2> {
    let mut g = Graph::new();
    let i = g.constant(image_emb.clone());
    let c = g.constant(class_embs.as_tensor().clone());
    let p = predict_probs_node(&mut g, i, c, tau)?;
    Ok(g.value(p).clone())
}

/// `−ln probs[label]` for a single `1 × C` distribution.
pub fn cross_entropy(probs: &Tensor2, label: usize) -> Result<f64> {
    if probs.rows() != 1 {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: probs.shape(),
            rhs: (1, probs.cols()),
        });
    }
    if label >= probs.cols() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            probs.cols()
        )));
    }
    Ok(-probs.get(0, label).ln())
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor2) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row_slice(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> EncoderDims {
        EncoderDims {
            d: 8,
            n_tok: 4,
            depth: 2,
            raw_dim: 16,
            num_classes: 4,
        }
    }

    fn unit_norm(t: &Tensor2) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn construction_is_deterministic_in_seed() {
        let a = FrozenEncoder::new(11, dims()).unwrap();
        let b = FrozenEncoder::new(11, dims()).unwrap();
        let c = FrozenEncoder::new(12, dims()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn declared_shapes() {
        let e = FrozenEncoder::new(0, dims()).unwrap();
        assert_eq!(e.text_layers.len(), 2);
        assert_eq!(e.vision_layers.len(), 2);
        for l in e.text_layers.iter().chain(&e.vision_layers) {
            assert_eq!(l.weight.shape(), (8, 8));
            assert_eq!(l.bias.shape(), (1, 8));
            assert_eq!(l.mix.shape(), (8, 8));
        }
        assert_eq!(e.input_embed.shape(), (16, 32));
        assert_eq!(e.class_tokens.shape(), (4, 8));
    }

    #[test]
    fn zero_dims_rejected() {
        let mut d = dims();
        d.depth = 0;
        assert!(matches!(FrozenEncoder::new(0, d), Err(Error::Config(_))));
    }

    #[test]
    fn text_embedding_is_unit_and_repeatable() {
        let e = FrozenEncoder::new(3, dims()).unwrap();
        let p = Tensor2::gaussian(4, 8, 0.02, &mut rng_from(1));
        let a = e.encode_text(&p, 2).unwrap();
        assert_eq!(a.shape(), (1, 8));
        assert!((unit_norm(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a, e.encode_text(&p, 2).unwrap());
        assert!(matches!(e.encode_text(&p, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn image_embedding_of_zero_input_is_finite_unit() {
        let e = FrozenEncoder::new(3, dims()).unwrap();
        let out = e.encode_image(&Tensor2::zeros(4, 8), &[0.0; 16]).unwrap();
        assert!(out.is_finite());
        assert!((unit_norm(&out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_raw_dim_mismatch() {
        let e = FrozenEncoder::new(3, dims()).unwrap();
        let err = e.encode_image(&Tensor2::zeros(4, 8), &[0.0; 15]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn prompt_width_mismatch() {
        let e = FrozenEncoder::new(3, dims()).unwrap();
        assert!(e.encode_text(&Tensor2::zeros(4, 7), 0).is_err());
    }

    #[test]
    fn identical_classes_give_uniform_probs() {
        let row = Tensor2::row(vec![0.6, 0.8]);
        let classes = ClassEmbeddings::new(Tensor2::from_vec(3, 2, [row.data(); 3].concat()).unwrap()).unwrap();
        let img = Tensor2::row(vec![1.0, 0.0]);
        let p = predict_probs(&img, &classes, 0.05).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sharp_similarity_head() {
        // cos = (1, 0, 0), τ = 0.05 → ∝ (e^20, 1, 1).
        let classes =
            ClassEmbeddings::new(Tensor2::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap()).unwrap();
        let p = predict_probs(&Tensor2::row(vec![1.0, 0.0]), &classes, 0.05).unwrap();
        let e20 = 20f64.exp();
        let expected = [e20 / (e20 + 2.0), 1.0 / (e20 + 2.0), 1.0 / (e20 + 2.0)];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.get(0, 0) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let classes = ClassEmbeddings::new(Tensor2::row(vec![1.0, 0.0])).unwrap();
        for tau in [0.0, -0.1, f64::NAN] {
            let err = predict_probs(&Tensor2::row(vec![1.0, 0.0]), &classes, tau).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&Tensor2::row(vec![0.0, 1.0]), 1).unwrap(), 0.0);
        let ce = cross_entropy(&Tensor2::row(vec![0.25; 4]), 3).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        assert!((ce - 1.3863).abs() < 1e-4);
        assert!(matches!(
            cross_entropy(&Tensor2::row(vec![0.5, 0.5]), 2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn unnormalized_class_rows_rejected() {
        assert!(ClassEmbeddings::new(Tensor2::row(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor2::from_vec(2, 3, vec![0.2, 0.4, 0.4, 0.5, 0.25, 0.25]).unwrap();
        assert_eq!(argmax_rows(&p), vec![1, 0]);
    }
}
