use pfeddc::numerics::{finite_diff_grad, max_relative_error, Graph, NodeId, Tensor2};
use pfeddc::prompts::{
    attention_weights, fuse, fuse_node, init_prompts, AttentionIds, CrossAttention, PromptShape, PromptTensor,
};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor2 {
    Tensor2::gaussian(rows, cols, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn prompt(rows: usize, d: usize, seed: u64) -> PromptTensor {
    PromptTensor::new(gaussian(rows, d, 0.7, seed)).unwrap()
}

/// Attention with a non-zero output map, so every input carries gradient.
fn live_attention(seed: u64, d: usize) -> CrossAttention {
    let mut a = CrossAttention::init(seed, d).unwrap();
    a.w_o = gaussian(d, d, 0.4, seed ^ 0xff);
    a
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let d = 6;
    let attn = live_attention(1, d);
    let inputs = [
        prompt(4, d, 2).into_values(),
        prompt(3, d, 3).into_values(),
        attn.w_q.clone(),
        attn.w_k.clone(),
        attn.w_v.clone(),
        attn.w_o.clone(),
    ];
    let readout = gaussian(d, 2, 1.0, 4);

    let loss_of = |vals: &[Tensor2], probe: Option<usize>| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if Some(i) == probe {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        let attn = AttentionIds {
            w_q: ids[2],
            w_k: ids[3],
            w_v: ids[4],
            w_o: ids[5],
        };
        let fused = fuse_node(&mut g, attn, ids[0], ids[1]).unwrap();
        let w = g.constant(readout.clone());
        let proj = g.matmul(fused, w).unwrap();
        let t = g.tanh(proj);
        let loss = g.sum(t);
        (g, ids, loss)
    };

    for i in 0..inputs.len() {
        let (g, ids, loss) = loss_of(&inputs, Some(i));
        let analytic = g.backward(loss).unwrap().get(ids[i]).unwrap().clone();
        let numeric = finite_diff_grad(
            |v| {
                let mut vals = inputs.to_vec();
                vals[i] = v.clone();
                let (g, _, loss) = loss_of(&vals, None);
                Ok(g.value(loss).get(0, 0))
            },
            &inputs[i],
            1e-5,
        )
        .unwrap();
        assert!(analytic.max_abs() > 1e-6, "input {i} carries no gradient");
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err <= 1e-4, "input {i}: relative error {err:e}");
    }
}

#[test]
fn fused_prompt_has_local_shape() {
    let attn = CrossAttention::init(0, 8).unwrap();
    let out = fuse(&attn, &prompt(4, 8, 1), &prompt(2, 8, 2)).unwrap();
    assert_eq!(out.values().shape(), (2, 8));
    let w = attention_weights(&attn, &prompt(4, 8, 1), &prompt(2, 8, 2)).unwrap();
    assert_eq!(w.shape(), (2, 6));
}

#[test]
fn width_mismatch_is_rejected() {
    let attn = CrossAttention::init(0, 8).unwrap();
    assert!(fuse(&attn, &prompt(4, 6, 1), &prompt(2, 8, 2)).is_err());
    assert!(fuse(&attn, &prompt(4, 6, 1), &prompt(2, 6, 2)).is_err());
    assert!(CrossAttention::init(0, 0).is_err());
}

#[test]
fn init_is_deterministic_and_shares_globals() {
    let shape = PromptShape::default();
    let a = init_prompts(9, 0, shape).unwrap();
    let b = init_prompts(9, 1, shape).unwrap();
    assert_eq!(a, init_prompts(9, 0, shape).unwrap());
    assert_eq!(a.global_text, b.global_text);
    assert_eq!(a.global_vision, b.global_vision);
    assert_ne!(a.local_text, b.local_text);
    assert_ne!(a.local_vision, b.local_vision);
    assert!(PromptShape { text_len: 0, ..shape }.validate().is_err());
}

fn permute_rows(t: &Tensor2, perm: &[usize]) -> Tensor2 {
    let data = perm.iter().flat_map(|&r| t.row_slice(r).to_vec()).collect();
    Tensor2::from_vec(perm.len(), t.cols(), data).unwrap()
}

proptest! {
    #[test]
    fn fresh_attention_is_the_identity_on_local(seed in any::<u64>(), lg in 1usize..6, ll in 1usize..6, d in 1usize..9) {
        let attn = CrossAttention::init(seed, d).unwrap();
        let local = prompt(ll, d, seed ^ 1);
        let out = fuse(&attn, &prompt(lg, d, seed ^ 2), &local).unwrap();
        prop_assert_eq!(out.values().to_le_bytes(), local.values().to_le_bytes());
    }

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), lg in 1usize..6, ll in 1usize..6) {
        let attn = live_attention(seed, 4);
        let w = attention_weights(&attn, &prompt(lg, 4, seed ^ 1), &prompt(ll, 4, seed ^ 2)).unwrap();
        for r in 0..ll {
            prop_assert!((w.row_slice(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn permuting_global_tokens_leaves_fusion_unchanged(seed in any::<u64>(), lg in 2usize..6) {
        let attn = live_attention(seed, 4);
        let global = prompt(lg, 4, seed ^ 1);
        let local = prompt(3, 4, seed ^ 2);
        let mut perm: Vec<usize> = (0..lg).collect();
        perm.rotate_left(1);
        let shuffled = PromptTensor::new(permute_rows(global.values(), &perm)).unwrap();
        let a = fuse(&attn, &global, &local).unwrap();
        let b = fuse(&attn, &shuffled, &local).unwrap();
        for (x, y) in a.values().data().iter().zip(b.values().data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn permuting_local_tokens_permutes_fresh_output(seed in any::<u64>(), ll in 2usize..6) {
        let attn = CrossAttention::init(seed, 4).unwrap();
        let global = prompt(3, 4, seed ^ 1);
        let local = prompt(ll, 4, seed ^ 2);
        let mut perm: Vec<usize> = (0..ll).collect();
        perm.reverse();
        let shuffled = PromptTensor::new(permute_rows(local.values(), &perm)).unwrap();
        let a = fuse(&attn, &global, &local).unwrap();
        let b = fuse(&attn, &global, &shuffled).unwrap();
        prop_assert_eq!(permute_rows(a.values(), &perm), b.values().clone());
    }
}
