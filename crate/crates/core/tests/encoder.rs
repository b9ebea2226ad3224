use pfeddc::encoder::{
    argmax_rows, check_tau, cross_entropy, predict_probs, predict_probs_node, ClassEmbeddings, EncoderDims,
    FrozenEncoder,
};
use pfeddc::numerics::{finite_diff_grad, max_relative_error, Graph, Tensor2};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIMS: EncoderDims = EncoderDims {
    d: 8,
    n_tok: 4,
    depth: 2,
    raw_dim: 16,
    num_classes: 5,
};

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64) -> Tensor2 {
    Tensor2::gaussian(rows, cols, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn unit_rows(t: &Tensor2) -> Tensor2 {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let n = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..t.cols() {
            out.set(r, c, t.get(r, c) / n);
        }
    }
    out
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn same_seed_gives_same_weights() {
    let a = FrozenEncoder::new(3, DIMS).unwrap();
    let b = FrozenEncoder::new(3, DIMS).unwrap();
    let c = FrozenEncoder::new(4, DIMS).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn embeddings_are_unit_norm() {
    let enc = FrozenEncoder::new(1, DIMS).unwrap();
    let prompt = gaussian(4, 8, 0.5, 2);
    let classes = enc.class_embeddings(&prompt).unwrap();
    assert_eq!(classes.as_tensor().shape(), (5, 8));
    for r in 0..5 {
        assert!((norm(classes.as_tensor().row_slice(r)) - 1.0).abs() < 1e-12);
    }
    let raw = vec![0.3; 16];
    let img = enc.encode_image(&prompt, &raw).unwrap();
    assert_eq!(img.shape(), (1, 8));
    assert!((norm(img.data()) - 1.0).abs() < 1e-12);
}

#[test]
fn wrong_prompt_width_and_class_are_rejected() {
    let enc = FrozenEncoder::new(1, DIMS).unwrap();
    assert!(enc.encode_text(&Tensor2::zeros(4, 7), 0).is_err());
    assert!(enc.encode_text(&Tensor2::zeros(4, 8), 5).is_err());
    assert!(enc.encode_image(&Tensor2::zeros(4, 8), &[0.0; 15]).is_err());
}

#[test]
fn text_embeddings_respond_to_every_prompt_entry() {
    let enc = FrozenEncoder::new(5, DIMS).unwrap();
    let prompt = gaussian(4, 8, 0.5, 6);
    let base = enc.encode_text(&prompt, 2).unwrap();
    let h = 1e-4;
    for i in 0..prompt.len() {
        let mut p = prompt.clone();
        p.data_mut()[i] += h;
        let moved = enc.encode_text(&p, 2).unwrap();
        let change: f64 = moved
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / h;
        assert!(change > 1e-6, "prompt entry {i} has no effect on the text embedding");
    }
}

#[test]
fn vision_prompt_gradient_matches_finite_differences() {
    let enc = FrozenEncoder::new(7, DIMS).unwrap();
    let prompt = gaussian(4, 8, 0.5, 8);
    let probe = gaussian(8, 1, 1.0, 9);
    let raws: Vec<Vec<f64>> = (0..3).map(|s| gaussian(1, 16, 1.0, 20 + s).into_data()).collect();

    let loss_of = |p: &Tensor2, trainable: bool| {
        let mut g = Graph::new();
        let pid = if trainable {
            g.param(p.clone())
        } else {
            g.constant(p.clone())
        };
        let mut b = enc.bind(&mut g);
        let imgs = b.encode_images(&mut g, pid, raws.iter().map(|r| r.as_slice())).unwrap();
        let w = g.constant(probe.clone());
        let proj = g.matmul(imgs, w).unwrap();
        let t = g.tanh(proj);
        let loss = g.sum(t);
        (g, pid, loss)
    };
    let (g, pid, loss) = loss_of(&prompt, true);
    let analytic = g.backward(loss).unwrap().get(pid).unwrap().clone();
    let numeric = finite_diff_grad(
        |p| {
            let (g, _, loss) = loss_of(p, false);
            Ok(g.value(loss).get(0, 0))
        },
        &prompt,
        1e-5,
    )
    .unwrap();
    assert!(analytic.max_abs() > 1e-4);
    assert!(max_relative_error(&analytic, &numeric, 1e-6) <= 1e-4);
}

#[test]
fn cross_entropy_gradient_on_similarities_is_scaled_residual() {
    let tau = 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let c = rng.random_range(2..7);
        let label = rng.random_range(0..c);
        let sims: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let s = g.param(Tensor2::row(sims.clone()));
        let logits = g.scale(s, 1.0 / tau);
        let p = g.row_softmax(logits);
        let loss = g.nll_rows(p, &[label]).unwrap();
        let grad = g.backward(loss).unwrap().get(s).unwrap().clone();

        let max = sims.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = sims.iter().map(|v| ((v - max) / tau).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            let expected = (e / z - onehot) / tau;
            assert!((grad.get(0, j) - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }
}

#[test]
fn aligned_class_gets_all_the_mass() {
    let classes = ClassEmbeddings::new(Tensor2::identity(3)).unwrap();
    let img = Tensor2::row(vec![1.0, 0.0, 0.0]);
    let p = predict_probs(&img, &classes, 0.05).unwrap();
    assert!((p.get(0, 0) - 1.0).abs() < 1e-8);
    assert_eq!(argmax_rows(&p), vec![0]);
    assert!(cross_entropy(&p, 0).unwrap() < 1e-8);
}

#[test]
fn identical_classes_give_uniform_probabilities() {
    let row = unit_rows(&gaussian(1, 8, 1.0, 3));
    let mut stacked = Vec::new();
    for _ in 0..4 {
        stacked.extend_from_slice(row.data());
    }
    let classes = ClassEmbeddings::new(Tensor2::from_vec(4, 8, stacked).unwrap()).unwrap();
    let img = unit_rows(&gaussian(1, 8, 1.0, 4));
    let p = predict_probs(&img, &classes, 0.05).unwrap();
    for j in 0..4 {
        assert!((p.get(0, j) - 0.25).abs() < 1e-12);
    }
}

#[test]
fn non_positive_temperature_is_rejected() {
    let classes = ClassEmbeddings::new(Tensor2::identity(2)).unwrap();
    let img = Tensor2::row(vec![1.0, 0.0]);
    for tau in [0.0, -0.1, f64::NAN, f64::INFINITY] {
        assert!(check_tau(tau).is_err());
        assert!(predict_probs(&img, &classes, tau).is_err());
    }
}

#[test]
fn non_unit_class_rows_are_rejected() {
    assert!(ClassEmbeddings::new(Tensor2::filled(2, 2, 1.0)).is_err());
}

proptest! {
    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>(), c in 1usize..8, b in 1usize..5, tau in 0.01f64..2.0) {
        let imgs = unit_rows(&gaussian(b, 6, 1.0, seed));
        let classes = unit_rows(&gaussian(c, 6, 1.0, seed ^ 1));
        let mut g = Graph::new();
        let i = g.constant(imgs);
        let k = g.constant(classes);
        let p = predict_probs_node(&mut g, i, k, tau).unwrap();
        let p = g.value(p);
        prop_assert_eq!(p.shape(), (b, c));
        for r in 0..b {
            let row = p.row_slice(r);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn permuting_classes_permutes_probabilities(seed in any::<u64>(), c in 2usize..7) {
        let img = unit_rows(&gaussian(1, 6, 1.0, seed));
        let classes = unit_rows(&gaussian(c, 6, 1.0, seed ^ 2));
        let mut perm: Vec<usize> = (0..c).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<f64> = perm.iter().flat_map(|&j| classes.row_slice(j).to_vec()).collect();
        let permuted = Tensor2::from_vec(c, 6, permuted).unwrap();

        let p = predict_probs(&img, &ClassEmbeddings::new(classes).unwrap(), 0.05).unwrap();
        let q = predict_probs(&img, &ClassEmbeddings::new(permuted).unwrap(), 0.05).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            prop_assert!((q.get(0, i) - p.get(0, j)).abs() <= 1e-12);
        }
    }
}
