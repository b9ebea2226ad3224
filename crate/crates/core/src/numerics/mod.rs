//! Dense 2-D tensors, a reverse-mode tape, and the plain SGD update.

mod graph;
mod tensor;

pub use graph::{GradMap, Graph, Node, NodeId, Op};
pub use tensor::Tensor2;

use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`, one entry at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor2, h: f64) -> Result<Tensor2>
where
    F: FnMut(&Tensor2) -> Result<f64>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor2::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest entrywise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps entries whose true gradient is essentially zero from
/// dividing round-off by round-off.
pub fn max_relative_error(analytic: &Tensor2, numeric: &Tensor2, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `value ← value − eta · grad` for every supplied leaf.
///
/// Either every leaf is updated or none is: a missing gradient is reported
/// before anything is written.
pub fn sgd_step<'a, I>(params: I, grads: &GradMap, eta: f64) -> Result<()>
where
    I: IntoIterator<Item = (NodeId, &'a mut Tensor2)>,
{
    let params: Vec<(NodeId, &mut Tensor2)> = params.into_iter().collect();
    for (id, value) in &params {
        let g = grads
            .get(*id)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter node {}", id.index())))?;
        value.check_same_shape("sgd_step", g)?;
    }
    for (id, value) in params {
        let g = grads.get(id).expect("checked above");
        value.add_scaled(g, -eta)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor2::from_vec(2, 2, vec![0.3, -1.0, 4.0, 2.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_square() {
        let x = Tensor2::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.get(0, 0).powi(2)), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let x = Tensor2::scalar(1.0);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    fn one_param_graph(value: f64, grad: f64) -> (NodeId, GradMap) {
        let mut g = Graph::new();
        let p = g.param(Tensor2::scalar(value));
        let s = g.scale(p, grad);
        let l = g.sum(s);
        (p, g.backward(l).unwrap())
    }

    #[test]
    fn sgd_single_step() {
        let (id, grads) = one_param_graph(1.0, 0.5);
        let mut value = Tensor2::scalar(1.0);
        sgd_step([(id, &mut value)], &grads, 0.01).unwrap();
        assert_eq!(value.get(0, 0), 1.0 - 0.01 * 0.5);
        assert!((value.get(0, 0) - 0.995).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_eta_is_noop() {
        let (id, grads) = one_param_graph(1.0, 0.5);
        let mut value = Tensor2::scalar(1.0);
        sgd_step([(id, &mut value)], &grads, 0.0).unwrap();
        assert_eq!(value.get(0, 0), 1.0);
    }

    #[test]
    fn sgd_is_deterministic() {
        let (id, grads) = one_param_graph(0.7, -2.25);
        let mut a = Tensor2::scalar(0.7);
        let mut b = Tensor2::scalar(0.7);
        sgd_step([(id, &mut a)], &grads, 0.3).unwrap();
        sgd_step([(id, &mut b)], &grads, 0.3).unwrap();
        assert_eq!(a.get(0, 0).to_bits(), b.get(0, 0).to_bits());
    }

    #[test]
    fn sgd_missing_gradient_writes_nothing() {
        let (id, grads) = one_param_graph(1.0, 0.5);
        let mut a = Tensor2::scalar(1.0);
        let mut b = Tensor2::scalar(1.0);
        // A node id from another graph that `grads` knows nothing about.
        let mut g2 = Graph::new();
        let _ = g2.constant(Tensor2::scalar(0.0));
        let other = g2.param(Tensor2::scalar(0.0));
        assert_ne!(other, id);
        let err = sgd_step([(id, &mut a), (other, &mut b)], &grads, 0.1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(a.get(0, 0), 1.0);
    }
}
