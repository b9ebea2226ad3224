use rand::seq::index;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::prompts::{decode_record, encode_record, PromptTensor};
use crate::seed::rng_from;

/// Server-side global prompts after `round` aggregations.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub round: usize,
    pub text: PromptTensor,
    pub vision: PromptTensor,
}

/// `max(⌊R·K⌋, 1)`. The product is nudged by 1e-9 before flooring so that
/// rates like 0.29 with K = 100 do not lose a client to rounding.
pub fn participants(k: usize, rate: f64) -> usize {
    ((rate * k as f64 + 1e-9).floor() as usize).clamp(1, k.max(1))
}

/// Uniform sample of `max(⌊R·K⌋, 1)` distinct client ids, ascending.
pub fn sample_clients(k: usize, rate: f64, round_seed: u64) -> Vec<usize> {
    let m = participants(k, rate);
    let mut rng = rng_from(round_seed);
    let mut chosen = index::sample(&mut rng, k, m).into_vec();
    chosen.sort_unstable();
    chosen
}

/// `n_k / Σ n_k` in the given order.
pub fn aggregation_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("aggregation over zero samples".into()));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Client → server payload: the client's updated global-prompt copies.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientMessage {
    pub client: usize,
    pub n_k: usize,
    pub text: Tensor2,
    pub vision: Tensor2,
}

/// `client: u32 LE`, `n_k: u64 LE`, then a two-tensor parameter record.
pub fn encode_message(msg: &ClientMessage) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(msg.client as u32).to_le_bytes());
    out.extend_from_slice(&(msg.n_k as u64).to_le_bytes());
    out.extend_from_slice(&encode_record([&msg.text, &msg.vision]));
    out
}

pub fn decode_message(bytes: &[u8]) -> Result<ClientMessage> {
    if bytes.len() < 12 {
        return Err(Error::Record("message shorter than its header".into()));
    }
    let client = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let n_k = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let mut tensors = decode_record(&bytes[12..])?;
    if tensors.len() != 2 {
        return Err(Error::Record(format!(
            "message carries {} tensors, expected 2",
            tensors.len()
        )));
    }
    let vision = tensors.pop().expect("two tensors");
    let text = tensors.pop().expect("two tensors");
    Ok(ClientMessage {
        client,
        n_k,
        text,
        vision,
    })
}

/// Adds `x` to a list of non-overlapping partials without rounding error
/// (Shewchuk's algorithm).
fn grow(partials: &mut Vec<f64>, mut x: f64) {
    let mut kept = 0;
    for j in 0..partials.len() {
        let mut y = partials[j];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[kept] = lo;
            kept += 1;
        }
        x = hi;
    }
    partials.truncate(kept);
    partials.push(x);
}

/// Correctly rounded sum of exact partials.
fn round_partials(partials: &[f64]) -> f64 {
    let Some(mut idx) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[idx];
    let mut lo = 0.0;
    while idx > 0 {
        idx -= 1;
        let x = hi;
        let y = partials[idx];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Half-way case: the remaining partials decide the rounding direction.
    if idx > 0 && ((lo < 0.0 && partials[idx - 1] < 0.0) || (lo > 0.0 && partials[idx - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Adds `a · b` exactly.
fn grow_product(partials: &mut Vec<f64>, a: f64, b: f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    grow(partials, p);
    if e != 0.0 {
        grow(partials, e);
    }
}

/// `Σ counts[k] · values[k] / Σ counts`, rounded once.
///
/// The numerator is held exactly; the quotient gets one Newton correction
/// from the exact residual. When the exact mean is representable (all values
/// equal, or a single term) the result is that value bit for bit, and the
/// result does not depend on term order.
fn exact_weighted_mean(values: &[f64], counts: &[f64], total: f64) -> f64 {
    let mut partials = Vec::with_capacity(2 * values.len());
    for (&v, &n) in values.iter().zip(counts) {
        grow_product(&mut partials, n, v);
    }
    let q0 = round_partials(&partials) / total;
    grow_product(&mut partials, -q0, total);
    let residual = round_partials(&partials);
    q0 + residual / total
}

fn weighted_mean(tensors: &[&Tensor2], counts: &[usize]) -> Result<Tensor2> {
    let first = tensors[0];
    for t in &tensors[1..] {
        first.check_same_shape("aggregate", t)?;
    }
    let counts: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    let total: f64 = counts.iter().sum();
    let mut out = Tensor2::zeros(first.rows(), first.cols());
    let mut column = vec![0.0; tensors.len()];
    for i in 0..first.len() {
        for (c, t) in column.iter_mut().zip(tensors) {
            *c = t.data()[i];
        }
        out.data_mut()[i] = exact_weighted_mean(&column, &counts, total);
    }
    Ok(out)
}

/// Sample-count-weighted mean of the participating clients' global copies.
///
/// Weights are normalized over the messages given (the round's participants).
/// Messages are processed in ascending client id; each entry is the
/// correctly rounded value of `Σ n_k · P_k / Σ n_k`, so identical copies
/// aggregate to themselves exactly.
pub fn aggregate(messages: &[ClientMessage]) -> Result<(Tensor2, Tensor2)> {
    if messages.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let mut sorted: Vec<&ClientMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.client);
    let counts: Vec<usize> = sorted.iter().map(|m| m.n_k).collect();
    aggregation_weights(&counts)?;
    let text: Vec<&Tensor2> = sorted.iter().map(|m| &m.text).collect();
    let vision: Vec<&Tensor2> = sorted.iter().map(|m| &m.vision).collect();
    Ok((weighted_mean(&text, &counts)?, weighted_mean(&vision, &counts)?))
}
