use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftRegime {
    LabelShift,
    DomainShift,
    Both,
}

impl std::fmt::Display for ShiftRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShiftRegime::LabelShift => "label-shift",
            ShiftRegime::DomainShift => "domain-shift",
            ShiftRegime::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub beta: f64,
    pub regime: ShiftRegime,
    pub clients_per_domain: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self, num_domains: usize) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("partition needs at least one client".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        let expected = match self.regime {
            ShiftRegime::LabelShift => return Ok(()),
            ShiftRegime::DomainShift => num_domains,
            ShiftRegime::Both => num_domains * self.clients_per_domain,
        };
        if self.clients != expected {
            return Err(Error::Config(format!(
                "{} regime needs {expected} clients for {num_domains} domains, got {}",
                self.regime, self.clients
            )));
        }
        Ok(())
    }
}

/// Per-class Dirichlet split of sample positions across `k` clients.
///
/// For each class in ascending order the class's positions are shuffled,
/// proportions are drawn from `Dir(beta · 1_k)`, converted to counts by
/// largest-remainder rounding, and dealt out in client order. Afterwards any
/// empty client takes the highest position from the currently largest client.
/// Shards are returned sorted.
pub fn dirichlet_partition(labels: &[usize], k: usize, beta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("dirichlet partition needs k >= 1".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    if labels.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot cover {k} clients",
            labels.len()
        )));
    }
    let mut rng = rng_from(seed);
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(format!("beta: {e}")))?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];

    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let proportions: Vec<f64> = if total > 0.0 {
            draws.iter().map(|g| g / total).collect()
        } else {
            // Every gamma draw underflowed: put the class on the largest draw.
            let mut p = vec![0.0; k];
            p[argmax(&draws)] = 1.0;
            p
        };
        let counts = largest_remainder(&proportions, members.len());
        let mut start = 0;
        for (client, count) in counts.into_iter().enumerate() {
            shards[client].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }

    for shard in &mut shards {
        shard.sort_unstable();
    }
    repair_empty(&mut shards);
    Ok(shards)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Integer counts summing to `total`, closest to `p · total`. Leftover units go
/// to the largest fractional parts, ties to the lower index.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn repair_empty(shards: &mut [Vec<usize>]) {
    for empty in 0..shards.len() {
        if !shards[empty].is_empty() {
            continue;
        }
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("non-empty shard list");
        let moved = shards[donor].pop().expect("donor holds >= 2 samples");
        shards[empty].push(moved);
    }
}

/// Client `d` receives every sample of domain `d`.
pub fn domain_partition(samples: &[Sample], num_domains: usize) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); num_domains];
    for (i, s) in samples.iter().enumerate() {
        if s.domain < num_domains {
            shards[s.domain].push(i);
        }
    }
    shards
}

/// Domain split, then a Dirichlet split inside each domain. Client
/// `d · clients_per_domain + j` is the `j`-th shard of domain `d`; the
/// Dirichlet seed for domain `d` is `derive_seed(seed, DomainSplit, d, 0)`.
pub fn both_shift_partition(
    samples: &[Sample],
    num_domains: usize,
    clients_per_domain: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients_per_domain == 0 {
        return Err(Error::Config("clients_per_domain must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(num_domains * clients_per_domain);
    for (d, members) in domain_partition(samples, num_domains).into_iter().enumerate() {
        let labels: Vec<usize> = members.iter().map(|&i| samples[i].label).collect();
        let sub_seed = derive_seed(seed, Stream::DomainSplit, d as u64, 0);
        let local = dirichlet_partition(&labels, clients_per_domain, beta, sub_seed)?;
        out.extend(
            local
                .into_iter()
                .map(|shard| shard.into_iter().map(|p| members[p]).collect()),
        );
    }
    Ok(out)
}

/// Dispatches on the regime of `spec`.
pub fn partition(samples: &[Sample], num_domains: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate(num_domains)?;
    let shards = match spec.regime {
        ShiftRegime::LabelShift => {
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            dirichlet_partition(&labels, spec.clients, spec.beta, spec.seed)?
        }
        ShiftRegime::DomainShift => domain_partition(samples, num_domains),
        ShiftRegime::Both => both_shift_partition(samples, num_domains, spec.clients_per_domain, spec.beta, spec.seed)?,
    };
    if let Some(k) = shards.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("client {k} received no samples")));
    }
    Ok(shards)
}

/// Label-skew summary of a partition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionStats {
    /// `counts[client][class]`
    pub counts: Vec<Vec<usize>>,
    /// Classes with at least one sample, per client.
    pub support: Vec<usize>,
    pub median_support: f64,
    /// Mean over classes of the largest single-client share of that class.
    pub mean_max_share: f64,
}

impl PartitionStats {
    pub fn compute(labels: &[usize], shards: &[Vec<usize>], num_classes: usize) -> Self {
        let counts: Vec<Vec<usize>> = shards
            .iter()
            .map(|shard| {
                let mut c = vec![0; num_classes];
                for &i in shard {
                    c[labels[i]] += 1;
                }
                c
            })
            .collect();
        let support: Vec<usize> = counts.iter().map(|c| c.iter().filter(|&&n| n > 0).count()).collect();
        let mut sorted = support.clone();
        sorted.sort_unstable();
        let median_support = match sorted.len() {
            0 => 0.0,
            n if n % 2 == 1 => sorted[n / 2] as f64,
            n => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
        };
        let mut share_total = 0.0;
        let mut classes_seen = 0;
        for class in 0..num_classes {
            let total: usize = counts.iter().map(|c| c[class]).sum();
            if total == 0 {
                continue;
            }
            let max = counts.iter().map(|c| c[class]).max().unwrap_or(0);
            share_total += max as f64 / total as f64;
            classes_seen += 1;
        }
        Self {
            counts,
            support,
            median_support,
            mean_max_share: if classes_seen == 0 {
                0.0
            } else {
                share_total / classes_seen as f64
            },
        }
    }
}
