//! Synthetic class/domain data and client partitions.

mod export;
mod partition;

pub use export::{read_samples, write_manifest, write_samples, PartitionManifest};
pub use partition::{
    both_shift_partition, dirichlet_partition, domain_partition, partition, PartitionSpec, PartitionStats, ShiftRegime,
};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derived_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class_per_domain: usize,
    pub raw_dim: usize,
    /// Standard deviation of class centers.
    pub sep: f64,
    /// Standard deviation of within-class noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push("num_classes must be >= 2".to_string());
        }
        if self.num_domains < 1 {
            problems.push("num_domains must be >= 1".to_string());
        }
        if self.raw_dim < 2 {
            problems.push("raw_dim must be >= 2".to_string());
        }
        if self.samples_per_class_per_domain < 1 {
            problems.push("samples_per_class_per_domain must be >= 1".to_string());
        }
        if !(self.sep >= 0.0 && self.sep.is_finite()) {
            problems.push(format!("sep must be finite and >= 0, got {}", self.sep));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            problems.push(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Training samples per (class, domain): 80 % rounded to nearest.
    pub fn train_per_cell(&self) -> usize {
        (4 * self.samples_per_class_per_domain + 2) / 5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub raw: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub centers: Vec<Vec<f64>>,
    /// Orthonormal map per domain, row-major `raw_dim × raw_dim`; domain 0 is
    /// the identity.
    pub transforms: Vec<Vec<f64>>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.label).collect()
    }

    /// Image of `x` under the domain-`domain` transform.
    pub fn apply_transform(&self, domain: usize, x: &[f64]) -> Vec<f64> {
        apply(&self.transforms[domain], x)
    }
}

fn apply(t: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| t[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthonormal rows by modified Gram-Schmidt over a Gaussian matrix.
fn random_orthonormal<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| std_normal(rng)).collect()).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let prev = rows[j].clone();
                for (a, b) in rows[i].iter_mut().zip(&prev) {
                    *a -= dot * b;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return rows.concat();
        }
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        t[i * n + i] = 1.0;
    }
    t
}

/// Gaussian class centers, one orthonormal map per domain, and an 80/20 split
/// inside every (class, domain) cell.
///
/// Samples are ordered by domain, then class, then draw index.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.raw_dim;
    let mut rng = derived_rng(spec.seed, Stream::Dataset, 0, 0);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..n).map(|_| spec.sep * std_normal(&mut rng)).collect())
        .collect();
    let transforms: Vec<Vec<f64>> = (0..spec.num_domains)
        .map(|d| {
            if d == 0 {
                identity(n)
            } else {
                random_orthonormal(n, &mut rng)
            }
        })
        .collect();

    let n_train = spec.train_per_cell();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (domain, t) in transforms.iter().enumerate() {
        for (label, center) in centers.iter().enumerate() {
            for i in 0..spec.samples_per_class_per_domain {
                let point: Vec<f64> = center.iter().map(|c| c + spec.noise * std_normal(&mut rng)).collect();
                let sample = Sample {
                    raw: apply(t, &point),
                    label,
                    domain,
                };
                if i < n_train {
                    train.push(sample);
                } else {
                    test.push(sample);
                }
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        centers,
        transforms,
        train,
        test,
    })
}
