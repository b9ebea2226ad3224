use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionSpec, ShiftRegime, SyntheticDatasetSpec};
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Method};
use crate::prompts::PromptShape;

/// Overrides the root against which relative output directories resolve.
pub const OUT_ROOT_ENV: &str = "PFEDDC_OUT_ROOT";

/// Training settings shared by every cell. Fields that also appear as sweep
/// axes (`clients`, `participation`, `rounds`, `method`) give the axis
/// default when the sweep omits it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSection {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_iters: usize,
    pub eta: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub method: Method,
}

impl Default for BaseSection {
    fn default() -> Self {
        let f = FederationConfig::default();
        Self {
            clients: f.clients,
            participation: f.participation,
            rounds: f.rounds,
            local_iters: f.local_iters,
            eta: f.eta,
            tau: f.tau,
            batch_size: f.batch_size,
            method: f.method,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub num_classes: usize,
    pub num_domains: usize,
    pub samples_per_class_per_domain: usize,
    pub raw_dim: usize,
    pub sep: f64,
    pub noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            num_classes: 6,
            num_domains: 3,
            samples_per_class_per_domain: 60,
            raw_dim: 16,
            sep: 1.0,
            noise: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d: usize,
    pub n_tok: usize,
    pub depth: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            d: 8,
            n_tok: 4,
            depth: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub text_len: usize,
    pub vision_len: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            text_len: 4,
            vision_len: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub regime: ShiftRegime,
    pub beta: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            regime: ShiftRegime::LabelShift,
            beta: 0.1,
        }
    }
}

/// Axis lists as written; `None` means "use the base value".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepInput {
    clients: Option<Vec<usize>>,
    participation: Option<Vec<f64>>,
    rounds: Option<Vec<usize>>,
    beta: Option<Vec<f64>>,
    method: Option<Vec<Method>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlanInput {
    output_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    base: BaseSection,
    dataset: DatasetSection,
    encoder: EncoderSection,
    prompts: PromptSection,
    partition: PartitionSection,
    sweep: SweepInput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub clients: Vec<usize>,
    pub participation: Vec<f64>,
    pub rounds: Vec<usize>,
    pub beta: Vec<f64>,
    pub method: Vec<Method>,
}

/// A fully resolved experiment plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub base: BaseSection,
    pub dataset: DatasetSection,
    pub encoder: EncoderSection,
    pub prompts: PromptSection,
    pub partition: PartitionSection,
    pub sweep: Sweep,
    /// Replicate seeds; every cell runs once per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// Sweep coordinates of one cell, without the replicate seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub beta: f64,
    pub method: Method,
}

impl CellKey {
    /// Same coordinates with the method dropped, for grouping methods.
    pub fn setting(&self) -> String {
        format!(
            "k{}_r{}_t{}_b{}",
            self.clients, self.participation, self.rounds, self.beta
        )
    }

    pub fn name(&self) -> String {
        format!("{}_{}", self.setting(), self.method)
    }
}

/// One executable run: a sweep cell at one replicate seed, fully resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub key: CellKey,
    pub seed: u64,
    pub federation: FederationConfig,
    pub dataset: SyntheticDatasetSpec,
    pub partition: PartitionSpec,
    pub encoder: EncoderDims,
    pub prompts: PromptShape,
}

impl CellSpec {
    pub fn id(&self) -> String {
        format!("{}_s{}", self.key.name(), self.seed)
    }
}

impl ExperimentPlan {
    fn from_input(input: PlanInput) -> Result<Self> {
        let PlanInput {
            output_dir,
            seeds,
            base,
            dataset,
            encoder,
            prompts,
            partition,
            sweep,
        } = input;
        let plan = Self {
            sweep: Sweep {
                clients: sweep.clients.unwrap_or_else(|| vec![base.clients]),
                participation: sweep.participation.unwrap_or_else(|| vec![base.participation]),
                rounds: sweep.rounds.unwrap_or_else(|| vec![base.rounds]),
                beta: sweep.beta.unwrap_or_else(|| vec![partition.beta]),
                method: sweep.method.unwrap_or_else(|| vec![base.method]),
            },
            base,
            dataset,
            encoder,
            prompts,
            partition,
            seeds: seeds.unwrap_or_else(|| vec![0, 1, 2]),
            output_dir: output_dir.unwrap_or_else(|| PathBuf::from("runs")),
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Parses TOML, or JSON when `format_hint` names a `.json` file.
    pub fn parse(text: &str, format_hint: &Path) -> Result<Self> {
        let path = format_hint.to_path_buf();
        if text.trim().is_empty() {
            return Err(Error::Parse {
                path,
                message: "plan file is empty".into(),
            });
        }
        let is_json = format_hint.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let input: PlanInput = if is_json {
            serde_json::from_str(text).map_err(|e| Error::Parse {
                path,
                message: e.to_string(),
            })?
        } else {
            toml::from_str(text).map_err(|e| Error::Parse {
                path,
                message: e.to_string(),
            })?
        };
        Self::from_input(input)
    }

    /// Every violated invariant, each naming its field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let s = &self.sweep;
        for (name, empty) in [
            ("sweep.clients", s.clients.is_empty()),
            ("sweep.participation", s.participation.is_empty()),
            ("sweep.rounds", s.rounds.is_empty()),
            ("sweep.beta", s.beta.is_empty()),
            ("sweep.method", s.method.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                p.push(format!("{name} must not be empty"));
            }
        }
        for &r in &s.participation {
            if !(r > 0.0 && r <= 1.0) {
                p.push(format!("sweep.participation: {r} is outside (0, 1]"));
            }
        }
        for &b in &s.beta {
            if !(b > 0.0 && b.is_finite()) {
                p.push(format!("sweep.beta: {b} must be > 0"));
            }
        }
        if s.clients.contains(&0) {
            p.push("sweep.clients: values must be >= 1".into());
        }
        if s.rounds.contains(&0) {
            p.push("sweep.rounds: values must be >= 1".into());
        }

        let b = &self.base;
        if b.local_iters == 0 {
            p.push("base.local_iters must be >= 1".into());
        }
        if b.batch_size == 0 {
            p.push("base.batch_size must be >= 1".into());
        }
        if !(b.eta >= 0.0 && b.eta.is_finite()) {
            p.push(format!("base.eta must be finite and >= 0, got {}", b.eta));
        }
        if !(b.tau > 0.0 && b.tau.is_finite()) {
            p.push(format!("base.tau must be > 0, got {}", b.tau));
        }

        let d = &self.dataset;
        if d.num_classes < 2 {
            p.push("dataset.num_classes must be >= 2".into());
        }
        if d.num_domains < 1 {
            p.push("dataset.num_domains must be >= 1".into());
        }
        if d.raw_dim < 2 {
            p.push("dataset.raw_dim must be >= 2".into());
        }
        if d.samples_per_class_per_domain < 3 {
            p.push("dataset.samples_per_class_per_domain must be >= 3 so every cell has test samples".into());
        }
        if !(d.sep >= 0.0 && d.sep.is_finite()) {
            p.push(format!("dataset.sep must be finite and >= 0, got {}", d.sep));
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            p.push(format!("dataset.noise must be finite and >= 0, got {}", d.noise));
        }

        let e = &self.encoder;
        for (name, v) in [
            ("encoder.d", e.d),
            ("encoder.n_tok", e.n_tok),
            ("encoder.depth", e.depth),
        ] {
            if v == 0 {
                p.push(format!("{name} must be >= 1"));
            }
        }
        if self.prompts.text_len == 0 || self.prompts.vision_len == 0 {
            p.push("prompts.text_len and prompts.vision_len must be >= 1".into());
        }

        let train_total = d.num_classes * d.num_domains * ((4 * d.samples_per_class_per_domain + 2) / 5);
        for &k in &s.clients {
            match self.partition.regime {
                ShiftRegime::LabelShift if k > train_total => p.push(format!(
                    "sweep.clients: {k} clients exceed the {train_total} training samples"
                )),
                ShiftRegime::DomainShift if k != d.num_domains => p.push(format!(
                    "sweep.clients: domain-shift needs one client per domain ({}), got {k}",
                    d.num_domains
                )),
                ShiftRegime::Both if d.num_domains == 0 || k % d.num_domains != 0 => p.push(format!(
                    "sweep.clients: both-shift needs a multiple of {} clients, got {k}",
                    d.num_domains
                )),
                _ => {}
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// `output_dir`, resolved against [`OUT_ROOT_ENV`] when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// The Cartesian product of the sweep axes and the replicate seeds, in
    /// axis order clients → participation → rounds → beta → method → seed.
    pub fn cells(&self) -> Vec<CellSpec> {
        let s = &self.sweep;
        let mut out = Vec::new();
        for &clients in &s.clients {
            for &participation in &s.participation {
                for &rounds in &s.rounds {
                    for &beta in &s.beta {
                        for &method in &s.method {
                            for &seed in &self.seeds {
                                let key = CellKey {
                                    clients,
                                    participation,
                                    rounds,
                                    beta,
                                    method,
                                };
                                out.push(self.cell(key, seed));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn cell(&self, key: CellKey, seed: u64) -> CellSpec {
        let b = &self.base;
        let d = &self.dataset;
        let clients_per_domain = match self.partition.regime {
            ShiftRegime::Both => key.clients / d.num_domains.max(1),
            _ => 1,
        };
        CellSpec {
            federation: FederationConfig {
                clients: key.clients,
                rounds: key.rounds,
                participation: key.participation,
                local_iters: b.local_iters,
                eta: b.eta,
                tau: b.tau,
                batch_size: b.batch_size,
                method: key.method,
                master_seed: seed,
            },
            dataset: SyntheticDatasetSpec {
                num_classes: d.num_classes,
                num_domains: d.num_domains,
                samples_per_class_per_domain: d.samples_per_class_per_domain,
                raw_dim: d.raw_dim,
                sep: d.sep,
                noise: d.noise,
                seed,
            },
            partition: PartitionSpec {
                clients: key.clients,
                beta: key.beta,
                regime: self.partition.regime,
                clients_per_domain,
                seed,
            },
            encoder: EncoderDims {
                d: self.encoder.d,
                n_tok: self.encoder.n_tok,
                depth: self.encoder.depth,
                raw_dim: d.raw_dim,
                num_classes: d.num_classes,
            },
            prompts: PromptShape {
                text_len: self.prompts.text_len,
                vision_len: self.prompts.vision_len,
                d: self.encoder.d,
            },
            key,
            seed,
        }
    }
}

/// Reads and validates a plan file.
pub fn load_plan(path: &Path) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    ExperimentPlan::parse(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentPlan> {
        ExperimentPlan::parse(text, Path::new("plan.toml"))
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(parse(""), Err(Error::Parse { .. })));
        assert!(matches!(parse("  \n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let plan = parse("output_dir = \"x\"\n").unwrap();
        assert_eq!(plan.base.eta, 0.01);
        assert_eq!(plan.base.rounds, 20);
        assert_eq!(plan.base.tau, 0.05);
        assert_eq!(plan.base.local_iters, 5);
        assert_eq!(plan.base.batch_size, 32);
        assert_eq!(plan.sweep.beta, vec![0.1]);
        assert_eq!(plan.seeds, vec![0, 1, 2]);
        assert_eq!(plan.cells().len(), 3);
    }

    #[test]
    fn out_of_range_participation_names_the_field() {
        let err = parse("[sweep]\nparticipation = [1.5]\n").unwrap_err();
        let Error::Validation(problems) = err else {
            panic!("expected a validation error, got {err:?}");
        };
        assert!(problems.iter().any(|p| p.contains("sweep.participation")));
    }

    #[test]
    fn every_violation_is_listed() {
        let err = parse("seeds = []\n[base]\neta = -1.0\nparticipation = 0.0\n[sweep]\nclients = []\n").unwrap_err();
        let Error::Validation(problems) = err else {
            panic!("{err:?}");
        };
        assert_eq!(problems.len(), 4, "{problems:?}");
    }

    #[test]
    fn syntax_error_carries_the_location() {
        let err = parse("[base]\neta = = 3\n").unwrap_err();
        let Error::Parse { message, .. } = err else {
            panic!("{err:?}");
        };
        assert!(message.contains("line 2"), "{message}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(
            parse("[base]\nlearning_rate = 0.1\n"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn json_is_accepted() {
        let plan = ExperimentPlan::parse(
            r#"{"seeds": [4], "sweep": {"clients": [5, 10], "method": ["pfeddc", "no-fusion"]}}"#,
            Path::new("plan.json"),
        )
        .unwrap();
        assert_eq!(plan.cells().len(), 4);
    }

    #[test]
    fn both_shift_derives_clients_per_domain() {
        let plan = parse("seeds = [0]\n[partition]\nregime = \"both\"\n[sweep]\nclients = [15]\n").unwrap();
        let cell = &plan.cells()[0];
        assert_eq!(cell.partition.clients_per_domain, 5);
        assert!(parse("[partition]\nregime = \"both\"\n[sweep]\nclients = [10]\n").is_err());
    }

    #[test]
    fn product_of_axes_and_seeds() {
        let plan = parse("seeds = [0, 1, 2]\n[sweep]\nclients = [5, 10, 30, 50]\n").unwrap();
        let cells = plan.cells();
        assert_eq!(cells.len(), 12);
        let mut ids: Vec<String> = cells.iter().map(CellSpec::id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 12);
    }
}
