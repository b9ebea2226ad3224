use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::{CellKey, CellSpec, ExperimentPlan};
use crate::data::{generate_dataset, partition};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::federation::{run_federation, FederationOutcome, Setup};

/// Builds the dataset, encoder and partition of `cell` and runs it.
pub fn run_cell(cell: &CellSpec) -> Result<FederationOutcome> {
    let dataset = generate_dataset(&cell.dataset)?;
    let encoder = FrozenEncoder::new(cell.seed, cell.encoder)?;
    let shards = partition(&dataset.train, cell.dataset.num_domains, &cell.partition)?;
    let setup = Setup {
        encoder: &encoder,
        dataset: &dataset,
        shards: &shards,
        prompt_shape: cell.prompts,
    };
    run_federation(&cell.federation, &setup)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Everything needed to reproduce one cell, written when the cell starts and
/// rewritten when it ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub cell: CellSpec,
    pub version: String,
    pub status: RunStatus,
    /// Relative to the plan's output directory.
    pub csv: PathBuf,
    pub encoder_sha256: Option<String>,
    pub duration_secs: Option<f64>,
    pub error: Option<String>,
}

/// Replicate statistics for one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: CellKey,
    /// Seeds that completed, in plan order.
    pub seeds: Vec<u64>,
    /// Final-round mean personalized accuracy per seed.
    pub final_accuracy: Vec<f64>,
    pub final_loss: Vec<f64>,
    /// NaN, written as `null`, when no seed completed; likewise below.
    #[serde(with = "nan_as_null")]
    pub mean_accuracy: f64,
    /// Population standard deviation over seeds.
    #[serde(with = "nan_as_null")]
    pub std_accuracy: f64,
    #[serde(with = "nan_as_null")]
    pub mean_loss: f64,
    #[serde(with = "nan_as_null")]
    pub std_loss: f64,
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub cells: Vec<CellSummary>,
    /// Ids of runs that failed.
    pub failed: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Re-run cells that already completed.
    pub force: bool,
    /// Number of cells to run at once; 0 or 1 runs them in order.
    pub parallel: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanReport {
    pub output_dir: PathBuf,
    pub summary_path: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    /// `(run id, error)`
    pub failed: Vec<(String, String)>,
}

impl PlanReport {
    pub fn succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

pub fn cell_csv_path(out: &Path, id: &str) -> PathBuf {
    out.join("cells").join(format!("{id}.csv"))
}

pub fn cell_manifest_path(out: &Path, id: &str) -> PathBuf {
    out.join("cells").join(format!("{id}.manifest.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn is_complete(out: &Path, cell: &CellSpec) -> bool {
    let id = cell.id();
    let Ok(text) = fs::read_to_string(cell_manifest_path(out, &id)) else {
        return false;
    };
    let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) else {
        return false;
    };
    manifest.status == RunStatus::Complete && manifest.cell == *cell && cell_csv_path(out, &id).is_file()
}

fn execute(out: &Path, cell: &CellSpec) -> Result<()> {
    let id = cell.id();
    let manifest_path = cell_manifest_path(out, &id);
    let mut manifest = RunManifest {
        cell: cell.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: RunStatus::Running,
        csv: PathBuf::from("cells").join(format!("{id}.csv")),
        encoder_sha256: None,
        duration_secs: None,
        error: None,
    };
    write_json(&manifest_path, &manifest)?;
    let start = Instant::now();
    let result = run_cell(cell).and_then(|outcome| outcome.log.write_csv(&cell_csv_path(out, &id)));
    manifest.duration_secs = Some(start.elapsed().as_secs_f64());
    match &result {
        Ok(()) => {
            manifest.status = RunStatus::Complete;
            manifest.encoder_sha256 = Some(hex::encode(FrozenEncoder::new(cell.seed, cell.encoder)?.fingerprint()));
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
        }
    }
    write_json(&manifest_path, &manifest)?;
    result
}

/// `(mean accuracy, mean loss)` over the test rows of the last round of a
/// run log in CSV form.
pub fn final_metrics_from_csv(csv: &str) -> Result<(f64, f64)> {
    let mut rows = Vec::new();
    for (n, line) in csv.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Record(format!("malformed CSV row {}: {line:?}", n + 1));
        if fields.len() != 7 {
            return Err(bad());
        }
        let round: usize = fields[0].parse().map_err(|_| bad())?;
        if fields[2] == "test" {
            let loss: f64 = fields[3].parse().map_err(|_| bad())?;
            let acc: f64 = fields[4].parse().map_err(|_| bad())?;
            rows.push((round, acc, loss));
        }
    }
    let last = rows
        .iter()
        .map(|r| r.0)
        .max()
        .ok_or_else(|| Error::Record("log has no test rows".into()))?;
    let finals: Vec<&(usize, f64, f64)> = rows.iter().filter(|r| r.0 == last).collect();
    let n = finals.len() as f64;
    Ok((
        finals.iter().map(|r| r.1).sum::<f64>() / n,
        finals.iter().map(|r| r.2).sum::<f64>() / n,
    ))
}

fn summarize(plan: &ExperimentPlan, out: &Path, failed: &[(String, String)]) -> Result<PlanSummary> {
    let mut summary = PlanSummary {
        failed: failed.iter().map(|(id, _)| id.clone()).collect(),
        ..PlanSummary::default()
    };
    let cells = plan.cells();
    for group in cells.chunks(plan.seeds.len()) {
        let mut s = CellSummary {
            key: group[0].key.clone(),
            seeds: Vec::new(),
            final_accuracy: Vec::new(),
            final_loss: Vec::new(),
            mean_accuracy: f64::NAN,
            std_accuracy: f64::NAN,
            mean_loss: f64::NAN,
            std_loss: f64::NAN,
        };
        for cell in group {
            let id = cell.id();
            if summary.failed.contains(&id) {
                continue;
            }
            let path = cell_csv_path(out, &id);
            let csv = fs::read_to_string(&path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
            let (acc, loss) = final_metrics_from_csv(&csv)?;
            s.seeds.push(cell.seed);
            s.final_accuracy.push(acc);
            s.final_loss.push(loss);
        }
        (s.mean_accuracy, s.std_accuracy) = crate::federation::mean_std(&s.final_accuracy);
        (s.mean_loss, s.std_loss) = crate::federation::mean_std(&s.final_loss);
        summary.cells.push(s);
    }
    Ok(summary)
}

/// Runs every cell of `plan` not already complete and writes
/// `<out>/cells/<id>.csv`, `<out>/cells/<id>.manifest.json` and
/// `<out>/summary.json`.
///
/// A failed cell does not stop the others; it is listed in the report and in
/// the summary. Files whose content would not change are left untouched, so a
/// finished plan re-run without `force` writes nothing.
pub fn run_plan(plan: &ExperimentPlan, out: &Path, opts: RunOptions) -> Result<PlanReport> {
    plan.validate()?;
    fs::create_dir_all(out.join("cells")).map_err(|e| Error::io(format!("create {}", out.display()), e))?;

    let cells = plan.cells();
    let (todo, done): (Vec<&CellSpec>, Vec<&CellSpec>) = cells.iter().partition(|c| opts.force || !is_complete(out, c));
    let run_one = |c: &&CellSpec| (c.id(), execute(out, c).err().map(|e| e.to_string()));
    let results: Vec<(String, Option<String>)> = if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| todo.par_iter().map(run_one).collect())
    } else {
        todo.iter().map(run_one).collect()
    };

    let mut report = PlanReport {
        output_dir: out.to_path_buf(),
        summary_path: out.join("summary.json"),
        executed: Vec::new(),
        skipped: done.iter().map(|c| c.id()).collect(),
        failed: Vec::new(),
    };
    for (id, err) in results {
        match err {
            None => report.executed.push(id),
            Some(e) => report.failed.push((id, e)),
        }
    }

    let summary = summarize(plan, out, &report.failed)?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    if fs::read_to_string(&report.summary_path).ok().as_deref() != Some(text.as_str()) {
        fs::write(&report.summary_path, text)
            .map_err(|e| Error::io(format!("write {}", report.summary_path.display()), e))?;
    }
    Ok(report)
}

pub fn read_summary(path: &Path) -> Result<PlanSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_metrics_use_last_round_test_rows() {
        let csv = "round,client_id,split,loss,accuracy,method,seed\n\
                   1,0,test,9,0,pfeddc,0\n\
                   2,0,train,5,1,pfeddc,0\n\
                   2,0,test,1,0.5,pfeddc,0\n\
                   2,1,test,3,1,pfeddc,0\n";
        assert_eq!(final_metrics_from_csv(csv).unwrap(), (0.75, 2.0));
        assert!(final_metrics_from_csv("header\n1,2\n").is_err());
        assert!(final_metrics_from_csv("header\n").is_err());
    }
}
