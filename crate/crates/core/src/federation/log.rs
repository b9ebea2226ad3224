use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "round,client_id,split,loss,accuracy,method,seed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Local-training statistics of a participating client.
    Train,
    /// Personalized evaluation on the client's test samples.
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based.
    pub round: usize,
    pub client_id: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean and population standard deviation over the round's test rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub method: Option<Method>,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub summaries: Vec<RoundSummary>,
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RoundLog {
    pub(crate) fn close_round(&mut self, round: usize) {
        let rows: Vec<&RoundRecord> = self
            .records
            .iter()
            .filter(|r| r.round == round && r.split == Split::Test)
            .collect();
        let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let loss: Vec<f64> = rows.iter().map(|r| r.loss).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_loss, std_loss) = mean_std(&loss);
        self.summaries.push(RoundSummary {
            round,
            mean_accuracy,
            std_accuracy,
            mean_loss,
            std_loss,
        });
    }

    pub fn final_summary(&self) -> Option<&RoundSummary> {
        self.summaries.last()
    }

    /// CSV with [`CSV_HEADER`]; floats use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let method = self.method.map_or("", Method::name);
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.round,
                r.client_id,
                r.split.name(),
                r.loss,
                r.accuracy,
                method,
                self.seed
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}
