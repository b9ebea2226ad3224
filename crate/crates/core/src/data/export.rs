//! Text export of samples and JSON partition manifests.
//!
//! Sample files hold one sample per line as three tab-separated fields:
//! `domain`, `label`, and the raw values joined by commas.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PartitionSpec, Sample};
use crate::error::{Error, Result};

pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let values: Vec<String> = s.raw.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("{}\t{}\t{}\n", s.domain, s.label, values.join(",")));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let parse_err = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut fields = line.split('\t');
            let (Some(d), Some(l), Some(v), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
                return Err(parse_err(i + 1, "expected 3 tab-separated fields"));
            };
            let domain = d.parse().map_err(|_| parse_err(i + 1, "bad domain"))?;
            let label = l.parse().map_err(|_| parse_err(i + 1, "bad label"))?;
            let raw = v
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err(i + 1, "bad raw value"))?;
            Ok(Sample { raw, label, domain })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client: usize,
    pub indices: Vec<usize>,
}

/// Client → training-sample indices, with the spec that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub partition: PartitionSpec,
    pub clients: Vec<ClientShard>,
}

impl PartitionManifest {
    pub fn new(partition: PartitionSpec, shards: &[Vec<usize>]) -> Self {
        Self {
            partition,
            clients: shards
                .iter()
                .enumerate()
                .map(|(client, s)| ClientShard {
                    client,
                    indices: s.clone(),
                })
                .collect(),
        }
    }
}

pub fn write_manifest(path: &Path, manifest: &PartitionManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(path, json).map_err(|e| Error::io(format!("write {}", path.display()), e))
}
