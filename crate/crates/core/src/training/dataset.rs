//! Dataset records and their JSON-lines files.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictors::LatentChemical;
use crate::sitegraph::{GraphTensors, ProteinSiteGraph};

/// A protein-ligand complex with its DSX score (negative is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlcRecord {
    pub id: String,
    pub site: ProteinSiteGraph,
    pub ligand: LatentChemical,
    pub dsx: f64,
    /// Planted archetype of synthetic records; diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetype: Option<usize>,
}

/// A ligand with its average toxicity label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToxRecord {
    pub ligand: LatentChemical,
    pub l_tox: f64,
}

/// A ligand with its `(logP, QED, SAS)` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropRecord {
    pub ligand: LatentChemical,
    pub phi: [f64; 3],
}

/// A dataset line type with its own invariants.
pub trait Record: Serialize + DeserializeOwned {
    fn validate(&self, location: &str) -> Result<()>;

    fn ligand(&self) -> &LatentChemical;
}

fn invalid(location: &str, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        location: format!("{location}{field}"),
        message: message.into(),
    }
}

fn check_ligand(location: &str, ligand: &LatentChemical) -> Result<()> {
    if ligand.dim() == 0 {
        return Err(invalid(location, "ligand", "empty latent vector"));
    }
    if let Some(i) = ligand.values().iter().position(|v| !v.is_finite()) {
        return Err(invalid(location, &format!("ligand[{i}]"), "not finite"));
    }
    Ok(())
}

impl Record for PlcRecord {
    fn validate(&self, location: &str) -> Result<()> {
        self.site.validate(&format!("{location}site."))?;
        check_ligand(location, &self.ligand)?;
        if !self.dsx.is_finite() {
            return Err(invalid(location, "dsx", "not finite"));
        }
        Ok(())
    }

    fn ligand(&self) -> &LatentChemical {
        &self.ligand
    }
}

impl Record for ToxRecord {
    fn validate(&self, location: &str) -> Result<()> {
        check_ligand(location, &self.ligand)?;
        if !(0.0..=1.0).contains(&self.l_tox) {
            return Err(invalid(
                location,
                "l_tox",
                format!("{} outside [0, 1]", self.l_tox),
            ));
        }
        Ok(())
    }

    fn ligand(&self) -> &LatentChemical {
        &self.ligand
    }
}

impl Record for PropRecord {
    fn validate(&self, location: &str) -> Result<()> {
        check_ligand(location, &self.ligand)?;
        if self.phi.iter().any(|v| !v.is_finite()) {
            return Err(invalid(location, "phi", "not finite"));
        }
        if !(0.0..=1.0).contains(&self.phi[1]) {
            return Err(invalid(location, "phi[1]", "QED outside [0, 1]"));
        }
        if self.phi[2] <= 0.0 {
            return Err(invalid(location, "phi[2]", "SAS must be positive"));
        }
        Ok(())
    }

    fn ligand(&self) -> &LatentChemical {
        &self.ligand
    }
}

/// Parses one JSON line; errors carry `line N: field.path`.
pub fn parse_record<T: Record>(line: &str, line_no: usize) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    let record: T = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        location: format!("line {line_no}: {}", e.path()),
        message: e.inner().to_string(),
    })?;
    record.validate(&format!("line {line_no}: "))?;
    Ok(record)
}

pub fn load_dataset<T: Record>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<T> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = parse_record(&line, i + 1)?;
        if let Some(first) = records.first() {
            if first.ligand().dim() != record.ligand().dim() {
                return Err(Error::Parse {
                    location: format!("line {}: ligand", i + 1),
                    message: format!(
                        "latent width {} differs from {}",
                        record.ligand().dim(),
                        first.ligand().dim()
                    ),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn save_dataset<T: Record>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Deterministic shuffle-and-split into (train, validation).
pub fn split_validation<T: Clone>(records: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((records.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(records.len().saturating_sub(1));
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| records[i].clone()).collect(),
        val.into_iter().map(|i| records[i].clone()).collect(),
    )
}

/// A PLC record with its graph tensors precomputed.
#[derive(Debug, Clone)]
pub struct PreparedPlc {
    pub record: PlcRecord,
    pub graph: GraphTensors,
}

impl PreparedPlc {
    pub fn new(record: PlcRecord) -> Self {
        let graph = GraphTensors::new(&record.site);
        PreparedPlc { record, graph }
    }

    pub fn prepare_all(records: &[PlcRecord]) -> Vec<PreparedPlc> {
        use rayon::prelude::*;
        records
            .par_iter()
            .map(|r| PreparedPlc::new(r.clone()))
            .collect()
    }
}
