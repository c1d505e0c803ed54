//! Evaluation metrics, summaries and report CSVs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictors::LatentChemical;

/// Floor on the squared distance in [`r_e`].
pub const R_E_EPS: f64 = 1e-12;
/// Default score threshold for the restricted delta set.
pub const DELTA_THRESHOLD: f64 = -100.0;

/// Log ratio of the prior's expected squared distance to the mapper's.
///
/// `ln((‖C‖² + dim) / max(‖C − Ĉ‖², ε))`; positive when the mapped point
/// `Ĉ` is closer to `C` than a standard-normal draw is in expectation.
pub fn r_e(c: &LatentChemical, mapped: &LatentChemical) -> Result<f64> {
    if c.dim() != mapped.dim() {
        return Err(Error::dim("r_e", &[c.dim()], &[mapped.dim()]));
    }
    let expected = c.squared_norm() + c.dim() as f64;
    Ok((expected / c.squared_distance(mapped).max(R_E_EPS)).ln())
}

fn check_pair(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::dim(op, &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Data(format!(
            "{op} needs at least 2 points, got {}",
            x.len()
        )));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("pearson", x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric {
            what: "correlation of a constant input is undefined".into(),
        });
    }
    // sqrt of the product keeps r exactly ±1 for identical or mirrored inputs.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("spearman", x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Probability a positive outscores a negative, ties counted half.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "auroc needs both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let ranks = average_ranks(&all);
    let rank_sum: f64 = ranks[..pos.len()].iter().sum();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub se: f64,
    pub median: f64,
    pub stddev: f64,
    pub count: usize,
}

/// Summary with the sample (n − 1) standard deviation; 0 for one value.
pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    if values.is_empty() {
        return Err(Error::Data("cannot summarise an empty set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let stddev = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    Ok(MetricSummary {
        mean,
        se: stddev / n.sqrt(),
        median,
        stddev,
        count: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    /// `baseline − optimized` per target.
    pub delta: Vec<f64>,
    /// Deltas of targets whose optimized score is below the threshold.
    pub delta_restricted: Vec<f64>,
    pub fraction_better: f64,
    pub threshold: f64,
}

impl DeltaStats {
    pub fn summary(&self) -> Result<MetricSummary> {
        summarize(&self.delta)
    }

    pub fn restricted_summary(&self) -> Option<MetricSummary> {
        summarize(&self.delta_restricted).ok()
    }
}

pub fn delta_stats(baseline: &[f64], optimized: &[f64], threshold: f64) -> Result<DeltaStats> {
    if baseline.len() != optimized.len() {
        return Err(Error::dim(
            "delta_stats",
            &[baseline.len()],
            &[optimized.len()],
        ));
    }
    if baseline.is_empty() {
        return Err(Error::Data("delta_stats needs at least one target".into()));
    }
    let delta: Vec<f64> = baseline.iter().zip(optimized).map(|(b, o)| b - o).collect();
    let delta_restricted = delta
        .iter()
        .zip(optimized)
        .filter(|(_, &o)| o < threshold)
        .map(|(&d, _)| d)
        .collect();
    let better = delta.iter().filter(|&&d| d > 0.0).count();
    Ok(DeltaStats {
        fraction_better: better as f64 / delta.len() as f64,
        delta,
        delta_restricted,
        threshold,
    })
}

/// Equal-width histogram: `bins + 1` edges and `bins` counts.
pub fn histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let bins = bins.max(1);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return (vec![0.0; bins + 1], vec![0; bins]);
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for v in finite {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    (edges, counts)
}

/// A named CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// A histogram table with columns `bin_lo, bin_hi, count`.
    pub fn histogram(name: &str, values: &[f64], bins: usize) -> Self {
        let (edges, counts) = histogram(values, bins);
        let mut t = Table::new(name, &["bin_lo", "bin_hi", "count"]);
        for (i, c) in counts.iter().enumerate() {
            t.push(vec![fmt(edges[i]), fmt(edges[i + 1]), c.to_string()]);
        }
        t
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(&self.header).map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            w.write_record(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(name: &str, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(
                rec.map_err(|e| csv_err(path, e))?
                    .iter()
                    .map(str::to_string)
                    .collect(),
            );
        }
        Ok(Table {
            name: name.to_string(),
            header,
            rows,
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            location: path.display().to_string(),
            message: format!("{other:?}"),
        },
    }
}

/// Shortest round-trip formatting for CSV cells.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Writes each table to `dir/<name>.csv`.
pub fn emit_report(dir: &Path, tables: &[Table]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.csv", t.name));
            t.write_csv(&path)?;
            Ok(path)
        })
        .collect()
}
