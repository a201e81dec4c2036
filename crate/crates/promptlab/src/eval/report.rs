//! Deterministic JSON reports. Field order is fixed by struct declaration
//! and map keys are sorted, so identical inputs serialize to identical
//! bytes.

use super::{EvalError, GenerationRun, Metrics};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub targets: BTreeMap<String, String>,
    pub prefix_count: usize,
    pub samples_per_prefix: usize,
    pub sentence_count: usize,
    pub truncated: usize,
    pub decode: crate::model::DecodeConfig,
    pub digests: super::RunDigests,
    pub metrics: Metrics,
    /// Effective configuration echo, so a report is re-runnable from itself.
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn from_run(run: &GenerationRun, metrics: Metrics) -> Self {
        Self {
            mode: run.mode.clone(),
            targets: run.targets.clone(),
            prefix_count: run.prefixes.len(),
            samples_per_prefix: run.samples_per_prefix,
            sentence_count: run.sentences.len(),
            truncated: run.truncated,
            decode: run.decode.clone(),
            digests: run.digests.clone(),
            metrics,
            config: None,
        }
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }
}

/// Writes the report; identical reports produce identical bytes.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, report.to_bytes()).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_report(path: &Path) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::BadDump {
        line: 0,
        reason: format!("report json: {e}"),
    })
}

/// One row of a multi-pair grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub targets: BTreeMap<String, String>,
    pub metrics: Metrics,
}

/// Aggregate over an attribute-pair grid: one row per pair plus averaged
/// metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub mode: String,
    pub pairs: Vec<PairRow>,
    pub average: Metrics,
    pub config: Option<serde_json::Value>,
}

pub fn grid_report(mode: &str, pairs: Vec<PairRow>) -> GridReport {
    let n = pairs.len().max(1) as f64;
    let mut correctness: BTreeMap<String, f64> = BTreeMap::new();
    let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
    for row in &pairs {
        for (f, v) in &row.metrics.correctness {
            *correctness.entry(f.clone()).or_insert(0.0) += v;
        }
        sums.0 += row.metrics.correctness_avg;
        sums.1 += row.metrics.ppl;
        sums.2 += row.metrics.dist1;
        sums.3 += row.metrics.dist2;
        sums.4 += row.metrics.dist3;
    }
    for v in correctness.values_mut() {
        *v /= n;
    }
    GridReport {
        mode: mode.to_string(),
        pairs,
        average: Metrics {
            correctness,
            correctness_avg: sums.0 / n,
            ppl: sums.1 / n,
            dist1: sums.2 / n,
            dist2: sums.3 / n,
            dist3: sums.4 / n,
        },
        config: None,
    }
}

impl GridReport {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("grid serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::RunDigests;
    use crate::model::DecodeConfig;

    fn metrics(avg: f64) -> Metrics {
        Metrics {
            correctness: BTreeMap::from([("SENTIMENT".to_string(), avg)]),
            correctness_avg: avg,
            ppl: 10.0,
            dist1: 0.1,
            dist2: 0.3,
            dist3: 0.5,
        }
    }

    fn report() -> EvalReport {
        EvalReport {
            mode: "mask-rp".into(),
            targets: BTreeMap::from([("SENTIMENT".to_string(), "POS".to_string())]),
            prefix_count: 15,
            samples_per_prefix: 20,
            sentence_count: 300,
            truncated: 0,
            decode: DecodeConfig::default(),
            digests: RunDigests::default(),
            metrics: metrics(0.9),
            config: None,
        }
    }

    #[test]
    fn report_round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let r = report();
        emit_report(&r, &path).unwrap();
        let a = std::fs::read(&path).unwrap();
        assert_eq!(parse_report(&path).unwrap(), r);
        emit_report(&r, &path).unwrap();
        let b = std::fs::read(&path).unwrap();
        assert_eq!(a, b, "identical reports must be byte-identical");
    }

    #[test]
    fn grid_carries_one_row_per_pair_plus_average() {
        let rows: Vec<PairRow> = (0..6)
            .map(|i| PairRow {
                targets: BTreeMap::from([
                    ("SENTIMENT".to_string(), format!("S{i}")),
                    ("TOPIC".to_string(), format!("T{i}")),
                ]),
                metrics: metrics(i as f64 / 10.0),
            })
            .collect();
        let grid = grid_report("concat", rows);
        assert_eq!(grid.pairs.len(), 6);
        let expect = (0..6).map(|i| i as f64 / 10.0).sum::<f64>() / 6.0;
        assert!((grid.average.correctness_avg - expect).abs() < 1e-12);
        assert!((grid.average.correctness["SENTIMENT"] - expect).abs() < 1e-12);
    }
}
