//! Report tables and their CSV / JSON files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AUROC_CSV: &str = "auroc.csv";
pub const ASR_CSV: &str = "asr.csv";
pub const SCORES_CSV: &str = "scores.csv";
pub const SELFSIM_CSV: &str = "selfsim.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// One AUROC cell, keyed by the plot axes model / dataset / attack / strength / filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocRow {
    pub config_hash: String,
    pub seed: u64,
    pub replicate: u64,
    pub model: String,
    pub dataset: String,
    pub attack: String,
    pub strength: String,
    pub n_attacked: usize,
    pub cell: String,
    /// `none` for the ODIN and isolation-forest baselines.
    pub filter: String,
    pub statistic: String,
    pub auroc: f64,
    pub n_clean: usize,
    pub n_adv: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRow {
    pub config_hash: String,
    pub seed: u64,
    pub replicate: u64,
    pub model: String,
    pub dataset: String,
    pub attack: String,
    pub strength: String,
    pub n_attacked: usize,
    pub cell: String,
    pub scenario: String,
    /// Mean over sets of the per-set mean episode ASR.
    pub mean: f64,
    /// Standard deviation of the per-set ASR across sets.
    pub sd: f64,
    pub n_sets: usize,
}

/// One raw detection score of one support set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub cell: String,
    pub set_id: String,
    pub class: usize,
    pub is_adversarial: bool,
    pub filter: String,
    pub statistic: String,
    pub value: f64,
}

/// Leave-one-out self-classification accuracy of one support set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimRow {
    pub cell: String,
    pub set_id: String,
    pub class: usize,
    pub is_adversarial: bool,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimSummary {
    pub cell: String,
    pub clean_mean: f64,
    pub adv_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AeSummary {
    pub rmse_standard: Option<f64>,
    pub feature_error_standard: Option<f64>,
    pub feature_error_fpa: Option<f64>,
    pub feature_error_fpa_prime: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub replicate: u64,
    /// Derived stream seeds, by stage.
    pub seeds: BTreeMap<String, u64>,
    pub model: String,
    pub dataset: String,
    pub clean_accuracy: f64,
    pub clean_accuracy_ci95: f64,
    pub autoencoder: AeSummary,
    pub iforest_trees: usize,
    pub self_similarity: Vec<SelfSimSummary>,
    /// Cells or stages that failed, with the reason.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: Summary,
    pub auroc: Vec<AurocRow>,
    pub asr: Vec<AsrRow>,
    pub scores: Vec<ScoreRow>,
    pub selfsim: Vec<SelfSimRow>,
}

impl EvalReport {
    pub fn auroc_of(&self, cell: &str, filter: &str, statistic: &str) -> Option<f64> {
        self.auroc
            .iter()
            .find(|r| r.cell == cell && r.filter == filter && r.statistic == statistic)
            .map(|r| r.auroc)
    }

    pub fn asr_of(&self, cell: &str, scenario: &str) -> Option<&AsrRow> {
        self.asr.iter().find(|r| r.cell == cell && r.scenario == scenario)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Input(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Csv(e)
    }
}

/// Writes the four CSV tables and `summary.json` into `dir`.
pub fn report_write(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join(AUROC_CSV), &report.auroc)?;
    write_csv(&dir.join(ASR_CSV), &report.asr)?;
    write_csv(&dir.join(SCORES_CSV), &report.scores)?;
    write_csv(&dir.join(SELFSIM_CSV), &report.selfsim)?;
    let json = serde_json::to_string_pretty(&report.summary)
        .map_err(|e| Error::Input(format!("summary serialisation: {e}")))?;
    let path = dir.join(SUMMARY_JSON);
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads back a report written by [`report_write`].
pub fn report_read(dir: &Path) -> Result<EvalReport> {
    let path = dir.join(SUMMARY_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary = serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(EvalReport {
        summary,
        auroc: read_csv(&dir.join(AUROC_CSV))?,
        asr: read_csv(&dir.join(ASR_CSV))?,
        scores: read_csv(&dir.join(SCORES_CSV))?,
        selfsim: read_csv(&dir.join(SELFSIM_CSV))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        let mut seeds = BTreeMap::new();
        seeds.insert("attack".to_string(), 99);
        EvalReport {
            summary: Summary {
                config_hash: "abc".into(),
                seed: 1,
                replicate: 0,
                seeds,
                model: "protonet".into(),
                dataset: "synth".into(),
                clean_accuracy: 0.98,
                clean_accuracy_ci95: 0.01,
                autoencoder: AeSummary::default(),
                iforest_trees: 50,
                self_similarity: vec![],
                missing: vec![],
            },
            auroc: vec![AurocRow {
                config_hash: "abc".into(),
                seed: 1,
                replicate: 0,
                model: "protonet".into(),
                dataset: "synth".into(),
                attack: "pgd".into(),
                strength: "12/255".into(),
                n_attacked: 5,
                cell: "pgd-eps12".into(),
                filter: "fpa".into(),
                statistic: "u_adv".into(),
                auroc: 0.1 + 0.2,
                n_clean: 30,
                n_adv: 30,
            }],
            asr: vec![],
            scores: vec![ScoreRow {
                cell: "pgd-eps12".into(),
                set_id: "c0001_r000".into(),
                class: 1,
                is_adversarial: true,
                filter: "none".into(),
                statistic: "odin".into(),
                value: 1.0 / 3.0,
            }],
            selfsim: vec![],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        report_write(&r, dir.path()).unwrap();
        assert_eq!(report_read(dir.path()).unwrap(), r);
    }

    #[test]
    fn unwritable_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "x").unwrap();
        assert!(matches!(report_write(&sample(), &file), Err(Error::Io { .. })));
    }
}
