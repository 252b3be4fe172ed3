//! CSV and JSON artifacts. Every CSV has a header row and is read back by
//! the matching `read_*` function.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use arlab_core::diagnostics::{Histogram, SpectralReport};
use arlab_core::geometry::SegmentDecomposition;
use arlab_core::losses::MarginRecord;
use arlab_core::training::TrainLog;

use crate::error::{CliError, Result};

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|source| CliError::File {
                path: dir.display().to_string(),
                source,
            })?;
        }
    }
    File::create(path).map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|source| CliError::File {
        path: path.display().to_string(),
        source,
    })?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub adv_acc: Option<f64>,
    pub lr: f64,
    pub batch_loss: f64,
    pub max_perturbation: f64,
}

pub fn log_rows(log: &TrainLog) -> Vec<LogRow> {
    log.epochs
        .iter()
        .map(|e| LogRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            test_loss: e.test_loss,
            train_err: e.train_err,
            test_err: e.test_err,
            adv_acc: e.adv_acc,
            lr: e.lr,
            batch_loss: e.batch_loss,
            max_perturbation: e.max_perturbation,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub sample_id: usize,
    pub split: String,
    pub label: usize,
    pub margin: f64,
    pub prob_y: f64,
    pub ce_loss: f64,
    pub correct: bool,
}

pub fn margin_rows(records: &[MarginRecord]) -> Vec<MarginRow> {
    records
        .iter()
        .map(|r| MarginRow {
            sample_id: r.sample_id,
            split: r.split.as_str().to_string(),
            label: r.label,
            margin: r.margin,
            prob_y: r.prob_y,
            ce_loss: r.ce_loss,
            correct: r.correct,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectraRow {
    pub layer: usize,
    pub index: usize,
    pub sigma: f64,
}

pub fn spectra_rows(report: &SpectralReport) -> Vec<SpectraRow> {
    report
        .layers
        .iter()
        .flat_map(|l| {
            l.sigma.iter().enumerate().map(move |(i, &s)| SpectraRow {
                layer: l.layer,
                index: i,
                sigma: s,
            })
        })
        .collect()
}

/// Underflow and overflow appear as the first and last rows with infinite
/// outer edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

pub fn histogram_rows(h: &Histogram) -> Vec<HistRow> {
    let mut rows = vec![HistRow {
        bin_lo: f64::NEG_INFINITY,
        bin_hi: h.lo,
        count: h.underflow,
    }];
    rows.extend(h.counts.iter().enumerate().map(|(i, &count)| {
        let (bin_lo, bin_hi) = h.bin_edges(i);
        HistRow {
            bin_lo,
            bin_hi,
            count,
        }
    }));
    rows.push(HistRow {
        bin_lo: h.hi,
        bin_hi: f64::INFINITY,
        count: h.overflow,
    });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub j: usize,
    pub s_j: f64,
    pub e_j: f64,
    pub per_segment_norm: f64,
}

pub fn segment_rows(d: &SegmentDecomposition) -> Vec<SegmentRow> {
    d.segments
        .iter()
        .enumerate()
        .map(|(j, s)| SegmentRow {
            j: j + 1,
            s_j: s.start,
            e_j: s.end,
            per_segment_norm: s.norm,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub eps: f64,
    pub eps_255: f64,
    pub seed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub loss_gap: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub err_gap: f64,
    pub adv_acc: Option<f64>,
    pub margin_iqr: f64,
    pub margin_median: f64,
    pub mean_sv_std: f64,
    pub spectral_complexity: f64,
    pub loss_variation_mean: f64,
    pub u_min: f64,
    pub bound: f64,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

impl SummaryRow {
    pub fn failed(eps: f64, seed: u64, err: &CliError) -> Self {
        Self {
            eps,
            eps_255: eps * 255.0,
            seed,
            train_loss: f64::NAN,
            test_loss: f64::NAN,
            loss_gap: f64::NAN,
            train_err: f64::NAN,
            test_err: f64::NAN,
            err_gap: f64::NAN,
            adv_acc: None,
            margin_iqr: f64::NAN,
            margin_median: f64::NAN,
            mean_sv_std: f64::NAN,
            spectral_complexity: f64::NAN,
            loss_variation_mean: f64::NAN,
            u_min: f64::NAN,
            bound: f64::NAN,
            status: format!("failed: {err}"),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}
