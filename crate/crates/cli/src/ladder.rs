//! Trains one network per (radius, seed), diagnoses each and collects a
//! summary table.

use std::path::{Path, PathBuf};

use arlab_core::data::Dataset;
use arlab_core::diagnostics::{BoundInputs, BoundOptions};
use arlab_core::training::train_adversarial;

use crate::artifacts::{write_csv, SummaryRow};
use crate::commands::{run_bound, run_diagnostics, save_run, DiagSettings};
use crate::config::ExperimentConfig;
use crate::error::Result;

pub const SUMMARY_CSV: &str = "ladder_summary.csv";
pub const CONFIG_TXT: &str = "ladder_config.txt";
pub const CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone)]
pub struct LadderCell {
    pub eps: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub row: SummaryRow,
    /// Per-layer singular-value standard deviations.
    pub layer_stds: Vec<f64>,
}

pub fn cell_dir(eps: f64, seed: u64) -> String {
    format!("eps_{eps}_seed_{seed}")
}

fn run_cell(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    eps: f64,
    seed: u64,
    dir: &Path,
) -> Result<(SummaryRow, Vec<f64>)> {
    let tc = cfg.train_config(eps, seed);
    let (net, log) = train_adversarial(&tc, train, test)?;
    save_run(&dir.join(CHECKPOINT), &net, &log, &tc, cfg, train, test)?;
    let report = run_diagnostics(
        &net,
        train,
        test,
        &DiagSettings::from_config(cfg, seed),
        dir,
    )?;
    let inputs = BoundInputs {
        gamma: cfg.gamma,
        epsilon: cfg.bound_eps,
        c_x: cfg.bound_cx,
        k: cfg.bound_k,
        m: train.len(),
        eta: cfg.bound_eta,
    };
    let opts = BoundOptions {
        subsample: cfg.bound_subsample,
        seed,
        ..BoundOptions::default()
    };
    let bound = run_bound(&net, train, &inputs, &opts, dir)?;
    let ge = report.ge;
    let row = SummaryRow {
        eps,
        eps_255: eps * 255.0,
        seed,
        train_loss: ge.train_loss,
        test_loss: ge.test_loss,
        loss_gap: ge.loss_gap,
        train_err: ge.train_err,
        test_err: ge.test_err,
        err_gap: ge.err_gap,
        adv_acc: log.last().and_then(|e| e.adv_acc),
        margin_iqr: report.margin_test.iqr,
        margin_median: report.margin_test.median,
        mean_sv_std: report.spectra.mean_std,
        spectral_complexity: report.spectra.spectral_complexity,
        loss_variation_mean: report.loss_variation.mean,
        u_min: bound.u_min,
        bound: bound.bound,
        status: "ok".into(),
    };
    Ok((row, report.spectra.layers.iter().map(|l| l.std).collect()))
}

/// Runs every cell in `(eps, seed)` order; a failing cell becomes a
/// `failed: ...` row and the ladder moves on.
pub fn run_ladder(cfg: &ExperimentConfig, base: &Path, out_dir: &Path) -> Result<Vec<LadderCell>> {
    cfg.validate()?;
    let (train, test) = cfg.data.load(base)?;
    std::fs::create_dir_all(out_dir).map_err(arlab_core::Error::from)?;
    std::fs::write(out_dir.join(CONFIG_TXT), cfg.render()).map_err(arlab_core::Error::from)?;
    let mut cells = Vec::new();
    for &eps in &cfg.ladder_eps {
        for &seed in &cfg.ladder_seeds {
            let dir = out_dir.join(cell_dir(eps, seed));
            let (row, layer_stds) = match run_cell(cfg, &train, &test, eps, seed, &dir) {
                Ok(r) => r,
                Err(e) => (SummaryRow::failed(eps, seed, &e), Vec::new()),
            };
            cells.push(LadderCell {
                eps,
                seed,
                dir,
                row,
                layer_stds,
            });
        }
    }
    let rows: Vec<SummaryRow> = cells.iter().map(|c| c.row.clone()).collect();
    write_csv(&out_dir.join(SUMMARY_CSV), &rows)?;
    Ok(cells)
}
