//! One function per subcommand. Relative paths resolve against the output
//! directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use arlab_core::attacks::{adversarial_accuracy, attack_dataset, AttackConfig, AttackMethod};
use arlab_core::data::Dataset;
use arlab_core::diagnostics::{
    bound_evaluate_with, ge_report, loss_variation, margin_distribution,
    probability_and_loss_histograms, singular_spectra_report, BoundInputs, BoundOptions,
    BoundReport, GeReport, MarginSummary,
};
use arlab_core::geometry::{trace_segment, verify_lemma1, Lemma1Check};
use arlab_core::losses::{argmax, Split};
use arlab_core::model::Network;
use arlab_core::training::{train_adversarial, EpochLog, TrainConfig, TrainLog};

use crate::artifacts::{
    histogram_rows, log_rows, margin_rows, segment_rows, spectra_rows, write_csv, write_json,
};
use crate::config::{resolve, ExperimentConfig};
use crate::error::{usage, Result};

pub const LOG_CSV: &str = "log.csv";
pub const MARGINS_CSV: &str = "margins.csv";
pub const SPECTRA_CSV: &str = "spectra.csv";
pub const REPORT_JSON: &str = "report.json";
pub const BOUND_JSON: &str = "bound.json";
pub const SEGMENTS_CSV: &str = "segments.csv";
pub const LEMMA1_JSON: &str = "lemma1.json";
pub const HIST_MARGIN_TRAIN: &str = "hist_margin_train.csv";
pub const HIST_MARGIN_TEST: &str = "hist_margin_test.csv";
pub const HIST_PROB: &str = "hist_prob_test.csv";
pub const HIST_LOSS: &str = "hist_loss_test.csv";

/// Sidecar written next to every checkpoint as `<ckpt>.json`.
#[derive(Debug, Serialize)]
pub struct CheckpointMeta<'a> {
    pub widths: Vec<usize>,
    pub train_config: &'a TrainConfig,
    pub train_data: &'a str,
    pub test_data: &'a str,
    pub final_epoch: Option<&'a EpochLog>,
    /// Full experiment configuration in `key = value` form.
    pub config: String,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Saves the checkpoint, its sidecar and `log.csv` beside it.
pub fn save_run(
    ckpt: &Path,
    net: &Network,
    log: &TrainLog,
    tc: &TrainConfig,
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<()> {
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(arlab_core::Error::from)?;
    }
    net.save(ckpt)?;
    let meta = CheckpointMeta {
        widths: net.widths(),
        train_config: tc,
        train_data: train.name(),
        test_data: test.name(),
        final_epoch: log.last(),
        config: cfg.render(),
    };
    write_json(&sidecar_path(ckpt), &meta)?;
    write_csv(&parent_dir(ckpt).join(LOG_CSV), &log_rows(log))
}

pub fn train(base: &Path, config: &Path, out: &Path) -> Result<(Network, TrainLog)> {
    let cfg = ExperimentConfig::load(&resolve(base, config))?;
    let (train, test) = cfg.data.load(base)?;
    let tc = cfg.train_config(cfg.adv_eps, cfg.seed);
    let (net, log) = train_adversarial(&tc, &train, &test)?;
    save_run(&resolve(base, out), &net, &log, &tc, &cfg, &train, &test)?;
    Ok((net, log))
}

pub fn gen_data(
    base: &Path,
    config: &Path,
    train_out: &Path,
    test_out: &Path,
) -> Result<(Dataset, Dataset)> {
    let cfg = ExperimentConfig::load(&resolve(base, config))?;
    let (train, test) = cfg.data.load(base)?;
    for (d, p) in [(&train, train_out), (&test, test_out)] {
        let path = resolve(base, p);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(arlab_core::Error::from)?;
        }
        d.save(path)?;
    }
    Ok((train, test))
}

#[derive(Debug, Serialize)]
pub struct AttackSummary {
    pub method: AttackMethod,
    pub eps: f64,
    pub eps_255: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
    pub samples: usize,
    pub clean_acc: f64,
    /// Fraction of originally correct samples that stay correct.
    pub adv_acc: Option<f64>,
    /// Fraction of samples whose prediction changed.
    pub flip_rate: f64,
    pub max_linf: f64,
}

pub fn attack(
    base: &Path,
    ckpt: &Path,
    data: &Path,
    cfg: &AttackConfig,
    out: &Path,
) -> Result<AttackSummary> {
    let net = Network::load(resolve(base, ckpt))?;
    let data = Dataset::load(resolve(base, data))?;
    if data.is_empty() {
        return usage("attack data set is empty");
    }
    let adv = attack_dataset(&net, &data, cfg, None)?;
    let adv_set = Dataset::new(
        format!("{}-adv", data.name()),
        data.dim(),
        data.num_classes(),
        adv.clone(),
        data.labels().to_vec(),
    )?;
    let out = resolve(base, out);
    adv_set.save(&out)?;
    let d = data.dim();
    let mut flips = 0;
    let mut correct = 0;
    let mut max_linf = 0.0f64;
    for i in 0..data.len() {
        let before = argmax(&net.logits(data.input(i))?);
        let after = argmax(&net.logits(&adv[i * d..(i + 1) * d])?);
        if before != after {
            flips += 1;
        }
        if arlab_core::losses::margin_operator(&net.logits(data.input(i))?, data.label(i))? > 0.0 {
            correct += 1;
        }
        for (a, x) in adv[i * d..(i + 1) * d].iter().zip(data.input(i)) {
            max_linf = max_linf.max((a - x).abs());
        }
    }
    let n = data.len() as f64;
    let summary = AttackSummary {
        method: cfg.method,
        eps: cfg.epsilon,
        eps_255: cfg.epsilon_255(),
        alpha: cfg.alpha,
        steps: cfg.steps,
        random_start: cfg.random_start,
        seed: cfg.seed,
        samples: data.len(),
        clean_acc: correct as f64 / n,
        adv_acc: adversarial_accuracy(&net, &data, cfg).ok(),
        flip_rate: flips as f64 / n,
        max_linf,
    };
    write_json(&parent_dir(&out).join("attack.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagSettings {
    pub gamma: f64,
    pub probe_eps: f64,
    pub margin_bins: usize,
    pub margin_range: (f64, f64),
    pub hist_bins: usize,
    pub loss_cap: f64,
    pub seed: u64,
}

impl DiagSettings {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            gamma: cfg.gamma,
            probe_eps: cfg.probe_eps,
            margin_bins: cfg.margin_bins,
            margin_range: (cfg.margin_lo, cfg.margin_hi),
            hist_bins: cfg.hist_bins,
            loss_cap: cfg.loss_cap,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub std: f64,
    pub spectral_norm: f64,
    pub sigma_min: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralSummary {
    pub layers: Vec<LayerSummary>,
    pub mean_std: f64,
    pub spectral_complexity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationSummary {
    pub probe_eps: f64,
    pub probe_eps_255: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub ge: GeReport,
    pub spectra: SpectralSummary,
    pub margin_train: MarginSummary,
    pub margin_test: MarginSummary,
    pub loss_variation: VariationSummary,
    pub files: Vec<String>,
}

/// Writes the diagnose artifacts into `dir`.
pub fn run_diagnostics(
    net: &Network,
    train: &Dataset,
    test: &Dataset,
    s: &DiagSettings,
    dir: &Path,
) -> Result<DiagnoseReport> {
    let ge = ge_report(net, train, test, s.gamma)?;
    let spectra = singular_spectra_report(net)?;
    let md_train = margin_distribution(
        net,
        train,
        Split::Train,
        s.margin_bins,
        s.margin_range,
        s.gamma,
    )?;
    let md_test = margin_distribution(
        net,
        test,
        Split::Test,
        s.margin_bins,
        s.margin_range,
        s.gamma,
    )?;
    let pl = probability_and_loss_histograms(net, test, s.hist_bins, s.loss_cap)?;
    let probe = AttackConfig::pgd(s.probe_eps).with_seed(s.seed);
    let lv = loss_variation(net, test, &probe)?;

    let mut records = md_train.records.clone();
    records.extend(md_test.records.iter().cloned());
    write_csv(&dir.join(MARGINS_CSV), &margin_rows(&records))?;
    write_csv(&dir.join(SPECTRA_CSV), &spectra_rows(&spectra))?;
    write_csv(
        &dir.join(HIST_MARGIN_TRAIN),
        &histogram_rows(&md_train.histogram),
    )?;
    write_csv(
        &dir.join(HIST_MARGIN_TEST),
        &histogram_rows(&md_test.histogram),
    )?;
    write_csv(&dir.join(HIST_PROB), &histogram_rows(&pl.prob))?;
    write_csv(&dir.join(HIST_LOSS), &histogram_rows(&pl.loss))?;

    let report = DiagnoseReport {
        ge,
        spectra: SpectralSummary {
            layers: spectra
                .layers
                .iter()
                .map(|l| LayerSummary {
                    layer: l.layer,
                    std: l.std,
                    spectral_norm: l.spectral_norm,
                    sigma_min: l.sigma_min,
                })
                .collect(),
            mean_std: spectra.mean_std(),
            spectral_complexity: spectra.spectral_complexity,
        },
        margin_train: md_train.summary,
        margin_test: md_test.summary,
        loss_variation: VariationSummary {
            probe_eps: s.probe_eps,
            probe_eps_255: s.probe_eps * 255.0,
            mean: lv.mean,
            std: lv.std,
        },
        files: [
            MARGINS_CSV,
            SPECTRA_CSV,
            HIST_MARGIN_TRAIN,
            HIST_MARGIN_TEST,
            HIST_PROB,
            HIST_LOSS,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    };
    write_json(&dir.join(REPORT_JSON), &report)?;
    Ok(report)
}

pub fn diagnose(
    base: &Path,
    ckpt: &Path,
    train: &Path,
    test: &Path,
    s: &DiagSettings,
) -> Result<DiagnoseReport> {
    let net = Network::load(resolve(base, ckpt))?;
    let train = Dataset::load(resolve(base, train))?;
    let test = Dataset::load(resolve(base, test))?;
    run_diagnostics(&net, &train, &test, s, base)
}

#[derive(Debug, Serialize)]
pub struct TraceSummary {
    pub i: usize,
    pub j: usize,
    pub layer: usize,
    #[serde(flatten)]
    pub check: Lemma1Check,
}

pub fn trace(
    base: &Path,
    ckpt: &Path,
    data: &Path,
    i: usize,
    j: usize,
    layer: usize,
) -> Result<TraceSummary> {
    let net = Network::load(resolve(base, ckpt))?;
    let data = Dataset::load(resolve(base, data))?;
    for idx in [i, j] {
        if idx >= data.len() {
            return usage(format!(
                "sample index {idx} out of range for {} samples",
                data.len()
            ));
        }
    }
    let dec = trace_segment(&net, data.input(i), data.input(j), layer)?;
    let check = verify_lemma1(&net, data.input(i), data.input(j), layer)?;
    write_csv(&base.join(SEGMENTS_CSV), &segment_rows(&dec))?;
    let summary = TraceSummary { i, j, layer, check };
    write_json(&base.join(LEMMA1_JSON), &summary)?;
    Ok(summary)
}

pub fn run_bound(
    net: &Network,
    data: &Dataset,
    inputs: &BoundInputs,
    opts: &BoundOptions,
    dir: &Path,
) -> Result<BoundReport> {
    let report = bound_evaluate_with(net, data, inputs, opts)?;
    write_json(&dir.join(BOUND_JSON), &report)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn bound(
    base: &Path,
    ckpt: &Path,
    data: &Path,
    gamma: f64,
    eps: f64,
    c_x: f64,
    k: u32,
    eta: f64,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    let net = Network::load(resolve(base, ckpt))?;
    let data = Dataset::load(resolve(base, data))?;
    let inputs = BoundInputs {
        gamma,
        epsilon: eps,
        c_x,
        k,
        m: data.len(),
        eta,
    };
    run_bound(&net, &data, &inputs, opts, base)
}
