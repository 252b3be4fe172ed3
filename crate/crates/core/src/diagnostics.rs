//! Margin, probability and loss distributions, singular spectra, GE gaps,
//! loss variation under attack, and the robustness generalization bound.

use serde::Serialize;

use crate::attacks::{attack_dataset, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::geometry::{boundary_distance, check_monotony};
use crate::losses::{margin_records, ramp_risk_of_margins, MarginRecord, RampConfig, Split};
use crate::model::Network;
use crate::numerics::{norm2, singular_values, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpectrum {
    /// One-based layer index.
    pub layer: usize,
    /// Descending.
    pub sigma: Vec<f64>,
    /// Population standard deviation of `sigma`.
    pub std: f64,
    pub spectral_norm: f64,
    pub sigma_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub layers: Vec<LayerSpectrum>,
    /// Product of per-layer spectral norms.
    pub spectral_complexity: f64,
}

impl SpectralReport {
    pub fn stds(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.std).collect()
    }

    pub fn mean_std(&self) -> f64 {
        self.layers.iter().map(|l| l.std).sum::<f64>() / self.layers.len() as f64
    }

    pub fn sigma_mins(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.sigma_min).collect()
    }
}

pub fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

pub fn singular_spectra_report(net: &Network) -> Result<SpectralReport> {
    let layers = net
        .weights()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let sigma = singular_values(w).map_err(|e| Error::Layer {
                layer: i + 1,
                source: Box::new(e),
            })?;
            Ok(LayerSpectrum {
                layer: i + 1,
                std: population_std(&sigma),
                spectral_norm: sigma[0],
                sigma_min: *sigma.last().expect("non-empty spectrum"),
                sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spectral_complexity = layers.iter().map(|l| l.spectral_norm).product();
    Ok(SpectralReport {
        layers,
        spectral_complexity,
    })
}

/// Per-layer `std(after) - std(before)` and their sum.
pub fn std_shift(before: &SpectralReport, after: &SpectralReport) -> Result<(Vec<f64>, f64)> {
    if before.layers.len() != after.layers.len() {
        return invalid(format!(
            "spectra cover {} and {} layers",
            before.layers.len(),
            after.layers.len()
        ));
    }
    let diffs: Vec<f64> = before
        .layers
        .iter()
        .zip(&after.layers)
        .map(|(b, a)| a.std - b.std)
        .collect();
    let total = diffs.iter().sum();
    Ok((diffs, total))
}

/// Fixed-width bins over `[lo, hi)` with underflow and overflow counts.
/// With `closed_top` the value `hi` itself lands in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
    pub closed_top: bool,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 {
            return invalid("a histogram needs at least one bin");
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!(
                "histogram range [{lo}, {hi}) is empty or not finite"
            ));
        }
        Ok(Self {
            lo,
            hi,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
            closed_top: false,
        })
    }

    pub fn closed(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        Ok(Self {
            closed_top: true,
            ..Self::new(lo, hi, bins)?
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = self.width();
        let hi = if i + 1 == self.bins() {
            self.hi
        } else {
            self.lo + (i + 1) as f64 * w
        };
        (self.lo + i as f64 * w, hi)
    }

    /// NaN counts as overflow.
    pub fn add(&mut self, v: f64) {
        if v < self.lo {
            self.underflow += 1;
        } else if v < self.hi {
            let last = self.bins() - 1;
            let i = ((v - self.lo) / self.width()) as usize;
            self.counts[i.min(last)] += 1;
        } else if v == self.hi && self.closed_top {
            *self.counts.last_mut().expect("non-empty") += 1;
        } else {
            self.overflow += 1;
        }
    }

    pub fn extend(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.add(v);
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

/// Linear-interpolation quantile of sorted data (`(n-1) p` positions).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const MARGIN_BINS: usize = 61;
pub const MARGIN_RANGE: (f64, f64) = (-15.0, 15.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginSummary {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    pub gamma: f64,
    /// Fraction of samples with `|margin| < gamma`.
    pub frac_within_gamma: f64,
}

impl MarginSummary {
    pub fn of(margins: &[f64], gamma: f64) -> Result<Self> {
        if margins.is_empty() {
            return invalid("margin summary of no samples");
        }
        let mut sorted = margins.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&sorted, 0.25);
        let q3 = quantile_sorted(&sorted, 0.75);
        let within = margins.iter().filter(|m| m.abs() < gamma).count();
        Ok(Self {
            q1,
            median: quantile_sorted(&sorted, 0.5),
            q3,
            iqr: q3 - q1,
            gamma,
            frac_within_gamma: within as f64 / margins.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginDistribution {
    pub histogram: Histogram,
    pub records: Vec<MarginRecord>,
    pub summary: MarginSummary,
}

pub fn margin_distribution(
    net: &Network,
    data: &Dataset,
    split: Split,
    bins: usize,
    range: (f64, f64),
    gamma: f64,
) -> Result<MarginDistribution> {
    if data.is_empty() {
        return invalid("margin distribution of an empty dataset");
    }
    let mut histogram = Histogram::new(range.0, range.1, bins)?;
    let records = margin_records(net, data, split)?;
    let margins: Vec<f64> = records.iter().map(|r| r.margin).collect();
    histogram.extend(margins.iter().copied());
    Ok(MarginDistribution {
        histogram,
        summary: MarginSummary::of(&margins, gamma)?,
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbLossHistograms {
    /// `prob_y` over `[0, 1]`, top bin closed.
    pub prob: Histogram,
    /// `ce_loss` over `[0, loss_cap)`.
    pub loss: Histogram,
}

pub fn probability_and_loss_histograms(
    net: &Network,
    data: &Dataset,
    bins: usize,
    loss_cap: f64,
) -> Result<ProbLossHistograms> {
    if data.is_empty() {
        return invalid("histograms of an empty dataset");
    }
    let mut prob = Histogram::closed(0.0, 1.0, bins)?;
    let mut loss = Histogram::new(0.0, loss_cap, bins)?;
    for r in margin_records(net, data, Split::Train)? {
        prob.add(r.prob_y);
        loss.add(r.ce_loss);
    }
    Ok(ProbLossHistograms { prob, loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeReport {
    pub train_loss: f64,
    pub test_loss: f64,
    pub loss_gap: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub err_gap: f64,
    pub gamma: f64,
    pub ramp_train: f64,
    pub ramp_test: f64,
    pub ramp_gap: f64,
}

struct SplitStats {
    loss: f64,
    err: f64,
    ramp: f64,
}

fn split_stats(net: &Network, data: &Dataset, ramp: RampConfig, what: &str) -> Result<SplitStats> {
    if data.is_empty() {
        return invalid(format!("{what} split is empty"));
    }
    let records = margin_records(net, data, Split::Train)?;
    let n = records.len() as f64;
    let margins: Vec<f64> = records.iter().map(|r| r.margin).collect();
    Ok(SplitStats {
        loss: records.iter().map(|r| r.ce_loss).sum::<f64>() / n,
        err: records.iter().filter(|r| !r.correct).count() as f64 / n,
        ramp: ramp_risk_of_margins(&margins, ramp),
    })
}

pub fn ge_report(net: &Network, train: &Dataset, test: &Dataset, gamma: f64) -> Result<GeReport> {
    let ramp = RampConfig::new(gamma)?;
    let tr = split_stats(net, train, ramp, "train")?;
    let te = split_stats(net, test, ramp, "test")?;
    Ok(GeReport {
        train_loss: tr.loss,
        test_loss: te.loss,
        loss_gap: te.loss - tr.loss,
        train_err: tr.err,
        test_err: te.err,
        err_gap: te.err - tr.err,
        gamma,
        ramp_train: tr.ramp,
        ramp_test: te.ramp,
        ramp_gap: te.ramp - tr.ramp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossVariation {
    pub mean: f64,
    /// Population standard deviation over samples.
    pub std: f64,
    pub per_sample: Vec<f64>,
}

/// Per sample, the largest `|CE(x_t) - CE(x)|` over all PGD iterates
/// (start point and final point included).
pub fn loss_variation(net: &Network, data: &Dataset, cfg: &AttackConfig) -> Result<LossVariation> {
    if data.is_empty() {
        return invalid("loss variation of an empty dataset");
    }
    if cfg.method != AttackMethod::Pgd {
        return Err(Error::InvalidConfig(
            "loss variation needs a pgd config".into(),
        ));
    }
    let clean: Vec<f64> = margin_records(net, data, Split::Test)?
        .iter()
        .map(|r| r.ce_loss)
        .collect();
    let mut per_sample = vec![0.0f64; data.len()];
    let mut observe = |start: usize, _t: usize, _xs: &[f64], losses: &[f64]| {
        for (k, l) in losses.iter().enumerate() {
            let i = start + k;
            per_sample[i] = per_sample[i].max((l - clean[i]).abs());
        }
    };
    attack_dataset(net, data, cfg, Some(&mut observe))?;
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    Ok(LossVariation {
        mean,
        std: population_std(&per_sample),
        per_sample,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub gamma: f64,
    /// Covering radius.
    pub epsilon: f64,
    pub c_x: f64,
    /// Intrinsic dimension of the data manifold.
    pub k: u32,
    pub m: usize,
    pub eta: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("gamma", self.gamma)?;
        positive("epsilon", self.epsilon)?;
        positive("c_x", self.c_x)?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eta must lie in (0, 1), got {}",
                self.eta
            )));
        }
        Ok(())
    }

    /// `sqrt(2 ln2 C_X^k / (eps^k m) + 2 ln(1/eta) / m)`.
    pub fn term2(&self) -> f64 {
        let m = self.m as f64;
        let covering = (self.c_x / self.epsilon).powi(self.k as i32);
        (2.0 * std::f64::consts::LN_2 * covering / m + 2.0 * (1.0 / self.eta).ln() / m).sqrt()
    }
}

/// `max(0, 1 - u_min / gamma)`.
pub fn bound_term1(u_min: f64, gamma: f64) -> f64 {
    (1.0 - u_min / gamma).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundOptions {
    /// Probe at most this many samples, drawn without replacement; `None`
    /// probes all of them.
    pub subsample: Option<usize>,
    pub seed: u64,
    /// Grid for the margin monotony check on each converged probe; 0 skips it.
    pub monotony_grid: usize,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            subsample: Some(256),
            seed: 0,
            monotony_grid: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    /// `sigma_min` of `W_1..W_{L-1}`.
    pub sigma_min_list: Vec<f64>,
    pub sigma_min_product: f64,
    /// Smallest `||w_y - w_y'||` over pairs of rows of `W_L`.
    pub w_pair_min: f64,
    /// Minimum of the boundary-distance estimates; each estimate is an upper
    /// bound of the true distance, so this is an estimate too.
    pub v_min_hat: f64,
    /// False when any probe failed to reach the boundary.
    pub v_min_reliable: bool,
    pub probes: usize,
    pub probes_converged: usize,
    pub probe_indices: Vec<usize>,
    /// Some `sigma_min` is zero, which forces `u_min = 0`.
    pub degenerate: bool,
    pub u_min: f64,
    pub term1: f64,
    pub term2: f64,
    pub bound: f64,
    /// Smallest label margin over the probed samples, for comparison with
    /// `u_min`.
    pub min_margin: f64,
    pub u_min_exceeds_min_margin: bool,
    /// Converged probes whose margin rises somewhere along `x -> x_boundary`.
    pub monotony_violations: usize,
    pub monotony_max_increase: f64,
}

pub fn bound_evaluate(net: &Network, data: &Dataset, inputs: &BoundInputs) -> Result<BoundReport> {
    bound_evaluate_with(net, data, inputs, &BoundOptions::default())
}

pub fn bound_evaluate_with(
    net: &Network,
    data: &Dataset,
    inputs: &BoundInputs,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    inputs.validate()?;
    if net.depth() < 2 {
        return invalid("the bound needs a network with at least two layers");
    }
    if data.is_empty() {
        return invalid("the bound needs a non-empty probe set");
    }
    let spectra = singular_spectra_report(net)?;
    let hidden = net.hidden_layers();
    let sigma_min_list: Vec<f64> = spectra.layers[..hidden]
        .iter()
        .map(|l| l.sigma_min)
        .collect();
    let sigma_min_product: f64 = sigma_min_list.iter().product();
    let degenerate = sigma_min_list.contains(&0.0);

    let last = &net.weights()[hidden];
    let mut w_pair_min = f64::INFINITY;
    for a in 0..last.rows() {
        for b in a + 1..last.rows() {
            let diff: Vec<f64> = last
                .row(a)
                .iter()
                .zip(last.row(b))
                .map(|(p, q)| p - q)
                .collect();
            w_pair_min = w_pair_min.min(norm2(&diff));
        }
    }

    let mut probe_indices: Vec<usize> = (0..data.len()).collect();
    if let Some(k) = opts.subsample {
        if k < data.len() {
            SeededRng::new(opts.seed).shuffle(&mut probe_indices);
            probe_indices.truncate(k);
            probe_indices.sort_unstable();
        }
    }
    let mut v_min_hat = f64::INFINITY;
    let mut converged = 0;
    let mut min_margin = f64::INFINITY;
    let mut monotony_violations = 0;
    let mut monotony_max_increase = 0.0f64;
    let records = margin_records(net, &data.subset(&probe_indices), Split::Train)?;
    for (&i, r) in probe_indices.iter().zip(&records) {
        min_margin = min_margin.min(r.margin);
        let probe = boundary_distance(net, data.input(i))?;
        if probe.converged {
            converged += 1;
            v_min_hat = v_min_hat.min(probe.v);
            if opts.monotony_grid > 0 && probe.v > 0.0 {
                let m = check_monotony(net, data.input(i), &probe, opts.monotony_grid)?;
                if m.violations > 0 {
                    monotony_violations += 1;
                }
                monotony_max_increase = monotony_max_increase.max(m.max_increase);
            }
        }
    }

    let u_min = if degenerate {
        0.0
    } else {
        w_pair_min * sigma_min_product * v_min_hat
    };
    let term1 = bound_term1(u_min, inputs.gamma);
    let term2 = inputs.term2();
    Ok(BoundReport {
        inputs: *inputs,
        sigma_min_list,
        sigma_min_product,
        w_pair_min,
        v_min_hat,
        v_min_reliable: converged == probe_indices.len(),
        probes: probe_indices.len(),
        probes_converged: converged,
        probe_indices,
        degenerate,
        u_min,
        term1,
        term2,
        bound: term1 + term2,
        min_margin,
        u_min_exceeds_min_margin: u_min > min_margin,
        monotony_violations,
        monotony_max_increase,
    })
}
