//! Margin operator, ramp loss and risk, and softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::Network;

/// `s_y - max_{i != y} s_i`.
pub fn margin_operator(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return invalid(format!(
            "margin needs at least two classes, got {}",
            logits.len()
        ));
    }
    if y >= logits.len() {
        return invalid(format!(
            "label {y} out of range for {} classes",
            logits.len()
        ));
    }
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - runner_up)
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampConfig {
    gamma: f64,
}

impl RampConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return invalid(format!(
                "ramp width must be positive and finite, got {gamma}"
            ));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// `0` below `-gamma`, `1 + r/gamma` on `[-gamma, 0]`, `1` above zero.
pub fn ramp_loss(r: f64, cfg: RampConfig) -> f64 {
    let g = cfg.gamma;
    if r < -g {
        0.0
    } else if r <= 0.0 {
        1.0 + r / g
    } else {
        1.0
    }
}

/// Mean of `ramp_loss(-margin)` over the dataset.
pub fn ramp_risk(net: &Network, data: &Dataset, cfg: RampConfig) -> Result<f64> {
    if data.is_empty() {
        return invalid("ramp risk of an empty dataset");
    }
    let margins = margins(net, data)?;
    Ok(ramp_risk_of_margins(&margins, cfg))
}

pub fn ramp_risk_of_margins(margins: &[f64], cfg: RampConfig) -> f64 {
    margins.iter().map(|m| ramp_loss(-m, cfg)).sum::<f64>() / margins.len() as f64
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `(-ln p_y, p_y)` with max-subtracted log-sum-exp.
pub fn cross_entropy_and_prob(logits: &[f64], y: usize) -> Result<(f64, f64)> {
    if y >= logits.len() {
        return invalid(format!(
            "label {y} out of range for {} classes",
            logits.len()
        ));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let log_p = logits[y] - max - sum.ln();
    Ok((-log_p, log_p.exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => invalid(format!("unknown split {s:?}")),
        }
    }
}

/// Per-example confidence measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub sample_id: usize,
    pub split: Split,
    pub label: usize,
    pub logits: Vec<f64>,
    pub margin: f64,
    pub prob_y: f64,
    pub ce_loss: f64,
    /// `margin > 0`; ties count as errors.
    pub correct: bool,
}

impl MarginRecord {
    pub fn from_logits(sample_id: usize, split: Split, logits: Vec<f64>, y: usize) -> Result<Self> {
        let margin = margin_operator(&logits, y)?;
        let (ce_loss, prob_y) = cross_entropy_and_prob(&logits, y)?;
        Ok(Self {
            sample_id,
            split,
            label: y,
            logits,
            margin,
            prob_y,
            ce_loss,
            correct: margin > 0.0,
        })
    }
}

const EVAL_CHUNK: usize = 256;

/// Logits for every sample, evaluated in chunks through the batched path.
pub fn dataset_logits(net: &Network, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    if data.dim() != net.input_dim() {
        return invalid(format!(
            "dataset dim {} does not match network input {}",
            data.dim(),
            net.input_dim()
        ));
    }
    let c = net.output_dim();
    let mut out = Vec::with_capacity(data.len());
    let d = data.dim();
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let logits = net.batch_logits(&data.inputs()[start * d..end * d], end - start)?;
        out.extend(logits.chunks_exact(c).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn margin_records(net: &Network, data: &Dataset, split: Split) -> Result<Vec<MarginRecord>> {
    dataset_logits(net, data)?
        .into_iter()
        .enumerate()
        .map(|(i, logits)| MarginRecord::from_logits(i, split, logits, data.label(i)))
        .collect()
}

pub fn margins(net: &Network, data: &Dataset) -> Result<Vec<f64>> {
    dataset_logits(net, data)?
        .iter()
        .enumerate()
        .map(|(i, l)| margin_operator(l, data.label(i)))
        .collect()
}
