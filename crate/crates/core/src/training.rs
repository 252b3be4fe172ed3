//! Mini-batch SGD with momentum, optionally on adversarial batches, with
//! per-epoch spectral-norm clipping.

use serde::{Deserialize, Serialize};

use crate::attacks::{adversarial_accuracy, perturb_batch, AttackConfig};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::margin_records;
use crate::losses::Split;
use crate::model::{batch_backward, init_network, Network};
use crate::numerics::{derive_seed, spectral_norm, Matrix, SeededRng};

const INIT_STREAM: u64 = 0x1;
const SHUFFLE_STREAM: u64 = 0x2;
const ATTACK_STREAM: u64 = 0x3;
const EVAL_STREAM: u64 = 0x4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `[input_dim, hidden..., classes]`.
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Zero-based epochs from which the learning rate is multiplied by
    /// `lr_decay_factor` (cumulative).
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Training-time attack; `epsilon = 0` is standard training.
    pub attack: AttackConfig,
    /// Spectral-norm ceiling applied at the end of every epoch.
    pub sn_clip: Option<f64>,
    pub seed: u64,
    /// Evaluate adversarial test accuracy every this many epochs; 0 means
    /// only after the final epoch.
    pub adv_eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 256, 128, 10],
            epochs: 40,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            lr_decay_epochs: vec![25, 35],
            lr_decay_factor: 0.1,
            attack: AttackConfig::pgd(0.0),
            sn_clip: None,
            seed: 0,
            adv_eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return bad(format!("invalid widths {:?}", self.widths));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(format!(
                "decay factor must be positive, got {}",
                self.lr_decay_factor
            ));
        }
        if let Some(c) = self.sn_clip {
            if !(c > 0.0) {
                return bad(format!("spectral clip must be positive, got {c}"));
            }
        }
        self.attack.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// Momentum buffers, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Vec<Matrix>);

impl Velocity {
    pub fn zeros_like(net: &Network) -> Self {
        Self(
            net.weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        )
    }
}

/// `v <- momentum * v + g`, then `W <- W - lr * v`.
pub fn sgd_momentum_step(
    net: &mut Network,
    grads: &[Matrix],
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != net.depth() || velocity.0.len() != net.depth() {
        return invalid(format!(
            "{} layers, {} gradients, {} velocity buffers",
            net.depth(),
            grads.len(),
            velocity.0.len()
        ));
    }
    for (i, (g, v)) in grads.iter().zip(&velocity.0).enumerate() {
        let shape = net.weights()[i].shape();
        if g.shape() != shape || v.shape() != shape {
            return invalid(format!(
                "layer {}: weight {:?}, gradient {:?}, velocity {:?}",
                i + 1,
                shape,
                g.shape(),
                v.shape()
            ));
        }
    }
    for ((w, g), v) in net
        .weights_mut()
        .iter_mut()
        .zip(grads)
        .zip(velocity.0.iter_mut())
    {
        for ((wi, gi), vi) in w
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Scales every layer whose spectral norm exceeds `c` down to exactly `c`;
/// layers already within the ceiling are left untouched.
pub fn spectral_normalize(net: &Network, c: f64) -> Result<Network> {
    let mut out = net.clone();
    spectral_normalize_in_place(&mut out, c)?;
    Ok(out)
}

pub fn spectral_normalize_in_place(net: &mut Network, c: f64) -> Result<()> {
    if !(c > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "spectral ceiling must be positive, got {c}"
        )));
    }
    for (i, w) in net.weights_mut().iter_mut().enumerate() {
        let s = spectral_norm(w).map_err(|e| Error::Layer {
            layer: i + 1,
            source: Box::new(e),
        })?;
        if s > c {
            let f = c / s;
            w.as_mut_slice().iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean clean cross-entropy on the training set after the epoch.
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    /// Adversarial test accuracy under the training attack, when evaluated.
    pub adv_acc: Option<f64>,
    /// Mean cross-entropy over the (possibly adversarial) training batches.
    pub batch_loss: f64,
    /// Largest l-infinity distance between a fed input and its raw sample.
    pub max_perturbation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// Mean clean cross-entropy and error rate.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let records = margin_records(net, data, Split::Train)?;
    let n = records.len() as f64;
    let loss = records.iter().map(|r| r.ce_loss).sum::<f64>() / n;
    let err = records.iter().filter(|r| !r.correct).count() as f64 / n;
    Ok((loss, err))
}

/// Trains a fresh network on `train`, logging clean metrics on both splits.
///
/// With a positive attack radius every mini-batch is replaced by its attacked
/// version before the gradient step.
pub fn train_adversarial(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    let mut init_rng = SeededRng::derived(cfg.seed, &[INIT_STREAM]);
    let net = init_network(&cfg.widths, &mut init_rng)?;
    train_from(net, cfg, train, test)
}

/// Continues training from a given network.
pub fn train_from(
    mut net: Network,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return invalid("training needs non-empty train and test sets");
    }
    if train.dim() != net.input_dim() || test.dim() != net.input_dim() {
        return invalid(format!(
            "data dim {} / {} does not match network input {}",
            train.dim(),
            test.dim(),
            net.input_dim()
        ));
    }
    if train.num_classes() > net.output_dim() {
        return invalid(format!(
            "{} classes but only {} outputs",
            train.num_classes(),
            net.output_dim()
        ));
    }

    let d = train.dim();
    let eps = cfg.attack.epsilon;
    let mut velocity = Velocity::zeros_like(&net);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        SeededRng::derived(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut max_perturbation = 0.0f64;

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(idx.len() * d);
            let mut ys = Vec::with_capacity(idx.len());
            for &i in idx {
                xs.extend_from_slice(train.input(i));
                ys.push(train.label(i));
            }
            let fed = if eps > 0.0 {
                let seeds: Vec<u64> = (0..idx.len())
                    .map(|k| {
                        derive_seed(&[cfg.seed, ATTACK_STREAM, epoch as u64, b as u64, k as u64])
                    })
                    .collect();
                let adv = perturb_batch(&net, &xs, &ys, &cfg.attack, &seeds, None)?;
                let dist = adv
                    .iter()
                    .zip(&xs)
                    .fold(0.0f64, |m, (a, x)| m.max((a - x).abs()));
                if dist > eps + 1e-12 {
                    return Err(Error::Consistency(format!(
                        "epoch {epoch} batch {b}: fed input lies {dist} from its sample (eps {eps})"
                    )));
                }
                max_perturbation = max_perturbation.max(dist);
                adv
            } else {
                xs
            };

            let g = batch_backward(&net, &fed, &ys, false, true)?;
            let batch_loss: f64 = g.losses.iter().sum();
            if !batch_loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            let inv = 1.0 / idx.len() as f64;
            let mut grads = g.param_grads.expect("requested");
            for m in &mut grads {
                m.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
            }
            sgd_momentum_step(&mut net, &grads, &mut velocity, lr, cfg.momentum)?;
        }
        if net.weights().iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainingFailure {
                epoch,
                loss: f64::NAN,
            });
        }
        if let Some(c) = cfg.sn_clip {
            spectral_normalize_in_place(&mut net, c)?;
        }

        let (train_loss, train_err) = evaluate(&net, train)?;
        let (test_loss, test_err) = evaluate(&net, test)?;
        if !train_loss.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                loss: train_loss,
            });
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.adv_eval_every > 0 && (epoch + 1) % cfg.adv_eval_every == 0;
        let adv_acc = if last || due {
            let eval_cfg =
                cfg.attack
                    .with_seed(derive_seed(&[cfg.seed, EVAL_STREAM, epoch as u64]));
            match adversarial_accuracy(&net, test, &eval_cfg) {
                Ok(a) => Some(a),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            test_loss,
            train_err,
            test_err,
            adv_acc,
            batch_loss: loss_sum / train.len() as f64,
            max_perturbation,
        });
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, split_dataset, BlobsConfig};
    use crate::numerics::spectral_norm;

    fn small_data(seed: u64) -> (Dataset, Dataset) {
        let cfg = BlobsConfig {
            classes: 3,
            dim: 8,
            per_class: 80,
            separation: 4.0,
            std: 1.0,
        };
        let d = gen_blobs(&cfg, &mut SeededRng::new(seed)).unwrap();
        split_dataset(&d, 0.75, &mut SeededRng::new(seed + 1)).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            widths: vec![8, 16, 3],
            epochs: 5,
            batch_size: 16,
            lr: 0.05,
            lr_decay_epochs: vec![],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn momentum_step_examples() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let mut net = Network::from_weights(vec![w.clone()]).unwrap();
        let mut v = Velocity::zeros_like(&net);
        sgd_momentum_step(&mut net, std::slice::from_ref(&g), &mut v, 0.0, 0.9).unwrap();
        assert_eq!(net.weights()[0], w);

        let mut net = Network::from_weights(vec![w.clone()]).unwrap();
        let mut v = Velocity::zeros_like(&net);
        sgd_momentum_step(&mut net, std::slice::from_ref(&g), &mut v, 0.1, 0.0).unwrap();
        assert_eq!(net.weights()[0].as_slice(), &[1.0 - 0.05, 2.0 + 0.1]);

        // two steps on a constant gradient: lr * (g + (0.9 g + g))
        let mut net = Network::from_weights(vec![w.clone()]).unwrap();
        let mut v = Velocity::zeros_like(&net);
        sgd_momentum_step(&mut net, std::slice::from_ref(&g), &mut v, 0.1, 0.9).unwrap();
        sgd_momentum_step(&mut net, std::slice::from_ref(&g), &mut v, 0.1, 0.9).unwrap();
        for k in 0..2 {
            let expect = w.as_slice()[k]
                - 0.1 * (g.as_slice()[k] + (0.9 * g.as_slice()[k] + g.as_slice()[k]));
            assert!((net.weights()[0].as_slice()[k] - expect).abs() < 1e-15);
        }

        let wrong = Matrix::zeros(2, 2);
        assert!(sgd_momentum_step(&mut net, &[wrong], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn spectral_normalize_examples() {
        let net = Network::from_weights(vec![
            Matrix::from_diag(&[5.0, 1.0]).unwrap(),
            Matrix::from_diag(&[0.5, 0.1]).unwrap(),
        ])
        .unwrap();
        let out = spectral_normalize(&net, 1.0).unwrap();
        assert!((spectral_norm(&out.weights()[0]).unwrap() - 1.0).abs() <= 1e-9);
        assert_eq!(out.weights()[0].as_slice(), &[1.0, 0.0, 0.0, 0.2]);
        assert_eq!(out.weights()[1], net.weights()[1]);
        assert!(spectral_normalize(&net, 0.0).is_err());
    }

    #[test]
    fn spectral_normalize_random_net() {
        let net = init_network(&[6, 20, 20, 4], &mut SeededRng::new(3)).unwrap();
        let scaled =
            Network::from_weights(net.weights().iter().map(|w| w.scale(4.0)).collect()).unwrap();
        let out = spectral_normalize(&scaled, 2.0).unwrap();
        let mut product = 1.0;
        for w in out.weights() {
            let s = spectral_norm(w).unwrap();
            assert!(s <= 2.0 + 1e-9);
            product *= s;
        }
        assert!(product <= 2f64.powi(3) * (1.0 + 1e-9));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(24), 0.01);
        assert!((cfg.lr_at(25) - 0.001).abs() < 1e-16);
        assert!((cfg.lr_at(39) - 0.0001).abs() < 1e-17);
    }

    #[test]
    fn standard_training_reduces_loss() {
        let (train, test) = small_data(10);
        let (_, log) = train_adversarial(&small_cfg(), &train, &test).unwrap();
        let l: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
        assert!(l[0] > l[1] && l[1] > l[2], "{l:?}");
        assert_eq!(log.epochs[0].max_perturbation, 0.0);
        assert_eq!(log.last().unwrap().adv_acc, Some(1.0));
    }

    #[test]
    fn adversarial_training_stays_in_ball_and_is_reproducible() {
        let (train, test) = small_data(20);
        let cfg = TrainConfig {
            attack: AttackConfig::pgd(0.05),
            sn_clip: Some(1.5),
            adv_eval_every: 2,
            ..small_cfg()
        };
        let (a, log_a) = train_adversarial(&cfg, &train, &test).unwrap();
        let (b, log_b) = train_adversarial(&cfg, &train, &test).unwrap();
        assert_eq!(log_a, log_b);
        let bytes = |n: &Network| {
            let mut v = Vec::new();
            n.write_checkpoint(&mut v).unwrap();
            v
        };
        assert_eq!(bytes(&a), bytes(&b));
        for e in &log_a.epochs {
            assert!(e.max_perturbation <= 0.05 + 1e-12);
            assert!(e.max_perturbation > 0.0);
        }
        assert!(log_a.epochs[1].adv_acc.is_some());
        assert!(log_a.epochs[0].adv_acc.is_none());
        for w in a.weights() {
            assert!(spectral_norm(w).unwrap() <= 1.5 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (train, test) = small_data(30);
        let cfg = TrainConfig {
            lr: 1e200,
            ..small_cfg()
        };
        match train_adversarial(&cfg, &train, &test) {
            Err(Error::TrainingFailure { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let (train, test) = small_data(40);
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..small_cfg()
            },
            TrainConfig {
                batch_size: 0,
                ..small_cfg()
            },
            TrainConfig {
                momentum: 1.0,
                ..small_cfg()
            },
            TrainConfig {
                widths: vec![8],
                ..small_cfg()
            },
        ] {
            assert!(matches!(
                train_adversarial(&cfg, &train, &test),
                Err(Error::InvalidConfig(_))
            ));
        }
    }
}
