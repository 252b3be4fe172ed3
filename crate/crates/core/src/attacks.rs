//! Untargeted l-infinity attacks (FGSM, PGD) on inputs living in `[0,1]^d`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::{argmax, dataset_logits, margin_operator};
use crate::model::{batch_backward, Network};
use crate::numerics::{derive_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            _ => Err(Error::InvalidConfig(format!("unknown attack method {s:?}"))),
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fgsm => "fgsm",
            Self::Pgd => "pgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// l-infinity radius in input units (inputs live in `[0,1]`).
    pub epsilon: f64,
    /// PGD step size.
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            seed: 0,
        }
    }

    /// Ten steps of `epsilon / 4` from a uniform random start.
    pub fn pgd(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Pgd,
            epsilon,
            alpha: epsilon / 4.0,
            steps: 10,
            random_start: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Radius on the 0-255 pixel scale.
    pub fn epsilon_255(&self) -> f64 {
        self.epsilon * 255.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.method == AttackMethod::Pgd && self.epsilon > 0.0 {
            if self.steps == 0 {
                return Err(Error::InvalidConfig("pgd needs at least one step".into()));
            }
            if !(self.alpha > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "pgd step size must be positive, got {}",
                    self.alpha
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    /// `x_adv - x`.
    pub delta: Vec<f64>,
    /// Predicted label at `x_adv` differs from the one at `x`.
    pub success: bool,
}

/// `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Called with `(iteration, iterate, per-sample CE at the iterate)` for the
/// start point, every intermediate iterate, and the final point.
pub type IterateObserver<'a> = dyn FnMut(usize, &[f64], &[f64]) + 'a;

/// Like [`IterateObserver`], with the dataset index of the chunk's first
/// sample as the leading argument.
pub type DatasetObserver<'a> = dyn FnMut(usize, usize, &[f64], &[f64]) + 'a;

/// Attacks a row-major batch. `seeds[k]` drives sample `k`'s random start.
pub fn perturb_batch(
    net: &Network,
    inputs: &[f64],
    labels: &[usize],
    cfg: &AttackConfig,
    seeds: &[u64],
    mut observer: Option<&mut IterateObserver<'_>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = labels.len();
    let d = net.input_dim();
    if inputs.len() != n * d || seeds.len() != n {
        return invalid(format!(
            "batch of {n} needs {} inputs and {n} seeds (got {} / {})",
            n * d,
            inputs.len(),
            seeds.len()
        ));
    }
    let eps = cfg.epsilon;
    let mut x = inputs.to_vec();
    if eps == 0.0 {
        if let Some(obs) = observer.as_mut() {
            let g = batch_backward(net, &x, labels, false, false)?;
            obs(0, &x, &g.losses);
        }
        return Ok(x);
    }

    let (steps, alpha) = match cfg.method {
        AttackMethod::Fgsm => (1, eps),
        AttackMethod::Pgd => (cfg.steps, cfg.alpha),
    };
    if cfg.method == AttackMethod::Pgd && cfg.random_start {
        for (k, &seed) in seeds.iter().enumerate() {
            let mut rng = SeededRng::new(seed);
            for j in 0..d {
                let i = k * d + j;
                x[i] = (inputs[i] + rng.next_uniform(-eps, eps)).clamp(0.0, 1.0);
            }
        }
    }

    for t in 0..steps {
        let g = batch_backward(net, &x, labels, true, false)?;
        if let Some(obs) = observer.as_mut() {
            obs(t, &x, &g.losses);
        }
        let grad = g.input_grads.expect("requested");
        for i in 0..x.len() {
            let stepped = x[i] + alpha * sign(grad[i]);
            x[i] = stepped
                .clamp(inputs[i] - eps, inputs[i] + eps)
                .clamp(0.0, 1.0);
        }
    }
    if let Some(obs) = observer.as_mut() {
        let g = batch_backward(net, &x, labels, false, false)?;
        obs(steps, &x, &g.losses);
    }
    Ok(x)
}

fn single(net: &Network, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    if x.len() != net.input_dim() {
        return invalid(format!(
            "input has length {} but the network expects {}",
            x.len(),
            net.input_dim()
        ));
    }
    let x_adv = perturb_batch(net, x, &[y], cfg, &[cfg.seed], None)?;
    let delta = x_adv.iter().zip(x).map(|(a, b)| a - b).collect();
    let before = argmax(&net.logits(x)?);
    let after = argmax(&net.logits(&x_adv)?);
    Ok(AttackResult {
        x_adv,
        delta,
        success: before != after,
    })
}

/// `clip(x + eps * sign(grad_x CE))`.
pub fn fgsm(net: &Network, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    if cfg.method != AttackMethod::Fgsm {
        return Err(Error::InvalidConfig("fgsm called with a pgd config".into()));
    }
    single(net, x, y, cfg)
}

/// Projected sign-gradient ascent inside the l-infinity ball around `x`.
pub fn pgd(net: &Network, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    if cfg.method != AttackMethod::Pgd {
        return Err(Error::InvalidConfig(
            "pgd called with an fgsm config".into(),
        ));
    }
    single(net, x, y, cfg)
}

pub fn attack(net: &Network, x: &[f64], y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    single(net, x, y, cfg)
}

/// Seed for the random start of dataset sample `sample_id`.
pub fn sample_seed(seed: u64, sample_id: usize) -> u64 {
    derive_seed(&[seed, sample_id as u64])
}

const ATTACK_CHUNK: usize = 256;

/// Attacks every sample of `data`; sample `i` uses `sample_seed(cfg.seed, i)`.
pub fn attack_dataset(
    net: &Network,
    data: &Dataset,
    cfg: &AttackConfig,
    mut observer: Option<&mut DatasetObserver<'_>>,
) -> Result<Vec<f64>> {
    let d = data.dim();
    let mut out = Vec::with_capacity(data.inputs().len());
    for start in (0..data.len()).step_by(ATTACK_CHUNK) {
        let end = (start + ATTACK_CHUNK).min(data.len());
        let seeds: Vec<u64> = (start..end).map(|i| sample_seed(cfg.seed, i)).collect();
        let adv = match observer.as_mut() {
            Some(obs) => {
                let mut local = |t: usize, xs: &[f64], losses: &[f64]| obs(start, t, xs, losses);
                perturb_batch(
                    net,
                    &data.inputs()[start * d..end * d],
                    &data.labels()[start..end],
                    cfg,
                    &seeds,
                    Some(&mut local),
                )?
            }
            None => perturb_batch(
                net,
                &data.inputs()[start * d..end * d],
                &data.labels()[start..end],
                cfg,
                &seeds,
                None,
            )?,
        };
        out.extend(adv);
    }
    Ok(out)
}

/// Fraction of originally correct samples (margin > 0) that stay correct
/// under attack.
pub fn adversarial_accuracy(net: &Network, data: &Dataset, cfg: &AttackConfig) -> Result<f64> {
    if data.is_empty() {
        return invalid("adversarial accuracy of an empty dataset");
    }
    let clean = dataset_logits(net, data)?;
    let correct: Vec<usize> = clean
        .iter()
        .enumerate()
        .filter(|(i, l)| margin_operator(l, data.label(*i)).is_ok_and(|m| m > 0.0))
        .map(|(i, _)| i)
        .collect();
    if correct.is_empty() {
        return Err(Error::UndefinedMetric(
            "no sample is classified correctly before the attack".into(),
        ));
    }
    let d = data.dim();
    let c = net.output_dim();
    let mut survived = 0usize;
    for chunk in correct.chunks(ATTACK_CHUNK) {
        let mut xs = Vec::with_capacity(chunk.len() * d);
        let mut ys = Vec::with_capacity(chunk.len());
        let mut seeds = Vec::with_capacity(chunk.len());
        for &i in chunk {
            xs.extend_from_slice(data.input(i));
            ys.push(data.label(i));
            seeds.push(sample_seed(cfg.seed, i));
        }
        let adv = perturb_batch(net, &xs, &ys, cfg, &seeds, None)?;
        let logits = net.batch_logits(&adv, chunk.len())?;
        for (k, &y) in ys.iter().enumerate() {
            if margin_operator(&logits[k * c..(k + 1) * c], y)? > 0.0 {
                survived += 1;
            }
        }
    }
    Ok(survived as f64 / correct.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{backward, init_network};
    use crate::numerics::{norm_inf, Matrix};
    use proptest::prelude::*;

    /// logits = (w . x, 0)
    fn linear_two_class(w: &[f64]) -> Network {
        let rows = vec![w.to_vec(), vec![0.0; w.len()]];
        Network::from_weights(vec![Matrix::from_rows(&rows).unwrap()]).unwrap()
    }

    #[test]
    fn zero_radius_is_identity() {
        let net = init_network(&[3, 5, 2], &mut SeededRng::new(1)).unwrap();
        let x = [0.2, 0.5, 0.9];
        for cfg in [AttackConfig::fgsm(0.0), AttackConfig::pgd(0.0)] {
            let r = attack(&net, &x, 1, &cfg).unwrap();
            assert_eq!(r.x_adv, x.to_vec());
            assert!(r.delta.iter().all(|v| *v == 0.0));
            assert!(!r.success);
        }
    }

    #[test]
    fn fgsm_on_linear_model() {
        let net = linear_two_class(&[1.0, -1.0]);
        let x = [0.5, 0.5];
        // finite-difference gradient fixes the expected sign pattern
        let h = 1e-6;
        let ce = |p: &[f64]| {
            crate::losses::cross_entropy_and_prob(&net.logits(p).unwrap(), 0)
                .unwrap()
                .0
        };
        let fd: Vec<f64> = (0..2)
            .map(|k| {
                let mut a = x.to_vec();
                a[k] += h;
                let mut b = x.to_vec();
                b[k] -= h;
                (ce(&a) - ce(&b)) / (2.0 * h)
            })
            .collect();
        assert!(fd[0] < 0.0 && fd[1] > 0.0);
        let r = fgsm(&net, &x, 0, &AttackConfig::fgsm(0.1)).unwrap();
        assert!((r.delta[0] + 0.1).abs() < 1e-15);
        assert!((r.delta[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn fgsm_clips_at_the_corner() {
        // label 1 on logits (w.x, 0): grad_x CE = p_0 w, positive for w > 0
        let net = linear_two_class(&[1.0, 2.0, 0.5]);
        let x = [1.0, 1.0, 1.0];
        let g = backward(&net, &x, 1).unwrap().input_grad;
        assert!(g.iter().all(|v| *v > 0.0));
        let r = fgsm(&net, &x, 1, &AttackConfig::fgsm(0.3)).unwrap();
        assert_eq!(r.x_adv, x.to_vec());
    }

    #[test]
    fn method_mismatch_is_rejected() {
        let net = linear_two_class(&[1.0, 1.0]);
        assert!(fgsm(&net, &[0.1, 0.2], 0, &AttackConfig::pgd(0.1)).is_err());
        assert!(pgd(&net, &[0.1, 0.2], 0, &AttackConfig::fgsm(0.1)).is_err());
        assert!(attack(&net, &[0.1], 0, &AttackConfig::fgsm(0.1)).is_err());
        let bad = AttackConfig {
            steps: 0,
            ..AttackConfig::pgd(0.1)
        };
        assert!(pgd(&net, &[0.1, 0.2], 0, &bad).is_err());
    }

    #[test]
    fn one_step_pgd_equals_fgsm_bitwise() {
        let net = init_network(&[6, 10, 8, 3], &mut SeededRng::new(2)).unwrap();
        let mut rng = SeededRng::new(3);
        for trial in 0..50 {
            let x = rng.uniform(0.0, 1.0, 6).unwrap();
            let eps = 0.01 + 0.2 * rng.next_f64();
            let cfg = AttackConfig {
                steps: 1,
                alpha: eps * (1.0 + rng.next_f64()),
                random_start: false,
                ..AttackConfig::pgd(eps)
            };
            let a = pgd(&net, &x, trial % 3, &cfg).unwrap();
            let b = fgsm(&net, &x, trial % 3, &AttackConfig::fgsm(eps)).unwrap();
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.x_adv), bits(&b.x_adv));
        }
    }

    #[test]
    fn every_iterate_stays_in_the_ball() {
        let net = init_network(&[5, 12, 3], &mut SeededRng::new(4)).unwrap();
        let mut rng = SeededRng::new(5);
        let x = rng.uniform(0.0, 1.0, 5).unwrap();
        let cfg = AttackConfig::pgd(0.07).with_seed(9);
        let mut seen = 0;
        let mut obs = |_: usize, xt: &[f64], _: &[f64]| {
            seen += 1;
            let d: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            assert!(norm_inf(&d) <= 0.07 + 1e-12);
            assert!(xt.iter().all(|v| (0.0..=1.0).contains(v)));
        };
        perturb_batch(&net, &x, &[2], &cfg, &[9], Some(&mut obs)).unwrap();
        assert_eq!(seen, 11);
    }

    #[test]
    fn deterministic_per_seed() {
        let net = init_network(&[4, 8, 2], &mut SeededRng::new(6)).unwrap();
        let x = [0.3, 0.3, 0.6, 0.1];
        let cfg = AttackConfig::pgd(0.1).with_seed(77);
        assert_eq!(
            pgd(&net, &x, 0, &cfg).unwrap(),
            pgd(&net, &x, 0, &cfg).unwrap()
        );
    }

    #[test]
    fn adversarial_accuracy_edge_cases() {
        let net = linear_two_class(&[1.0, -1.0]);
        let data = Dataset::new("t", 2, 2, vec![0.9, 0.1, 0.2, 0.8], vec![0, 1]).unwrap();
        assert_eq!(
            adversarial_accuracy(&net, &data, &AttackConfig::pgd(0.0)).unwrap(),
            1.0
        );
        let flat = Network::from_weights(vec![Matrix::zeros(2, 2)]).unwrap();
        assert!(matches!(
            adversarial_accuracy(&flat, &data, &AttackConfig::pgd(0.1)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn adversarial_accuracy_matches_linear_threshold() {
        let mut rng = SeededRng::new(8);
        for trial in 0..5 {
            let d = 6;
            let w = rng.uniform(-1.0, 1.0, d).unwrap();
            let net = linear_two_class(&w);
            let eps = 0.02 + 0.03 * trial as f64;
            let n = 400;
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..n {
                // keep clear of the faces so clipping never binds
                inputs.extend(rng.uniform(eps, 1.0 - eps, d).unwrap());
                labels.push(rng.next_below(2));
            }
            let data = Dataset::new("lin", d, 2, inputs, labels).unwrap();
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            let mut correct = 0;
            let mut survive = 0;
            for (x, y) in data.iter() {
                let s: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                let m = if y == 0 { s } else { -s };
                if m > 0.0 {
                    correct += 1;
                    if m > eps * l1 {
                        survive += 1;
                    }
                }
            }
            let expected = survive as f64 / correct as f64;
            for cfg in [AttackConfig::fgsm(eps), AttackConfig::pgd(eps).with_seed(3)] {
                let got = adversarial_accuracy(&net, &data, &cfg).unwrap();
                assert!(
                    ((got - expected) * correct as f64).abs() <= 1.0,
                    "{:?}: {got} vs {expected}",
                    cfg.method
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn results_respect_ball_and_box(seed in any::<u64>(), eps in 0.0f64..0.5, y in 0usize..3) {
            let net = init_network(&[4, 6, 3], &mut SeededRng::new(seed)).unwrap();
            let x = SeededRng::new(seed ^ 1).uniform(0.0, 1.0, 4).unwrap();
            for cfg in [AttackConfig::fgsm(eps), AttackConfig::pgd(eps).with_seed(seed)] {
                let r = attack(&net, &x, y, &cfg).unwrap();
                prop_assert!(norm_inf(&r.delta) <= eps + 1e-12);
                prop_assert!(r.x_adv.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
