//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Every key is optional; unknown and repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use arlab_core::attacks::{AttackConfig, AttackMethod};
use arlab_core::data::{gen_blobs, gen_two_moons, load_idx, split_dataset, BlobsConfig, Dataset};
use arlab_core::diagnostics::{MARGIN_BINS, MARGIN_RANGE};
use arlab_core::numerics::SeededRng;
use arlab_core::training::TrainConfig;

use crate::error::{usage, CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
        std: f64,
        seed: u64,
    },
    Moons {
        train_per_class: usize,
        test_per_class: usize,
        noise: f64,
        seed: u64,
    },
    /// Dataset cache files.
    File { train: PathBuf, test: PathBuf },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        train_fraction: f64,
        seed: u64,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Blobs {
            classes: 10,
            dim: 64,
            train_per_class: 500,
            test_per_class: 100,
            separation: 4.0,
            std: 1.0,
            seed: 2024,
        }
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl DataSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DataSpec::Blobs { .. } => "blobs",
            DataSpec::Moons { .. } => "moons",
            DataSpec::File { .. } => "file",
            DataSpec::Idx { .. } => "idx",
        }
    }

    /// Builds `(train, test)`; relative paths are taken from `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        Ok(match self {
            DataSpec::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
                std,
                seed,
            } => {
                let cfg = BlobsConfig {
                    classes: *classes,
                    dim: *dim,
                    per_class: train_per_class + test_per_class,
                    separation: *separation,
                    std: *std,
                };
                let all = gen_blobs(&cfg, &mut SeededRng::new(*seed))?;
                // samples cycle through the classes, so a prefix is balanced
                let cut = train_per_class * classes;
                let train: Vec<usize> = (0..cut).collect();
                let test: Vec<usize> = (cut..all.len()).collect();
                (
                    all.subset(&train).with_name("blobs-train"),
                    all.subset(&test).with_name("blobs-test"),
                )
            }
            DataSpec::Moons {
                train_per_class,
                test_per_class,
                noise,
                seed,
            } => (
                gen_two_moons(
                    *train_per_class,
                    *noise,
                    &mut SeededRng::derived(*seed, &[0]),
                )?
                .with_name("moons-train"),
                gen_two_moons(
                    *test_per_class,
                    *noise,
                    &mut SeededRng::derived(*seed, &[1]),
                )?
                .with_name("moons-test"),
            ),
            DataSpec::File { train, test } => (
                Dataset::load(resolve(base, train))?,
                Dataset::load(resolve(base, test))?,
            ),
            DataSpec::Idx {
                images,
                labels,
                train_fraction,
                seed,
            } => {
                let all = load_idx(resolve(base, images), resolve(base, labels))?;
                split_dataset(&all, *train_fraction, &mut SeededRng::new(*seed))?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub adv_method: AttackMethod,
    pub adv_eps: f64,
    /// `None` means `eps / 4` for PGD and `eps` for FGSM.
    pub adv_alpha: Option<f64>,
    pub adv_steps: usize,
    pub adv_random_start: bool,
    pub adv_eval_every: usize,
    pub sn_clip: Option<f64>,
    pub data: DataSpec,
    pub ladder_eps: Vec<f64>,
    pub ladder_seeds: Vec<u64>,
    pub gamma: f64,
    pub probe_eps: f64,
    pub margin_bins: usize,
    pub margin_lo: f64,
    pub margin_hi: f64,
    pub hist_bins: usize,
    pub loss_cap: f64,
    pub bound_eps: f64,
    pub bound_cx: f64,
    pub bound_k: u32,
    pub bound_eta: f64,
    /// `None` probes every training sample.
    pub bound_subsample: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AttackConfig::pgd(0.0);
        Self {
            widths: t.widths,
            seed: t.seed,
            epochs: t.epochs,
            batch: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            decay_epochs: t.lr_decay_epochs,
            decay_factor: t.lr_decay_factor,
            adv_method: a.method,
            adv_eps: a.epsilon,
            adv_alpha: None,
            adv_steps: a.steps,
            adv_random_start: a.random_start,
            adv_eval_every: t.adv_eval_every,
            sn_clip: t.sn_clip,
            data: DataSpec::default(),
            ladder_eps: vec![0.0, 0.05, 0.1, 0.2],
            ladder_seeds: vec![1, 2, 3],
            gamma: 1.0,
            probe_eps: 0.02,
            margin_bins: MARGIN_BINS,
            margin_lo: MARGIN_RANGE.0,
            margin_hi: MARGIN_RANGE.1,
            hist_bins: 20,
            loss_cap: 10.0,
            bound_eps: 1.0,
            bound_cx: 1.0,
            bound_k: 1,
            bound_eta: 0.05,
            bound_subsample: Some(256),
        }
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

fn parse_value<T: FromStr>(key: &str, line: usize, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("line {line}: cannot parse {key} = {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, line: usize, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| parse_value(key, line, s.trim()))
        .collect()
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((line, v)) = self.map.remove(key) {
            *slot = parse_value(key, line, &v)?;
        }
        Ok(())
    }

    fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<()> {
        if let Some((line, v)) = self.map.remove(key) {
            *slot = parse_list(key, line, &v)?;
        }
        Ok(())
    }

    /// `none` clears the option.
    fn take_opt<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()> {
        if let Some((line, v)) = self.map.remove(key) {
            *slot = if v.eq_ignore_ascii_case("none") {
                None
            } else {
                Some(parse_value(key, line, &v)?)
            };
        }
        Ok(())
    }

    fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.map.remove(key).map(|(_, v)| PathBuf::from(v))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return usage(format!("line {}: expected key = value, got {raw:?}", i + 1));
            };
            let key = k.trim().to_string();
            if map
                .insert(key.clone(), (i + 1, v.trim().to_string()))
                .is_some()
            {
                return usage(format!("line {}: key {key} given twice", i + 1));
            }
        }
        let mut e = Entries { map };
        let mut c = ExperimentConfig::default();
        e.take_list("widths", &mut c.widths)?;
        e.take("seed", &mut c.seed)?;
        e.take("epochs", &mut c.epochs)?;
        e.take("batch", &mut c.batch)?;
        e.take("lr", &mut c.lr)?;
        e.take("momentum", &mut c.momentum)?;
        e.take_list("decay_epochs", &mut c.decay_epochs)?;
        e.take("decay_factor", &mut c.decay_factor)?;
        if let Some((line, v)) = e.map.remove("adv.method") {
            c.adv_method = v.parse().map_err(|_| {
                CliError::Usage(format!("line {line}: unknown attack method {v:?}"))
            })?;
        }
        e.take("adv.eps", &mut c.adv_eps)?;
        e.take_opt("adv.alpha", &mut c.adv_alpha)?;
        e.take("adv.steps", &mut c.adv_steps)?;
        e.take("adv.random_start", &mut c.adv_random_start)?;
        e.take("adv.eval_every", &mut c.adv_eval_every)?;
        e.take_opt("sn.clip", &mut c.sn_clip)?;
        e.take_list("ladder.eps", &mut c.ladder_eps)?;
        e.take_list("ladder.seeds", &mut c.ladder_seeds)?;
        e.take("diag.gamma", &mut c.gamma)?;
        e.take("diag.probe_eps", &mut c.probe_eps)?;
        e.take("diag.margin_bins", &mut c.margin_bins)?;
        e.take("diag.margin_lo", &mut c.margin_lo)?;
        e.take("diag.margin_hi", &mut c.margin_hi)?;
        e.take("diag.hist_bins", &mut c.hist_bins)?;
        e.take("diag.loss_cap", &mut c.loss_cap)?;
        e.take("bound.eps", &mut c.bound_eps)?;
        e.take("bound.cx", &mut c.bound_cx)?;
        e.take("bound.k", &mut c.bound_k)?;
        e.take("bound.eta", &mut c.bound_eta)?;
        e.take_opt("bound.subsample", &mut c.bound_subsample)?;

        let kind = e
            .map
            .remove("dataset")
            .map(|(_, v)| v)
            .unwrap_or_else(|| "blobs".into());
        c.data = match kind.as_str() {
            "blobs" => {
                let DataSpec::Blobs {
                    mut classes,
                    mut dim,
                    mut train_per_class,
                    mut test_per_class,
                    mut separation,
                    mut std,
                    mut seed,
                } = DataSpec::default()
                else {
                    unreachable!()
                };
                e.take("data.classes", &mut classes)?;
                e.take("data.dim", &mut dim)?;
                e.take("data.train_per_class", &mut train_per_class)?;
                e.take("data.test_per_class", &mut test_per_class)?;
                e.take("data.separation", &mut separation)?;
                e.take("data.std", &mut std)?;
                e.take("data.seed", &mut seed)?;
                DataSpec::Blobs {
                    classes,
                    dim,
                    train_per_class,
                    test_per_class,
                    separation,
                    std,
                    seed,
                }
            }
            "moons" => {
                let (mut train_per_class, mut test_per_class, mut noise, mut seed) =
                    (500usize, 100usize, 0.1, 2024u64);
                e.take("data.train_per_class", &mut train_per_class)?;
                e.take("data.test_per_class", &mut test_per_class)?;
                e.take("data.noise", &mut noise)?;
                e.take("data.seed", &mut seed)?;
                DataSpec::Moons {
                    train_per_class,
                    test_per_class,
                    noise,
                    seed,
                }
            }
            "file" => {
                let (Some(train), Some(test)) =
                    (e.take_path("data.train"), e.take_path("data.test"))
                else {
                    return usage("dataset = file needs data.train and data.test");
                };
                DataSpec::File { train, test }
            }
            "idx" => {
                let (Some(images), Some(labels)) =
                    (e.take_path("data.images"), e.take_path("data.labels"))
                else {
                    return usage("dataset = idx needs data.images and data.labels");
                };
                let (mut train_fraction, mut seed) = (0.8, 2024u64);
                e.take("data.train_fraction", &mut train_fraction)?;
                e.take("data.seed", &mut seed)?;
                DataSpec::Idx {
                    images,
                    labels,
                    train_fraction,
                    seed,
                }
            }
            other => {
                return usage(format!(
                    "unknown dataset {other:?} (blobs, moons, file, idx)"
                ))
            }
        };

        if let Some((key, (line, _))) = e.map.into_iter().next() {
            return usage(format!("line {line}: unknown key {key}"));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::File {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config(self.adv_eps, self.seed).validate()?;
        if self.ladder_eps.is_empty() {
            return usage("ladder.eps must not be empty");
        }
        if self.ladder_eps.windows(2).any(|w| !(w[0] < w[1])) {
            return usage("ladder.eps must be sorted ascending without repeats");
        }
        if self.ladder_seeds.is_empty() {
            return usage("ladder.seeds must not be empty");
        }
        if !(self.gamma > 0.0) {
            return usage(format!("diag.gamma must be positive, got {}", self.gamma));
        }
        if let DataSpec::Blobs { classes, dim, .. } = self.data {
            if self.widths.first() != Some(&dim) || self.widths.last() != Some(&classes) {
                return usage(format!(
                    "widths {:?} must start at data.dim {dim} and end at data.classes {classes}",
                    self.widths
                ));
            }
        }
        Ok(())
    }

    pub fn attack(&self, eps: f64) -> AttackConfig {
        let base = match self.adv_method {
            AttackMethod::Pgd => AttackConfig::pgd(eps),
            AttackMethod::Fgsm => AttackConfig::fgsm(eps),
        };
        AttackConfig {
            alpha: self.adv_alpha.unwrap_or(base.alpha),
            steps: if self.adv_method == AttackMethod::Pgd {
                self.adv_steps
            } else {
                1
            },
            random_start: self.adv_method == AttackMethod::Pgd && self.adv_random_start,
            ..base
        }
    }

    pub fn train_config(&self, eps: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            widths: self.widths.clone(),
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            momentum: self.momentum,
            lr_decay_epochs: self.decay_epochs.clone(),
            lr_decay_factor: self.decay_factor,
            attack: self.attack(eps),
            sn_clip: self.sn_clip,
            seed,
            adv_eval_every: self.adv_eval_every,
        }
    }

    /// Canonical text; `parse(render())` reproduces the config.
    pub fn render(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
        }
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("widths", list(&self.widths));
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("decay_epochs", list(&self.decay_epochs));
        kv("decay_factor", self.decay_factor.to_string());
        kv("adv.method", self.adv_method.to_string());
        kv("adv.eps", self.adv_eps.to_string());
        kv("adv.alpha", opt(&self.adv_alpha));
        kv("adv.steps", self.adv_steps.to_string());
        kv("adv.random_start", self.adv_random_start.to_string());
        kv("adv.eval_every", self.adv_eval_every.to_string());
        kv("sn.clip", opt(&self.sn_clip));
        kv("dataset", self.data.kind().to_string());
        match &self.data {
            DataSpec::Blobs {
                classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
                std,
                seed,
            } => {
                kv("data.classes", classes.to_string());
                kv("data.dim", dim.to_string());
                kv("data.train_per_class", train_per_class.to_string());
                kv("data.test_per_class", test_per_class.to_string());
                kv("data.separation", separation.to_string());
                kv("data.std", std.to_string());
                kv("data.seed", seed.to_string());
            }
            DataSpec::Moons {
                train_per_class,
                test_per_class,
                noise,
                seed,
            } => {
                kv("data.train_per_class", train_per_class.to_string());
                kv("data.test_per_class", test_per_class.to_string());
                kv("data.noise", noise.to_string());
                kv("data.seed", seed.to_string());
            }
            DataSpec::File { train, test } => {
                kv("data.train", train.display().to_string());
                kv("data.test", test.display().to_string());
            }
            DataSpec::Idx {
                images,
                labels,
                train_fraction,
                seed,
            } => {
                kv("data.images", images.display().to_string());
                kv("data.labels", labels.display().to_string());
                kv("data.train_fraction", train_fraction.to_string());
                kv("data.seed", seed.to_string());
            }
        }
        kv("ladder.eps", list(&self.ladder_eps));
        kv("ladder.seeds", list(&self.ladder_seeds));
        kv("diag.gamma", self.gamma.to_string());
        kv("diag.probe_eps", self.probe_eps.to_string());
        kv("diag.margin_bins", self.margin_bins.to_string());
        kv("diag.margin_lo", self.margin_lo.to_string());
        kv("diag.margin_hi", self.margin_hi.to_string());
        kv("diag.hist_bins", self.hist_bins.to_string());
        kv("diag.loss_cap", self.loss_cap.to_string());
        kv("bound.eps", self.bound_eps.to_string());
        kv("bound.cx", self.bound_cx.to_string());
        kv("bound.k", self.bound_k.to_string());
        kv("bound.eta", self.bound_eta.to_string());
        kv("bound.subsample", opt(&self.bound_subsample));
        s
    }
}
