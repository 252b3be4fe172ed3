//! Command-line front end for arlab experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod ladder;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use arlab_core::attacks::{AttackConfig, AttackMethod};
use arlab_core::diagnostics::{BoundOptions, MARGIN_BINS};

use crate::commands::DiagSettings;
use crate::config::{resolve, ExperimentConfig};
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "arlab",
    version,
    about = "Adversarial training and robustness geometry lab"
)]
pub struct Cli {
    /// Base directory for every relative input and output path.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network from a key = value config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
    },
    /// Attack a dataset and write the adversarial copy.
    Attack {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "pgd")]
        method: String,
        #[arg(long)]
        eps: f64,
        /// Defaults to eps / 4 for PGD.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        no_random_start: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "adv.ard")]
        out: PathBuf,
    },
    /// Margins, spectra, GE gaps and loss variation of a checkpoint.
    Diagnose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.02)]
        probe_eps: f64,
        #[arg(long, default_value_t = MARGIN_BINS)]
        bins: usize,
        #[arg(long, default_value_t = -15.0, allow_negative_numbers = true)]
        margin_lo: f64,
        #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
        margin_hi: f64,
        #[arg(long, default_value_t = 20)]
        hist_bins: usize,
        #[arg(long, default_value_t = 10.0)]
        loss_cap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Decompose the segment between two samples into linear regions.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        i: usize,
        #[arg(long)]
        j: usize,
        #[arg(long)]
        layer: usize,
    },
    /// Evaluate the robustness generalization bound.
    Bound {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gamma: f64,
        /// Covering radius.
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        cx: f64,
        #[arg(long)]
        k: u32,
        #[arg(long)]
        eta: f64,
        /// Probe at most this many samples; 0 probes all.
        #[arg(long, default_value_t = 256)]
        subsample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        monotony_grid: usize,
    },
    /// Train and diagnose one network per (eps, seed).
    Ladder {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the configured train and test sets as dataset caches.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "train.ard")]
        train_out: PathBuf,
        #[arg(long, default_value = "test.ard")]
        test_out: PathBuf,
    },
}

pub fn run(cli: &Cli) -> Result<()> {
    let base = &cli.output_dir;
    match &cli.command {
        Command::Train { config, out } => {
            let (_, log) = commands::train(base, config, out)?;
            if let Some(e) = log.last() {
                println!(
                    "epoch {} train_loss {} test_loss {} test_err {}",
                    e.epoch, e.train_loss, e.test_loss, e.test_err
                );
            }
        }
        Command::Attack {
            ckpt,
            data,
            method,
            eps,
            alpha,
            steps,
            no_random_start,
            seed,
            out,
        } => {
            let method: AttackMethod = method
                .parse()
                .map_err(|_| CliError::Usage(format!("unknown attack method {method:?}")))?;
            let base_cfg = match method {
                AttackMethod::Pgd => AttackConfig::pgd(*eps),
                AttackMethod::Fgsm => AttackConfig::fgsm(*eps),
            };
            let cfg = AttackConfig {
                alpha: alpha.unwrap_or(base_cfg.alpha),
                steps: if method == AttackMethod::Pgd {
                    *steps
                } else {
                    1
                },
                random_start: method == AttackMethod::Pgd && !no_random_start,
                seed: *seed,
                ..base_cfg
            };
            let s = commands::attack(base, ckpt, data, &cfg, out)?;
            println!(
                "clean_acc {} adv_acc {:?} flip_rate {}",
                s.clean_acc, s.adv_acc, s.flip_rate
            );
        }
        Command::Diagnose {
            ckpt,
            train,
            test,
            gamma,
            probe_eps,
            bins,
            margin_lo,
            margin_hi,
            hist_bins,
            loss_cap,
            seed,
        } => {
            let s = DiagSettings {
                gamma: *gamma,
                probe_eps: *probe_eps,
                margin_bins: *bins,
                margin_range: (*margin_lo, *margin_hi),
                hist_bins: *hist_bins,
                loss_cap: *loss_cap,
                seed: *seed,
            };
            let r = commands::diagnose(base, ckpt, train, test, &s)?;
            println!("loss_gap {} err_gap {}", r.ge.loss_gap, r.ge.err_gap);
        }
        Command::Trace {
            ckpt,
            data,
            i,
            j,
            layer,
        } => {
            let t = commands::trace(base, ckpt, data, *i, *j, *layer)?;
            println!(
                "lhs {} rhs {} rel_err {}",
                t.check.lhs, t.check.rhs, t.check.rel_err
            );
        }
        Command::Bound {
            ckpt,
            data,
            gamma,
            eps,
            cx,
            k,
            eta,
            subsample,
            seed,
            monotony_grid,
        } => {
            let opts = BoundOptions {
                subsample: (*subsample > 0).then_some(*subsample),
                seed: *seed,
                monotony_grid: *monotony_grid,
            };
            let r = commands::bound(base, ckpt, data, *gamma, *eps, *cx, *k, *eta, &opts)?;
            println!(
                "u_min {} term1 {} term2 {} bound {}",
                r.u_min, r.term1, r.term2, r.bound
            );
        }
        Command::Ladder { config } => {
            let cfg = ExperimentConfig::load(&resolve(base, config))?;
            let cells = ladder::run_ladder(&cfg, base, base)?;
            let failed = cells.iter().filter(|c| !c.row.ok()).count();
            for c in &cells {
                println!("eps {} seed {} {}", c.eps, c.seed, c.row.status);
            }
            if failed > 0 {
                return Err(CliError::LadderIncomplete {
                    failed,
                    total: cells.len(),
                });
            }
        }
        Command::GenData {
            config,
            train_out,
            test_out,
        } => {
            let (tr, te) = commands::gen_data(base, config, train_out, test_out)?;
            println!("train {} test {}", tr.len(), te.len());
        }
    }
    Ok(())
}
