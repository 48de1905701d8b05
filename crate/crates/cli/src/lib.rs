//! Experiment runner for `spikegrad`: config files, checkpoints and the subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{Precision, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "spikegrad",
    version,
    about = "Train and probe surrogate-gradient spiking networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// `key = value` config file; unset keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, evaluating on the test split after every epoch.
    Train,
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences (always 64-bit).
    Gradcheck {
        #[arg(long, hide = true)]
        sabotage: bool,
    },
    /// Train once per gradient-mask probability.
    MaskSweep {
        #[arg(long, value_delimiter = ',', value_name = "P,..")]
        p_list: Option<Vec<f64>>,
    },
    /// Weight-gradient histograms across surrogate families and widths.
    Gradstats {
        #[arg(long, value_delimiter = ',', value_name = "A,..")]
        alphas: Option<Vec<f64>>,
    },
    /// Write the synthetic temporal dataset as IDX files.
    SynthGen,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Train => {
            let s = match cfg.precision {
                Precision::F32 => run::run_train::<f32>(&cfg)?,
                Precision::F64 => run::run_train::<f64>(&cfg)?,
            };
            for (r, t) in s.records.iter().zip(&s.timings) {
                println!(
                    "epoch {} loss {:.4} train {:.4} test {:.4} (mean-decode {:.4}) {:.2}s",
                    r.epoch,
                    r.train_loss,
                    r.train_acc,
                    r.test_acc,
                    r.test_acc_mean_decode,
                    t.epoch_seconds
                );
            }
            println!("wrote {}", s.out.display());
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.out.join("checkpoint.bin"));
            let r = match cfg.precision {
                Precision::F32 => run::run_eval::<f32>(&cfg, &path)?,
                Precision::F64 => run::run_eval::<f64>(&cfg, &path)?,
            };
            println!(
                "test {:.4} (mean-decode {:.4})",
                r.test_acc, r.test_acc_mean_decode
            );
        }
        Command::Gradcheck { sabotage } => {
            for r in run::run_gradcheck(&cfg, *sabotage)? {
                println!(
                    "{} alpha {}: max relative error {:.3e} ok",
                    r.family, r.alpha, r.max_rel_err
                );
            }
        }
        Command::MaskSweep { p_list } => {
            let ps = p_list.clone().unwrap_or_else(|| cfg.sweep_p_list.0.clone());
            let rows = match cfg.precision {
                Precision::F32 => run::run_mask_sweep::<f32>(&cfg, &ps)?,
                Precision::F64 => run::run_mask_sweep::<f64>(&cfg, &ps)?,
            };
            for r in rows {
                println!(
                    "p {} test {:.4} {:.2}s/epoch",
                    r.p, r.test_acc, r.mean_epoch_seconds
                );
            }
        }
        Command::Gradstats { alphas } => {
            let alphas = alphas
                .clone()
                .unwrap_or_else(|| cfg.gradstats_alphas.0.clone());
            let fams = cfg.gradstats_families.0.clone();
            let stats = match cfg.precision {
                Precision::F32 => run::run_gradstats::<f32>(&cfg, &fams, &alphas)?,
                Precision::F64 => run::run_gradstats::<f64>(&cfg, &fams, &alphas)?,
            };
            for s in stats {
                println!(
                    "{} alpha {}: zero gradients {:.4} (below readout {:.4}), zero surrogate {:.4}",
                    s.family,
                    s.alpha,
                    s.zero_fraction,
                    s.surrogate_path_zero_fraction,
                    s.surrogate_zero_fraction
                );
            }
        }
        Command::SynthGen => {
            for p in run::run_synth_gen(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("spikegrad: {e}");
            e.exit_code()
        }
    }
}
