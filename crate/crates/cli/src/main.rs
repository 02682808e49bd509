//! `patchloc` command-line front end.
//!
//! Exit status: 0 on success, 2 for configuration errors (including bad
//! flags), 3 when training or refinement aborts on a non-finite value, and 1
//! for any other failure such as I/O or a malformed dataset.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchloc::config::{parse_arm, RunConfig};
use patchloc::losses::LossFamily;
use patchloc::metrics::Criterion;
use patchloc::runner::{
    arms_from_config, cmd_compare, cmd_eval, cmd_report, cmd_stability, cmd_synth, cmd_train, cmd_train_folds,
    CvOutcome,
};
use patchloc::{Error, Result};

#[derive(Parser)]
#[command(name = "patchloc", version, about = "Patch-grid localization with limited box annotation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out (default: the configured dataset path).
    Synth(Common),
    /// Train one model on the dataset, or cross-validate when --folds is given.
    Train(Common),
    /// Score checkpoints on the annotated test folds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint used for every fold; defaults to <out>/fold<i>/checkpoint.plck.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Localization threshold T.
        #[arg(long, value_name = "T")]
        t: Option<f64>,
    },
    /// Cross-validate several arms on identical folds and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Arm as family@unannotated_fraction, e.g. relu@0.2; repeatable. Defaults to compare.arms.
        #[arg(long = "arm", value_name = "SPEC")]
        arms: Vec<String>,
    },
    /// Underflow and boundedness table of the product and hinge losses.
    Stability(Common),
    /// Re-render the table and charts of an evaluation directory (--out).
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file; unset keys keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "K")]
    folds: Option<usize>,
    #[arg(long, value_name = "FAMILY")]
    loss: Option<LossFamily>,
    #[arg(long = "unannotated-fraction", value_name = "F")]
    unannotated_fraction: Option<f64>,
    /// Dataset directory, overriding `dataset`.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Extra dotted-key override, e.g. --set train.phase1_epochs=5; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(k) = self.folds {
            cfg.eval.folds = k;
        }
        if let Some(l) = self.loss {
            cfg.loss.family = l;
        }
        if let Some(f) = self.unannotated_fraction {
            cfg.train.unannotated_fraction = f;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        Ok(cfg)
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn print_cv(cv: &CvOutcome, out: &Path) {
    let names: Vec<String> = (0..cv.summary.cells.len()).map(|c| format!("class{c}")).collect();
    print!("{}", cv.summary.to_table(&names));
    for crit in Criterion::ALL {
        match cv.mean(crit) {
            Some(m) => println!("mean {} accuracy at T={}: {m:.4}", crit.name(), cv.summary.t),
            None => println!("mean {} accuracy at T={}: NA", crit.name(), cv.summary.t),
        }
    }
    println!("wrote {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.resolve()?;
            let out = c.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            let samples = cmd_synth(&cfg, &out)?;
            let boxed = samples.iter().filter(|s| s.annotation.is_annotated()).count();
            println!("wrote {} images ({boxed} with boxes) to {}", samples.len(), out.display());
        }
        Command::Train(c) => {
            let cfg = c.resolve()?;
            let out = c.out_or("runs/train");
            if c.folds.is_some() {
                cfg.validate()?;
                let cv = cmd_train_folds(&cfg, &out)?;
                print_cv(&cv, &out);
            } else {
                let (model, report) = cmd_train(&cfg, &out)?;
                if let Some(last) = report.log.last() {
                    println!("final epoch {} ({}) loss {:.6}", last.epoch, last.phase, last.loss);
                }
                for k in 0..model.classes() {
                    let th = &model.thresholds;
                    println!(
                        "class{k}: tau {:.4} rho {:.4} tau_hat {:.4} rho_hat {:.4}",
                        th.tau[k], th.rho[k], th.tau_hat[k], th.rho_hat[k]
                    );
                }
                println!("wrote {}", out.display());
            }
        }
        Command::Eval { common, checkpoint, t } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = t {
                cfg.eval.t = t;
            }
            let out = common.out_or("runs/train");
            let cv = cmd_eval(&cfg, checkpoint.as_deref(), &out)?;
            print_cv(&cv, &out);
        }
        Command::Compare { common, arms } => {
            let mut cfg = common.resolve()?;
            if !arms.is_empty() {
                for a in &arms {
                    parse_arm(a)?;
                }
                cfg.compare.arms = arms;
            }
            let out = common.out_or("runs/compare");
            let cmp = cmd_compare(&arms_from_config(&cfg)?, &out)?;
            print!("{}", cmp.to_csv());
            println!("wrote {}", out.display());
        }
        Command::Stability(c) => {
            let out = c.out_or("runs/stability");
            print!("{}", cmd_stability(&out)?);
        }
        Command::Report(c) => {
            let out = c.out_or("runs/train");
            print!("{}", cmd_report(&out)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if e.is_config() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
