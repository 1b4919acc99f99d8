//! The `ldeq` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ldeq_core::budget::{overall_bound, sensitivity_sweep, write_sweep_csv, SweepParam};
use ldeq_core::equilibrium::solve_forward;
use ldeq_core::model::Model;
use ldeq_core::solvers::{write_trace_rows, TRACE_HEADER};
use ldeq_core::Mode;

use crate::config::{load, RunConfig};
use crate::data::load_dataset;
use crate::error::HarnessError;
use crate::{checkpoint, lipcheck, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ldeq", version, about = "Lipschitz-bounded multiscale equilibrium models")]
pub struct Cli {
    /// INI run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one setting, as `section.key=value` or `key=value`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the closed-form Lipschitz budget.
    Budget,
    /// Bound as one parameter varies, as CSV.
    Sweep {
        /// a, c, gamma_bar, p, n, alpha1 or alpha2.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical-to-analytic ratio table per op and for the built model.
    Lipcheck {
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
    /// Residual trace of one forward solve, as CSV.
    Solve {
        /// Sample of the configured dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Solve with saved weights instead of a freshly built model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, writing metrics.csv and a checkpoint to the output directory.
    Train,
    /// Accuracy and solver statistics of a checkpoint.
    Eval {
        /// Defaults to `<out_dir>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<HarnessError>() {
        Some(HarnessError::Config { .. }) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parse `argv` and run; returns the process exit status.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn write_to(path: &Option<PathBuf>, out: &mut dyn Write, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            let mut file = std::fs::File::create(p).map_err(|e| HarnessError::io(p, e))?;
            f(&mut file).map_err(|e| HarnessError::io(p, e))?;
        }
        None => f(out)?,
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg: RunConfig = load(cli.config.as_deref(), &cli.set)?;
    match &cli.command {
        Command::Budget => {
            let report = overall_bound(&cfg.model.lip)?;
            writeln!(out, "{report}")?;
            writeln!(out, "contraction: {}", if report.is_contraction() { "yes" } else { "no" })?;
        }
        Command::Sweep { param, values, out: path } => {
            let p: SweepParam = param
                .parse()
                .map_err(|e: ldeq_core::Error| HarnessError::config("--param", crate::error::Origin::Override, e.to_string()))?;
            let rows = sensitivity_sweep(&cfg.model.lip, p, values);
            write_to(path, out, |w| write_sweep_csv(&rows, w))?;
        }
        Command::Lipcheck { pairs } => {
            let mut rows = lipcheck::op_ratios(*pairs, cfg.seed)?;
            let model = Model::<f64>::build(&cfg.model)?;
            rows.extend(lipcheck::model_ratios(&model, *pairs, 100, Mode::Train, cfg.seed)?);
            lipcheck::write_table(&rows, &mut *out)?;
        }
        Command::Solve {
            index,
            checkpoint: ckpt,
            out: path,
        } => {
            let (cfg, model) = match ckpt {
                Some(dir) => checkpoint::load(dir)?,
                None => (cfg.clone(), Model::<f32>::build(&cfg.model)?),
            };
            let data = load_dataset(&cfg)?;
            if *index >= data.len() {
                anyhow::bail!("sample {index} out of range for {} samples", data.len());
            }
            let (x, _) = data.batch(&[*index]);
            let ctx = model.eval_context(&x)?;
            let r = solve_forward(&model, &ctx, &cfg.solver_fwd)?;
            let id = format!("sample{index}");
            write_to(path, out, |w| {
                writeln!(w, "{TRACE_HEADER}")?;
                write_trace_rows(&id, &r.forward_report, cfg.solver_fwd.metric, w)
            })?;
        }
        Command::Train => {
            let outcome = train::train(&cfg)?;
            if let Some(e) = outcome.epochs.last() {
                writeln!(
                    out,
                    "epochs {} loss {:.4} accuracy {:.4} mean fwd nfes {:.2}",
                    e.epoch, e.mean_loss, e.accuracy, e.mean_fwd_nfes
                )?;
            }
            writeln!(out, "wrote {}", cfg.out_dir.display())?;
        }
        Command::Eval { checkpoint: ckpt } => {
            let dir = ckpt.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint"));
            let (saved, model) = checkpoint::load(&dir)?;
            let data = load_dataset(&saved)?;
            let r = train::evaluate(&model, &data, &saved.solver_fwd, saved.batch_size)?;
            writeln!(
                out,
                "samples {} accuracy {:.4} mean nfes {:.2} mean residual {:.3e} converged {:.3}",
                r.samples, r.accuracy, r.mean_nfes, r.mean_residual, r.converged_fraction
            )?;
        }
    }
    Ok(())
}
