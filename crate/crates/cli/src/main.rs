//! Command-line harness around the adaptation library: pretrain a source
//! classifier, warm it into a posterior, run adaptation streams, sweep
//! parameters, chart results, and self-check the math.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use vcotta::RngState;
use vcotta_cli::checkpoint::{self, SidecarMeta};
use vcotta_cli::spec::ExperimentSpec;
use vcotta_cli::{experiment, plot, sweep};

#[derive(Parser)]
#[command(
    name = "vcotta",
    about = "Continual test-time adaptation for variational classifiers on synthetic streams",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment TOML file; omitted means built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set adapt.tau=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let spec = match &self.config {
            Some(path) => ExperimentSpec::load(path, &self.set),
            None => ExperimentSpec::parse("", &self.set),
        }?;
        for note in spec.advisories() {
            eprintln!("warning: {note}");
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the deterministic source classifier and checkpoint it.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint path (default <out_dir>/pretrained.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warm a deterministic net into a variational posterior.
    Warmup {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Deterministic checkpoint to start from; omitted means pretrain
        /// first with the config's settings.
        #[arg(long)]
        det: Option<PathBuf>,
        /// Checkpoint path (default <out_dir>/source.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured method over a corruption stream.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Variational source checkpoint; omitted means build the source
        /// from scratch (pretrain plus warm-up).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Artifact directory (default from config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the experiment once per value of a swept parameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Axis spec, e.g. mixture_weight=1,0.5,0,adaptive
        #[arg(long)]
        axis: String,
        /// Sweep root directory (default <out_dir>/sweep).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG charts from a finished run or sweep directory.
    Plot {
        /// Run directory holding per_segment.csv.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Sweep directory holding sweep.csv.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Run the numerical self-checks and report pass/fail for each.
    Verify {
        /// Seed for the randomized checks.
        #[arg(long, default_value_t = 20_240_901)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { cfg, out } => cmd_pretrain(&cfg, out),
        Command::Warmup { cfg, det, out } => cmd_warmup(&cfg, det, out),
        Command::Adapt { cfg, source, out } => cmd_adapt(&cfg, source, out),
        Command::Sweep { cfg, axis, out } => cmd_sweep(&cfg, &axis, out),
        Command::Plot { run, sweep } => cmd_plot(run, sweep),
        Command::Verify { seed } => cmd_verify(seed),
    }
}

fn cmd_pretrain(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let spec = args.load()?;
    let task = experiment::prepare_task(&spec)?;
    let outcome = experiment::pretrain_only(&spec, &task)?;
    let path = out.unwrap_or_else(|| spec.resolved_out_dir(None).join("pretrained.ckpt"));
    let meta = SidecarMeta {
        seed: spec.seed,
        config_sha256: spec.config_hash()?,
        created_by: "pretrain".to_string(),
        kind: "deterministic".to_string(),
        train_error: Some(outcome.train_error),
    };
    checkpoint::save_deterministic(&path, &outcome.net, &meta)?;
    println!(
        "pretrained source: train error {:.4} after {} epochs ({}converged)",
        outcome.train_error,
        outcome.epochs_run,
        if outcome.converged { "" } else { "not " }
    );
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_warmup(args: &ConfigArgs, det: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let spec = args.load()?;
    let task = experiment::prepare_task(&spec)?;
    let det_net = match det {
        Some(path) => {
            let net = checkpoint::load_deterministic(&path)?;
            let arch = net.arch();
            if arch.input_dim != spec.dataset.dim || arch.class_count != spec.dataset.classes {
                bail!(
                    "{} is a {}-input {}-class net, but the config asks for {} inputs and {} classes",
                    path.display(),
                    arch.input_dim,
                    arch.class_count,
                    spec.dataset.dim,
                    spec.dataset.classes
                );
            }
            net
        }
        None => experiment::pretrain_only(&spec, &task)?.net,
    };
    let outcome = experiment::warmup_only(&spec, &det_net, &task)?;
    let path = out.unwrap_or_else(|| spec.resolved_out_dir(None).join("source.ckpt"));
    let meta = SidecarMeta {
        seed: spec.seed,
        config_sha256: spec.config_hash()?,
        created_by: "warmup".to_string(),
        kind: "variational".to_string(),
        train_error: Some(outcome.warm_train_error),
    };
    checkpoint::save_variational(&path, &outcome.net, &meta)?;
    println!(
        "warm-up: deterministic train error {:.4}, posterior mean train error {:.4}",
        outcome.det_train_error, outcome.warm_train_error
    );
    if outcome.degraded {
        println!("warning: warm-up degraded accuracy beyond its trust threshold");
    }
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_adapt(args: &ConfigArgs, source: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let spec = args.load()?;
    let source_net = source
        .map(|p| checkpoint::load_variational(&p))
        .transpose()?;
    let artifacts = experiment::run_experiment(&spec, source_net, out.as_deref())?;
    let o = &artifacts.record.overall;
    println!(
        "{} over {} batches ({} samples, {} skipped)",
        spec.method.name(),
        o.batch_count,
        o.sample_count,
        o.skipped_batches
    );
    println!(
        "served: error {:.4}  nll {:.4}  brier {:.4}",
        o.mixed.error, o.mixed.nll, o.mixed.brier
    );
    println!(
        "heads:  source error {:.4}  teacher error {:.4}  mean mixture weight {:.4}",
        o.source.error, o.teacher.error, o.mean_alpha
    );
    println!("artifacts in {}", artifacts.out_dir.display());
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, axis: &str, out: Option<PathBuf>) -> Result<()> {
    let spec = args.load()?;
    let out_root = out.unwrap_or_else(|| spec.resolved_out_dir(None).join("sweep"));
    let rows = sweep::run_sweep(&spec, axis, &out_root)?;
    for r in &rows {
        match (r.mixed_error, r.mean_alpha) {
            (Some(e), Some(a)) => {
                println!("{:<20} error {:.4}  mean mixture weight {:.4}", r.label, e, a)
            }
            _ => println!("{:<20} {}", r.label, r.status),
        }
    }
    println!("sweep artifacts in {}", out_root.display());
    Ok(())
}

fn cmd_plot(run: Option<PathBuf>, sweep_dir: Option<PathBuf>) -> Result<()> {
    match (run, sweep_dir) {
        (Some(r), None) => {
            for path in plot::plot_run(&r)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        (None, Some(s)) => {
            println!("wrote {}", plot::plot_sweep(&s)?.display());
            Ok(())
        }
        _ => bail!("pass exactly one of --run or --sweep"),
    }
}

fn cmd_verify(seed: u64) -> Result<()> {
    let mut rng = RngState::new(seed);
    let reports = vcotta::selfcheck::run_all(&mut rng)?;
    let mut failures = 0usize;
    for report in &reports {
        println!("{report}");
        if !report.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} of {} self-checks failed", reports.len());
    }
    println!("all {} self-checks passed", reports.len());
    Ok(())
}
