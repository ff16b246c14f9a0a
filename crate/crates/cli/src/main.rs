use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vfu_core::experiment::{
    append_jsonl, prepare, run_prepared, sweep, write_manifest, write_plot_csv, CertSpec,
    RunArtifacts,
};
use vfu_core::{ExperimentConfig, Mode, SweepAxis};

/// Exit status when a run completed but its certificate did not pass.
const CERT_FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "vfu",
    version,
    about = "Vertical federated unlearning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the federation and evaluate the trained model.
    Train(Common),
    /// Train, then process the configured unlearning request (sync, async or vfulr).
    Unlearn(Common),
    /// Retrain from scratch on the corrected data.
    Retrain(Common),
    /// Unlearn and write the certification report.
    Certify(CertifyArgs),
    /// Run one experiment per value along a sweep axis.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Override the run mode (train, sync, async, retrain, vfulr).
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of clients online per unlearning epoch; implies async mode
    /// unless --mode is given.
    #[arg(long)]
    online_fraction: Option<f64>,
    /// Epoch cap for the phase this command runs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Confidence parameter; delta = 1.5 exp(-c^2 / 2).
    #[arg(long)]
    c: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// removal_fraction or online_count.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

/// Which epoch budget `--max-epochs` controls.
#[derive(Clone, Copy)]
enum Budget {
    Training,
    Unlearning,
    Retraining,
}

fn load_config(args: &Common, forced: Option<Mode>, budget: Budget) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    if let Some(f) = args.online_fraction {
        cfg.schedule.online_fraction = Some(f);
        cfg.schedule.online_count = None;
        cfg.schedule.explicit = None;
        if args.mode.is_none() {
            cfg.mode = Mode::Async;
        }
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(mode) = forced {
        if args.mode.is_some_and(|m| m != mode) {
            bail!(
                "--mode {} conflicts with this subcommand, which runs {mode}",
                cfg.mode
            );
        }
        cfg.mode = mode;
    }
    if let Some(e) = args.max_epochs {
        match budget {
            Budget::Training => cfg.training.max_epochs = e,
            Budget::Unlearning => cfg.unlearning.max_epochs = e,
            Budget::Retraining => cfg.retrain_max_epochs = e,
        }
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate().context("invalid configuration")?;
    std::fs::create_dir_all(&cfg.output.dir)
        .with_context(|| format!("creating output directory {}", cfg.output.dir.display()))?;
    Ok(cfg)
}

fn require_unlearning_mode(cfg: &ExperimentConfig) -> Result<()> {
    if !matches!(cfg.mode, Mode::Sync | Mode::Async | Mode::Vfulr) {
        bail!(
            "mode {} is not an unlearning mode (use sync, async or vfulr)",
            cfg.mode
        );
    }
    if cfg.request.is_none() {
        bail!("config has no unlearning request");
    }
    Ok(())
}

/// Runs one experiment and writes results, ledger, manifest and checkpoints.
fn run_single(
    cfg: &ExperimentConfig,
    checkpoint_tag: &str,
    always_checkpoint: bool,
) -> Result<RunArtifacts> {
    let out = &cfg.output;
    let prep = prepare(cfg).with_context(|| format!("run {}: preparing", cfg.run_id))?;
    write_manifest(&prep, &out.manifest()).context("writing dataset manifest")?;
    let artifacts = run_prepared(&prep, cfg)
        .with_context(|| format!("run {}: {} mode", cfg.run_id, cfg.mode))?;
    append_jsonl(&out.results(), &artifacts.record).context("appending results")?;
    artifacts
        .state
        .ledger
        .write_csv(&out.ledger())
        .context("writing comm ledger")?;
    if always_checkpoint || out.save_checkpoints {
        let dir = out.checkpoints().join(checkpoint_tag);
        artifacts
            .state
            .save_checkpoints(&dir)
            .with_context(|| format!("writing checkpoints to {}", dir.display()))?;
    }
    let r = &artifacts.record;
    log::info!(
        "{} [{}]: accuracy {:.4}, auc {:.4}, {} epochs, {} scalars",
        r.run_id,
        r.mode,
        r.accuracy,
        r.auc,
        r.epochs,
        r.scalars_total
    );
    println!("{}", serde_json::to_string(r)?);
    Ok(artifacts)
}

fn certify_cmd(args: &CertifyArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.common, None, Budget::Unlearning)?;
    require_unlearning_mode(&cfg)?;
    match (&mut cfg.certification, args.epsilon, args.c) {
        (Some(spec), eps, c) => {
            if let Some(eps) = eps {
                spec.epsilon = eps;
            }
            if let Some(c) = c {
                spec.c = c;
            }
        }
        (None, Some(epsilon), Some(c)) => {
            cfg.certification = Some(CertSpec {
                epsilon,
                c,
                gamma: 1.0,
                gamma_z: 1.0,
                calibrate_noise: false,
            })
        }
        (None, _, _) => bail!("no certification section in config; pass --epsilon and --c"),
    }
    let artifacts = run_single(&cfg, "unlearned", false)?;
    let report = artifacts
        .record
        .certification
        .context("run produced no certificate (the request resolved to no change)")?;
    let path = cfg.output.certificate();
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    if report.pass {
        Ok(ExitCode::SUCCESS)
    } else {
        log::warn!(
            "certificate failed: {}",
            report.reason.as_deref().unwrap_or("unknown")
        );
        Ok(ExitCode::from(CERT_FAILED))
    }
}

fn sweep_cmd(args: &SweepArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.common, None, Budget::Unlearning)?;
    require_unlearning_mode(&cfg)?;
    let points =
        sweep(&cfg, args.axis, &args.values).with_context(|| format!("sweep {}", cfg.run_id))?;
    let mut failed = Vec::new();
    for p in &points {
        match &p.result {
            Ok(record) => {
                append_jsonl(&cfg.output.results(), record).context("appending results")?;
                println!("{}", serde_json::to_string(record)?);
            }
            Err(e) => failed.push(format!("{}={}: {e}", args.axis, p.value)),
        }
    }
    write_plot_csv(&cfg.output.plot(), args.axis, &points).context("writing plot data")?;
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        bail!(
            "{} of {} sweep points failed: {}",
            failed.len(),
            points.len(),
            failed.join("; ")
        )
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Train(a) => {
            let cfg = load_config(a, Some(Mode::Train), Budget::Training)?;
            run_single(&cfg, "trained", true)?;
        }
        Command::Unlearn(a) => {
            let cfg = load_config(a, None, Budget::Unlearning)?;
            require_unlearning_mode(&cfg)?;
            run_single(&cfg, "unlearned", false)?;
        }
        Command::Retrain(a) => {
            let cfg = load_config(a, Some(Mode::Retrain), Budget::Retraining)?;
            if cfg.request.is_none() {
                bail!("config has no unlearning request");
            }
            run_single(&cfg, "retrained", false)?;
        }
        Command::Certify(a) => return certify_cmd(a),
        Command::Sweep(a) => return sweep_cmd(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Unlearn(_) => "unlearn",
        Command::Retrain(_) => "retrain",
        Command::Certify(_) => "certify",
        Command::Sweep(_) => "sweep",
    }
}

fn config_path(c: &Command) -> &Path {
    match c {
        Command::Train(a) | Command::Unlearn(a) | Command::Retrain(a) => &a.config,
        Command::Certify(a) => &a.common.config,
        Command::Sweep(a) => &a.common.config,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            let error = serde_json::json!({
                "error": {
                    "command": command_name(&cli.command),
                    "config": config_path(&cli.command).display().to_string(),
                    "message": e.to_string(),
                    "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{error}");
            ExitCode::FAILURE
        }
    }
}
