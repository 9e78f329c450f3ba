use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use semiseg_cli::checkpoint::read_header;
use semiseg_cli::config::{Preset, RunConfig};
use semiseg_cli::eval::{rows_to_csv, FusionMode, Split};
use semiseg_cli::run::{final_checkpoint, run_ablation, run_eval, run_train, Ablation};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Train,
    Eval,
    Ablation,
}

/// Semi-supervised semantic segmentation: train, evaluate and ablate.
#[derive(Debug, Parser)]
#[command(name = "semiseg", version)]
struct Args {
    #[arg(long, value_enum, default_value = "train")]
    mode: Command,
    /// Flat `key = value` config applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    labeled_ratio: Option<String>,
    #[arg(long)]
    lambda_fm: Option<f64>,
    #[arg(long)]
    lambda_st: Option<f64>,
    #[arg(long)]
    lambda_cons: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Continue training from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many iterations have run.
    #[arg(long)]
    stop_at: Option<usize>,
    /// Checkpoint to evaluate; defaults to `<out>/checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fusion mode for eval, or `all`.
    #[arg(long, default_value = "mlmt")]
    fusion: String,
    #[arg(long, default_value = "val")]
    split: String,
    /// loss_terms, fusion_modes, st_dynamics or all.
    #[arg(long, default_value = "all")]
    ablation: String,
}

fn build_config(args: &Args) -> Result<RunConfig> {
    let base = RunConfig::preset(args.preset.parse::<Preset>()?);
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path, base)?,
        None => base,
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("labeled_ratio", args.labeled_ratio.clone()),
        ("lambda_fm", args.lambda_fm.map(|v| v.to_string())),
        ("lambda_st", args.lambda_st.map(|v| v.to_string())),
        ("lambda_cons", args.lambda_cons.map(|v| v.to_string())),
        ("gamma", args.gamma.map(|v| v.to_string())),
        ("tau", args.tau.map(|v| v.to_string())),
        ("ema_decay", args.ema_decay.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("max_iter", args.max_iter.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Whether any flag besides the preset shapes the config.
fn explicit_config(args: &Args) -> bool {
    args.config.is_some()
        || !args.overrides.is_empty()
        || args.labeled_ratio.is_some()
        || args.lambda_fm.is_some()
        || args.lambda_st.is_some()
        || args.lambda_cons.is_some()
        || args.gamma.is_some()
        || args.tau.is_some()
        || args.ema_decay.is_some()
        || args.seed.is_some()
        || args.max_iter.is_some()
}

fn run(args: Args) -> Result<()> {
    match args.mode {
        Command::Train => {
            let cfg = build_config(&args)?;
            if let (Some(dir), true) = (&args.resume, explicit_config(&args)) {
                let (_, saved) = read_header(dir)?;
                if saved.effective().digest() != cfg.effective().digest() {
                    bail!(
                        "checkpoint {} was written with a different config; resume without config flags or match it exactly",
                        dir.display()
                    );
                }
            }
            let s = run_train(&cfg, &args.out, args.resume.as_deref(), args.stop_at)?;
            println!(
                "trained to iteration {} of {}; checkpoint at {}",
                s.iter,
                s.max_iter(),
                final_checkpoint(&args.out).display()
            );
            if let Some(m) = s.records.last().and_then(|r| r.miou_val) {
                println!("miou_val {m:.4}");
            }
        }
        Command::Eval => {
            let ckpt = args
                .checkpoint
                .clone()
                .unwrap_or_else(|| final_checkpoint(&args.out));
            if explicit_config(&args) {
                let want = build_config(&args)?.num_classes;
                let (_, saved) = read_header(&ckpt)?;
                if saved.num_classes != want {
                    bail!(
                        "checkpoint has {} classes but the config asks for {want}",
                        saved.num_classes
                    );
                }
            }
            let modes = if args.fusion == "all" {
                FusionMode::ALL.to_vec()
            } else {
                vec![args.fusion.parse()?]
            };
            let rows = run_eval(&ckpt, &modes, args.split.parse::<Split>()?, &args.out)?;
            print!("{}", rows_to_csv(&rows));
        }
        Command::Ablation => {
            let cfg = build_config(&args)?;
            let which = if args.ablation == "all" {
                vec![
                    Ablation::LossTerms,
                    Ablation::FusionModes,
                    Ablation::StDynamics,
                ]
            } else {
                vec![args.ablation.parse()?]
            };
            for a in which {
                print!("{}", run_ablation(&cfg, a, &args.out)?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.resume.is_some() && !matches!(args.mode, Command::Train) {
        eprintln!("error: --resume only applies to --mode train");
        return ExitCode::from(2);
    }
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
