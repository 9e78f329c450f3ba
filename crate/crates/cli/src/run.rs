//! Top-level train / eval / ablation drivers writing their artifacts to disk.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};

use crate::checkpoint::{self, metrics_csv};
use crate::config::{Mode, RunConfig};
use crate::eval::{evaluate, rows_to_csv, EvalRow, FusionMode, Split};
use crate::session::{Dataset, Fusion, Session};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_logs(session: &Session, out: &Path) -> Result<()> {
    write(&out.join("metrics.csv"), &metrics_csv(&session.records))?;
    write(&out.join("score_trace.csv"), &session.trace.to_csv())
}

/// Final (or stop-point) checkpoint location under an output directory.
pub fn final_checkpoint(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

/// Train from scratch or from `resume`, stopping after iteration `stop_at`
/// (exclusive) if given. Periodic checkpoints go to `out/checkpoints/`.
pub fn run_train(
    config: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    stop_at: Option<usize>,
) -> Result<Session> {
    let mut session = match resume {
        Some(dir) => checkpoint::load(dir)?,
        None => Session::new(config, Arc::new(Dataset::synthetic(config)?))?,
    };
    let stop = stop_at.unwrap_or(usize::MAX).min(session.max_iter());
    let every = session.config.checkpoint_every;
    while session.iter < stop {
        let rec = session.step()?;
        if let Some(m) = rec.miou_val {
            eprintln!(
                "iter {:>6}  loss_ce {:.4}  miou_val {:.4}",
                rec.iter,
                rec.loss_ce.unwrap_or(f64::NAN),
                m
            );
        }
        if every > 0 && session.iter % every == 0 && session.iter < stop {
            let dir = out
                .join("checkpoints")
                .join(format!("iter-{:06}", session.iter));
            checkpoint::save(&session, &dir)?;
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    checkpoint::save(&session, &final_checkpoint(out))?;
    write_logs(&session, out)?;
    Ok(session)
}

/// Evaluate a checkpoint; results are also written to `out/eval.csv`.
pub fn run_eval(
    checkpoint_dir: &Path,
    modes: &[FusionMode],
    split: Split,
    out: &Path,
) -> Result<Vec<EvalRow>> {
    let session = checkpoint::load(checkpoint_dir)?;
    let mut rows = Vec::new();
    for &m in modes {
        rows.extend(evaluate(&session, m, split)?);
    }
    write(&out.join("eval.csv"), &rows_to_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    LossTerms,
    FusionModes,
    StDynamics,
}

impl std::str::FromStr for Ablation {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_terms" => Ok(Self::LossTerms),
            "fusion_modes" => Ok(Self::FusionModes),
            "st_dynamics" => Ok(Self::StDynamics),
            _ => anyhow::bail!(
                "unknown ablation {s:?} (expected loss_terms, fusion_modes or st_dynamics)"
            ),
        }
    }
}

/// Generator-objective variants of the loss ablation, by name.
pub fn loss_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut ce = base.clone();
    ce.mode = Mode::SupervisedOnly;
    let mut no_st = base.clone();
    no_st.hparams.lambda_st = 0.0;
    no_st.mlmt = false;
    no_st.cnn_baseline = false;
    let mut sgan = no_st.clone();
    sgan.gen_loss = semiseg_core::s4gan::AdversarialTerm::StandardGan;
    let mut full = base.clone();
    full.mlmt = false;
    full.cnn_baseline = false;
    vec![
        ("CE", ce),
        ("CE+SGAN", sgan),
        ("CE+FM", no_st),
        ("CE+FM+ST", full),
    ]
}

fn train_in_memory(config: &RunConfig, data: &Arc<Dataset>) -> Result<Session> {
    let mut s = Session::new(config, Arc::clone(data))?;
    s.config.val_every = 0;
    s.run_until(usize::MAX)?;
    Ok(s)
}

pub fn run_ablation(config: &RunConfig, which: Ablation, out: &Path) -> Result<String> {
    let data = Arc::new(Dataset::synthetic(config)?);
    let table = match which {
        Ablation::LossTerms => {
            let mut s = String::from("variant,miou\n");
            for (name, cfg) in loss_variants(config) {
                let session = train_in_memory(&cfg, &data)?;
                s.push_str(&format!("{name},{}\n", session.evaluate(Fusion::None)?));
            }
            s
        }
        Ablation::FusionModes => {
            let mut cfg = config.clone();
            cfg.mlmt = true;
            cfg.cnn_baseline = true;
            let session = train_in_memory(&cfg, &data)?;
            let mut rows = Vec::new();
            for m in FusionMode::ALL {
                rows.extend(evaluate(&session, m, Split::Val)?);
            }
            rows_to_csv(&rows)
        }
        Ablation::StDynamics => {
            let mut s = String::from("variant,final_window,mean_real,mean_fake,gap\n");
            for (name, lambda_st) in [("without_st", 0.0), ("with_st", config.hparams.lambda_st)] {
                let mut cfg = config.clone();
                cfg.hparams.lambda_st = lambda_st;
                cfg.mlmt = false;
                cfg.cnn_baseline = false;
                let session = train_in_memory(&cfg, &data)?;
                write(
                    &out.join(format!("score_trace_{name}.csv")),
                    &session.trace.to_csv(),
                )?;
                if let Some(r) = session.trace.rows().last() {
                    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    s.push_str(&format!(
                        "{name},{},{},{},{}\n",
                        r.window,
                        f(r.mean_real),
                        f(r.mean_fake),
                        f(r.gap())
                    ));
                }
            }
            s
        }
    };
    let name = match which {
        Ablation::LossTerms => "ablation_loss_terms.csv",
        Ablation::FusionModes => "ablation_fusion_modes.csv",
        Ablation::StDynamics => "ablation_st_dynamics.csv",
    };
    write(&out.join(name), &table)?;
    Ok(table)
}
