//! Checkpoint directories: a JSON header, the canonical config text, one
//! binary blob per network and optimizer, the score trace and the metrics
//! log so far. Random streams are derived from `(seed, iteration)`, so no
//! generator state needs saving.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use semiseg_core::metrics::{MetricRecord, ScoreTrace, METRICS_HEADER};
use semiseg_core::mlmt::{Classifier, MlmtBranch};
use semiseg_core::s4gan::{Discriminator, Generator};
use semiseg_nn::{Adam, Optimizer, ParamSet};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::session::{Dataset, Session};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub iteration: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub config_digest: String,
    pub mlmt: bool,
    pub cnn_baseline: bool,
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        bail!("metrics file does not start with the expected header");
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| Ok(MetricRecord::from_csv_row(l)?))
        .collect()
}

fn save_classifier(dir: &Path, prefix: &str, b: &MlmtBranch) -> Result<()> {
    write(
        dir,
        &format!("{prefix}_student.bin"),
        &b.student.params().to_bytes(),
    )?;
    write(
        dir,
        &format!("{prefix}_teacher.bin"),
        &b.teacher.params().to_bytes(),
    )?;
    write(dir, &format!("{prefix}_opt.bin"), &b.opt.state_bytes())
}

fn load_classifier(dir: &Path, prefix: &str, b: &mut MlmtBranch) -> Result<()> {
    let cfg = b.student.config().clone();
    let params = |name: &str| -> Result<ParamSet> {
        ParamSet::from_bytes(&read(dir, &format!("{prefix}_{name}.bin"))?)
            .with_context(|| format!("decoding {prefix}_{name}.bin"))
    };
    b.student = Classifier::from_params(cfg.clone(), params("student")?)?;
    b.teacher = Classifier::from_params(cfg, params("teacher")?)?;
    b.opt = Adam::from_state_bytes(&read(dir, &format!("{prefix}_opt.bin"))?)?;
    Ok(())
}

/// Write `session` to `dir`, replacing any previous checkpoint there.
pub fn save(session: &Session, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    let cfg = &session.config;
    let header = Header {
        format_version: FORMAT_VERSION,
        iteration: session.iter,
        max_iter: cfg.hparams.max_iter,
        seed: cfg.hparams.seed,
        config_digest: cfg.digest(),
        mlmt: session.mlmt.is_some(),
        cnn_baseline: session.cnn.is_some(),
    };
    write(
        &tmp,
        "header.json",
        serde_json::to_string_pretty(&header)?.as_bytes(),
    )?;
    write(&tmp, "config.txt", cfg.to_text().as_bytes())?;
    let seg = &session.seg;
    write(&tmp, "generator.bin", &seg.generator.params().to_bytes())?;
    write(
        &tmp,
        "discriminator.bin",
        &seg.discriminator.params().to_bytes(),
    )?;
    write(&tmp, "seg_opt.bin", &seg.seg_opt.state_bytes())?;
    write(&tmp, "disc_opt.bin", &seg.disc_opt.state_bytes())?;
    if let Some(m) = &session.mlmt {
        save_classifier(&tmp, "mlmt", m)?;
    }
    if let Some(c) = &session.cnn {
        save_classifier(&tmp, "cnn", c)?;
    }
    write(&tmp, "trace.txt", session.trace.to_state().as_bytes())?;
    write(
        &tmp,
        "metrics.csv",
        metrics_csv(&session.records).as_bytes(),
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("replacing {}", dir.display()))?;
    }
    fs::rename(&tmp, dir).with_context(|| format!("moving checkpoint into {}", dir.display()))?;
    Ok(())
}

pub fn read_header(dir: &Path) -> Result<(Header, RunConfig)> {
    let header: Header = serde_json::from_slice(&read(dir, "header.json")?)
        .with_context(|| format!("parsing {}/header.json", dir.display()))?;
    if header.format_version != FORMAT_VERSION {
        bail!(
            "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        );
    }
    let text = String::from_utf8(read(dir, "config.txt")?).context("config.txt is not UTF-8")?;
    let mut config = RunConfig::desk();
    config.apply_text(&text)?;
    if config.digest() != header.config_digest {
        bail!("config.txt does not match the digest recorded in header.json");
    }
    Ok((header, config))
}

/// Rebuild a session from `dir`, regenerating the dataset from its config.
pub fn load(dir: &Path) -> Result<Session> {
    let (_, config) = read_header(dir)?;
    let data = Arc::new(Dataset::synthetic(&config)?);
    load_with_data(dir, data)
}

pub fn load_with_data(dir: &Path, data: Arc<Dataset>) -> Result<Session> {
    let (header, config) = read_header(dir)?;
    let mut s = Session::new(&config, data)?;
    if s.mlmt.is_some() != header.mlmt || s.cnn.is_some() != header.cnn_baseline {
        bail!("checkpoint branches do not match its config");
    }
    let params = |name: &str| -> Result<ParamSet> {
        ParamSet::from_bytes(&read(dir, name)?).with_context(|| format!("decoding {name}"))
    };
    let gen_cfg = s.seg.generator.config().clone();
    let disc_cfg = s.seg.discriminator.config().clone();
    s.seg.generator = Generator::from_params(gen_cfg, params("generator.bin")?)?;
    s.seg.discriminator = Discriminator::from_params(disc_cfg, params("discriminator.bin")?)?;
    s.seg.seg_opt = Optimizer::from_state_bytes(&read(dir, "seg_opt.bin")?)?;
    s.seg.disc_opt = Adam::from_state_bytes(&read(dir, "disc_opt.bin")?)?;
    if let Some(m) = s.mlmt.as_mut() {
        load_classifier(dir, "mlmt", m)?;
    }
    if let Some(c) = s.cnn.as_mut() {
        load_classifier(dir, "cnn", c)?;
    }
    let trace = String::from_utf8(read(dir, "trace.txt")?).context("trace.txt is not UTF-8")?;
    s.trace = ScoreTrace::from_state(&trace)?;
    let metrics =
        String::from_utf8(read(dir, "metrics.csv")?).context("metrics.csv is not UTF-8")?;
    s.records = parse_metrics_csv(&metrics)?;
    s.iter = header.iteration;
    if s.records.len() != s.iter {
        bail!(
            "checkpoint at iteration {} holds {} metric rows",
            s.iter,
            s.records.len()
        );
    }
    Ok(s)
}
