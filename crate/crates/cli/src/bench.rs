//! Desk-scale benchmark: supervised baseline against the semi-supervised
//! variants on the synthetic shapes data, one seed at a time.

use std::sync::Arc;
use std::time::Instant;

use anyhow::Result;
use semiseg_core::metrics::{auc, roc_curve};

use crate::config::{Mode, RunConfig};
use crate::session::{Classifier, Dataset, Fusion, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Cross-entropy only, no classifier.
    pub supervised: f64,
    /// Cross-entropy plus feature matching.
    pub ce_fm: f64,
    /// Full generator objective, unfused.
    pub ce_fm_st: f64,
    /// Full generator objective fused with the mean-teacher classifier.
    pub fused: f64,
    /// Final-window |mean real − mean fake| discriminator score.
    pub gap_without_st: f64,
    pub gap_with_st: f64,
    pub auc_mt: f64,
    pub auc_cnn: f64,
    pub seconds: f64,
}

fn final_gap(s: &Session) -> f64 {
    s.trace
        .rows()
        .iter()
        .rev()
        .find_map(|r| r.gap())
        .unwrap_or(f64::NAN)
}

fn classifier_auc(s: &Session, which: Classifier) -> Result<f64> {
    let probs = s.class_probs(which, &s.data.val)?;
    let pairs: Vec<(Vec<f64>, Vec<u8>)> = probs
        .into_iter()
        .zip(&s.data.val)
        .map(|(p, v)| {
            let z = v
                .image_labels(s.config.num_classes)?
                .expect("validation masks");
            Ok((p, z.bits().to_vec()))
        })
        .collect::<Result<_>>()?;
    Ok(auc(&roc_curve(&pairs)?))
}

/// Train the three generator variants for one seed and score them.
pub fn desk_seed(base: &RunConfig, seed: u64) -> Result<SeedOutcome> {
    let start = Instant::now();
    let mut cfg = base.clone();
    cfg.hparams.seed = seed;
    cfg.val_every = 0;
    let data = Arc::new(Dataset::synthetic(&cfg)?);

    let mut sup_cfg = cfg.clone();
    sup_cfg.mode = Mode::SupervisedOnly;
    let mut sup = Session::new(&sup_cfg, Arc::clone(&data))?;
    sup.run_until(usize::MAX)?;
    let supervised = sup.evaluate(Fusion::None)?;

    let mut fm_cfg = cfg.clone();
    fm_cfg.hparams.lambda_st = 0.0;
    fm_cfg.mlmt = false;
    fm_cfg.cnn_baseline = false;
    let mut fm = Session::new(&fm_cfg, Arc::clone(&data))?;
    fm.run_until(usize::MAX)?;
    let ce_fm = fm.evaluate(Fusion::None)?;

    let mut full_cfg = cfg.clone();
    full_cfg.mlmt = true;
    full_cfg.cnn_baseline = true;
    let mut full = Session::new(&full_cfg, Arc::clone(&data))?;
    full.run_until(usize::MAX)?;

    Ok(SeedOutcome {
        seed,
        supervised,
        ce_fm,
        ce_fm_st: full.evaluate(Fusion::None)?,
        fused: full.evaluate(Fusion::Mlmt)?,
        gap_without_st: final_gap(&fm),
        gap_with_st: final_gap(&full),
        auc_mt: classifier_auc(&full, Classifier::Mlmt)?,
        auc_cnn: classifier_auc(&full, Classifier::Cnn)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
