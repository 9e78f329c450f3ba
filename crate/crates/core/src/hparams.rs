use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar knobs shared by both branches.
///
/// Defaults are the published values for the PASCAL-scale setup. The loss
/// weights were tuned with pixel-summed losses at 321×321; this crate averages
/// over pixels instead, which leaves the weights resolution independent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda_fm: f64,
    pub lambda_st: f64,
    pub lambda_cons: f64,
    /// Discriminator confidence needed to admit a pseudo-label.
    pub gamma: f64,
    /// Classifier probability at or below which a class channel is dropped.
    pub tau: f64,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub pow: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_fm: 0.1,
            lambda_st: 1.0,
            lambda_cons: 1.0,
            gamma: 0.6,
            tau: 0.2,
            lr_seg: 2.5e-4,
            lr_disc: 1e-4,
            pow: 0.9,
            max_iter: 35_000,
            batch_size: 8,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

fn check(ok: bool, name: &'static str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::HyperParam {
            name,
            reason: reason.into(),
        })
    }
}

impl HyperParams {
    /// Validate ranges. Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let pos = |v: f64| v.is_finite() && v > 0.0;
        check(nonneg(self.lambda_fm), "lambda_fm", "must be nonnegative")?;
        check(nonneg(self.lambda_st), "lambda_st", "must be nonnegative")?;
        check(
            nonneg(self.lambda_cons),
            "lambda_cons",
            "must be nonnegative",
        )?;
        check(unit(self.gamma), "gamma", "must lie in [0, 1]")?;
        check(unit(self.tau), "tau", "must lie in [0, 1]")?;
        check(pos(self.lr_seg), "lr_seg", "must be positive")?;
        check(pos(self.lr_disc), "lr_disc", "must be positive")?;
        check(pos(self.pow), "pow", "must be positive")?;
        check(self.max_iter > 0, "max_iter", "must be positive")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        check(unit(self.ema_decay), "ema_decay", "must lie in [0, 1]")?;
        let mut warnings = Vec::new();
        if self.gamma < 0.5 {
            warnings.push(format!(
                "gamma = {} is below chance; the discriminator gate will admit arbitrary pseudo-labels",
                self.gamma
            ));
        }
        Ok(warnings)
    }
}
