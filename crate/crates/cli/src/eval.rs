//! Evaluation of a trained session under the fusion modes.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use semiseg_core::fusion::{fuse, fuse_pixel_threshold, PixelThresholds};
use semiseg_core::SegmentationSample;
use semiseg_nn::Tensor;

use crate::session::{miou_of, Classifier, Session};

/// Pixel-count grid of the threshold baselines, defined at 321×321 and
/// rescaled to the evaluation resolution.
pub const THRESHOLD_GRID: [usize; 12] = [
    1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000, 9000, 10000, 11000, 12000,
];
const REFERENCE_PIXELS: f64 = 321.0 * 321.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    None,
    Mlmt,
    Cnn,
    PixelThreshold,
    ClasswisePixelThreshold,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        Self::None,
        Self::Mlmt,
        Self::Cnn,
        Self::PixelThreshold,
        Self::ClasswisePixelThreshold,
    ];
}

impl FromStr for FusionMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "mlmt" => Self::Mlmt,
            "cnn" => Self::Cnn,
            "pixel_threshold" => Self::PixelThreshold,
            "classwise_pixel_threshold" => Self::ClasswisePixelThreshold,
            _ => bail!(
                "unknown fusion mode {s:?} (expected none, mlmt, cnn, pixel_threshold or classwise_pixel_threshold)"
            ),
        })
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Mlmt => "mlmt",
            Self::Cnn => "cnn",
            Self::PixelThreshold => "pixel_threshold",
            Self::ClasswisePixelThreshold => "classwise_pixel_threshold",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Val,
    Train,
}

impl FromStr for Split {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Self::Val),
            "train" => Ok(Self::Train),
            _ => bail!("unknown split {s:?} (expected val or train)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: FusionMode,
    /// Threshold setting for the pixel-count baselines.
    pub setting: String,
    pub miou: f64,
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("fusion,setting,miou\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.mode, r.setting, r.miou));
    }
    s
}

/// Grid value rescaled to an `h × w` image.
pub fn scaled_threshold(reference: usize, h: usize, w: usize) -> usize {
    (reference as f64 * (h * w) as f64 / REFERENCE_PIXELS).round() as usize
}

fn miou_with(
    preds: &[Tensor],
    samples: &[SegmentationSample],
    c: usize,
    thresholds: &PixelThresholds,
) -> Result<f64> {
    let fused = preds
        .iter()
        .map(|p| Ok(fuse_pixel_threshold(p, thresholds)?))
        .collect::<Result<Vec<_>>>()?;
    miou_of(&fused, samples, c)
}

/// Class-wise thresholds by one coordinate-ascent pass over the classes,
/// each picking the best of `{0} ∪ grid` with the others held fixed.
pub fn classwise_search(
    preds: &[Tensor],
    samples: &[SegmentationSample],
    c: usize,
    grid: &[usize],
) -> Result<(Vec<usize>, f64)> {
    let mut t = vec![0; c];
    let mut best = miou_of(preds, samples, c)?;
    for class in 1..c {
        for &cand in grid {
            let mut trial = t.clone();
            trial[class] = cand;
            let m = miou_with(preds, samples, c, &PixelThresholds::PerClass(trial.clone()))?;
            if m > best {
                best = m;
                t = trial;
            }
        }
    }
    Ok((t, best))
}

pub fn evaluate(session: &Session, mode: FusionMode, split: Split) -> Result<Vec<EvalRow>> {
    let samples: &[SegmentationSample] = match split {
        Split::Val => &session.data.val,
        Split::Train => &session.data.train,
    };
    let c = session.config.num_classes;
    let res = session.config.resolution;
    let preds = session.predictions(samples)?;
    let tau = session.config.hparams.tau;
    let fused_with = |which: Classifier| -> Result<f64> {
        let probs = session.class_probs(which, samples)?;
        let fused = preds
            .iter()
            .zip(&probs)
            .map(|(p, pr)| Ok(fuse(p, pr, tau)?))
            .collect::<Result<Vec<_>>>()?;
        miou_of(&fused, samples, c)
    };
    let row = |setting: String, miou: f64| EvalRow {
        mode,
        setting,
        miou,
    };
    Ok(match mode {
        FusionMode::None => vec![row(String::new(), miou_of(&preds, samples, c)?)],
        FusionMode::Mlmt => vec![row(format!("tau={tau}"), fused_with(Classifier::Mlmt)?)],
        FusionMode::Cnn => vec![row(format!("tau={tau}"), fused_with(Classifier::Cnn)?)],
        FusionMode::PixelThreshold => THRESHOLD_GRID
            .iter()
            .map(|&t| {
                let px = scaled_threshold(t, res, res);
                let m = miou_with(&preds, samples, c, &PixelThresholds::Global(px))?;
                Ok(row(format!("{t}({px}px)"), m))
            })
            .collect::<Result<_>>()?,
        FusionMode::ClasswisePixelThreshold => {
            let grid: Vec<usize> = THRESHOLD_GRID
                .iter()
                .map(|&t| scaled_threshold(t, res, res))
                .collect();
            let (t, m) = classwise_search(&preds, samples, c, &grid)?;
            let setting = t
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";");
            vec![row(setting, m)]
        }
    })
}
