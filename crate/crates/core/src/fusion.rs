//! Evaluation-time fusion of segmentation maps with image-level evidence.

use semiseg_nn::Tensor;

use crate::error::{Error, Result};
use crate::sample::{argmax_mask, BACKGROUND};

fn dims(seg: &Tensor) -> Result<(usize, usize)> {
    match *seg.shape() {
        [c, h, w] => Ok((c, h * w)),
        ref other => Err(Error::Shape {
            what: "segmentation map",
            expected: vec![0, 0, 0],
            got: other.to_vec(),
        }),
    }
}

fn zero_channels(seg: &Tensor, drop: impl Fn(usize) -> bool) -> Result<Tensor> {
    let (c, hw) = dims(seg)?;
    let mut out = seg.clone();
    for ch in (0..c).filter(|&ch| ch != BACKGROUND && drop(ch)) {
        out.data_mut()[ch * hw..(ch + 1) * hw].fill(0.0);
    }
    Ok(out)
}

/// Zero every non-background channel `c` of `seg [C,H,W]` with
/// `class_probs[c] <= tau`. No renormalization.
pub fn fuse(seg: &Tensor, class_probs: &[f64], tau: f64) -> Result<Tensor> {
    let (c, _) = dims(seg)?;
    if class_probs.len() != c {
        return Err(Error::Shape {
            what: "class probabilities",
            expected: vec![c],
            got: vec![class_probs.len()],
        });
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::HyperParam {
            name: "tau",
            reason: format!("{tau} is outside [0, 1]"),
        });
    }
    zero_channels(seg, |ch| class_probs[ch] <= tau)
}

/// Minimum predicted pixel count for a class to survive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PixelThresholds {
    Global(usize),
    PerClass(Vec<usize>),
}

impl PixelThresholds {
    pub fn get(&self, class: usize) -> usize {
        match self {
            Self::Global(t) => *t,
            Self::PerClass(v) => v.get(class).copied().unwrap_or(0),
        }
    }
}

/// Zero the channels of non-background classes whose argmax area is below
/// their threshold.
pub fn fuse_pixel_threshold(seg: &Tensor, thresholds: &PixelThresholds) -> Result<Tensor> {
    let (c, _) = dims(seg)?;
    if let PixelThresholds::PerClass(v) = thresholds {
        if v.len() != c {
            return Err(Error::Shape {
                what: "class-wise thresholds",
                expected: vec![c],
                got: vec![v.len()],
            });
        }
    }
    let counts = argmax_mask(seg)?.class_counts(c);
    zero_channels(seg, |ch| counts[ch] < thresholds.get(ch))
}
