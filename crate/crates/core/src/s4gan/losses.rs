//! Generator and discriminator objectives, each returning its value together
//! with the gradient with respect to the network output it consumes.

use semiseg_nn::Tensor;

use crate::error::{Error, Result};
use crate::s4gan::discriminator::Critic;
use crate::sample::{argmax_mask, LabelMask};

/// Probabilities are floored here before taking a log.
pub const PROB_FLOOR: f64 = 1e-8;
/// Discriminator scores are clamped to `[SCORE_CLAMP, 1 - SCORE_CLAMP]`.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Scalar loss and its gradient with respect to one input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FmNorm {
    /// Mean absolute difference of the feature means.
    #[default]
    L1,
    /// Mean squared difference of the feature means.
    L2,
}

fn dims(pred: &Tensor) -> Result<[usize; 4]> {
    pred.dims4("probability maps").map_err(Error::from)
}

/// Pixel-averaged cross-entropy of `pred [N,C,H,W]` against hard labels.
pub fn loss_ce(pred: &Tensor, masks: &[&LabelMask]) -> Result<LossGrad> {
    let [n, c, h, w] = dims(pred)?;
    if masks.len() != n {
        return Err(Error::Shape {
            what: "cross-entropy masks",
            expected: vec![n],
            got: vec![masks.len()],
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch("cross-entropy"));
    }
    let hw = h * w;
    let total = (n * hw) as f64;
    let p = pred.data();
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    let g = grad.data_mut();
    let mut sum = 0.0;
    for (i, m) in masks.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape {
                what: "cross-entropy mask",
                expected: vec![h, w],
                got: vec![m.height(), m.width()],
            });
        }
        m.check_classes(c)?;
        for (px, &label) in m.labels().iter().enumerate() {
            let k = (i * c + label as usize) * hw + px;
            let prob = p[k];
            if prob >= PROB_FLOOR {
                sum -= prob.ln();
                g[k] = -1.0 / (total * prob);
            } else {
                sum -= PROB_FLOOR.ln();
            }
        }
    }
    Ok(LossGrad {
        value: sum / total,
        grad,
    })
}

/// Distance between batch-mean features of real and generated inputs.
/// The gradient is taken with respect to `fake` only; `real` is a target.
pub fn feature_matching(real: &Tensor, fake: &Tensor, norm: FmNorm) -> Result<LossGrad> {
    let [nr, f] = real.dims2("real features")?;
    let [nf, f2] = fake.dims2("fake features")?;
    if nr == 0 || nf == 0 {
        return Err(Error::EmptyBatch("feature matching"));
    }
    if f != f2 {
        return Err(Error::Shape {
            what: "feature matching",
            expected: vec![nf, f],
            got: vec![nf, f2],
        });
    }
    let mean = |t: &Tensor, n: usize| -> Vec<f64> {
        let mut m = vec![0.0; f];
        for row in t.data().chunks_exact(f) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        m.iter().map(|v| v / n as f64).collect()
    };
    let (mr, mf) = (mean(real, nr), mean(fake, nf));
    let mut value = 0.0;
    let mut per_dim = vec![0.0; f];
    for k in 0..f {
        let d = mr[k] - mf[k];
        match norm {
            FmNorm::L1 => {
                value += d.abs();
                // d|mr - mf| / d mf
                per_dim[k] = -d.signum() * if d == 0.0 { 0.0 } else { 1.0 };
            }
            FmNorm::L2 => {
                value += d * d;
                per_dim[k] = -2.0 * d;
            }
        }
    }
    value /= f as f64;
    let scale = 1.0 / (f as f64 * nf as f64);
    let mut grad = Tensor::zeros(vec![nf, f]);
    for row in grad.data_mut().chunks_exact_mut(f) {
        for (g, d) in row.iter_mut().zip(&per_dim) {
            *g = d * scale;
        }
    }
    Ok(LossGrad { value, grad })
}

/// Feature-matching loss evaluated through a critic.
pub fn loss_fm(
    disc: &impl Critic,
    labeled: (&Tensor, &Tensor),
    unlabeled: (&Tensor, &Tensor),
    norm: FmNorm,
) -> Result<f64> {
    let (_, real) = disc.critique(labeled.0, labeled.1)?;
    let (_, fake) = disc.critique(unlabeled.0, unlabeled.1)?;
    Ok(feature_matching(&real, &fake, norm)?.value)
}

/// Hard labels taken from a prediction the discriminator accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub mask: LabelMask,
    pub confidence: f64,
}

/// Argmax labels of `pred [C,H,W]` if `score >= gamma`.
pub fn make_pseudo_labels(pred: &Tensor, score: f64, gamma: f64) -> Result<Option<PseudoLabel>> {
    if score >= gamma {
        Ok(Some(PseudoLabel {
            mask: argmax_mask(pred)?,
            confidence: score,
        }))
    } else {
        Ok(None)
    }
}

/// Self-training loss over `pred [N,C,H,W]`: the mean cross-entropy of the
/// admitted samples against their (constant) pseudo-labels; zero when none
/// were admitted.
pub fn loss_st(pred: &Tensor, pseudo: &[Option<PseudoLabel>]) -> Result<LossGrad> {
    let [n, ..] = dims(pred)?;
    if pseudo.len() != n {
        return Err(Error::Shape {
            what: "pseudo-labels",
            expected: vec![n],
            got: vec![pseudo.len()],
        });
    }
    let admitted: Vec<usize> = (0..n).filter(|&i| pseudo[i].is_some()).collect();
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    if admitted.is_empty() {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let sub = pred.select(&admitted)?;
    let masks: Vec<&LabelMask> = admitted
        .iter()
        .map(|&i| &pseudo[i].as_ref().expect("admitted").mask)
        .collect();
    let inner = loss_ce(&sub, &masks)?;
    let stride = pred.numel() / n;
    for (k, &i) in admitted.iter().enumerate() {
        grad.data_mut()[i * stride..(i + 1) * stride]
            .copy_from_slice(&inner.grad.data()[k * stride..(k + 1) * stride]);
    }
    Ok(LossGrad {
        value: inner.value,
        grad,
    })
}

/// Value of the discriminator objective and its gradients with respect to
/// the real and fake scores.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

fn clamp_score(s: f64) -> (f64, bool) {
    let c = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    (c, c == s)
}

/// `−[mean log D(real) + mean log(1 − D(fake))]`.
pub fn discriminator_objective(real: &[f64], fake: &[f64]) -> Result<DiscriminatorLoss> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch("discriminator"));
    }
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let mut value = 0.0;
    let grad_real = real
        .iter()
        .map(|&s| {
            let (c, inside) = clamp_score(s);
            value -= c.ln() / nr;
            if inside {
                -1.0 / (nr * c)
            } else {
                0.0
            }
        })
        .collect();
    let grad_fake = fake
        .iter()
        .map(|&s| {
            let (c, inside) = clamp_score(s);
            value -= (1.0 - c).ln() / nf;
            if inside {
                1.0 / (nf * (1.0 - c))
            } else {
                0.0
            }
        })
        .collect();
    Ok(DiscriminatorLoss {
        value,
        grad_real,
        grad_fake,
    })
}

/// Discriminator objective evaluated through a critic.
pub fn loss_discriminator(
    disc: &impl Critic,
    labeled: (&Tensor, &Tensor),
    unlabeled: (&Tensor, &Tensor),
) -> Result<f64> {
    let (real, _) = disc.critique(labeled.0, labeled.1)?;
    let (fake, _) = disc.critique(unlabeled.0, unlabeled.1)?;
    Ok(discriminator_objective(&real, &fake)?.value)
}

/// Standard adversarial generator term `−mean log D(fake)`, gradient w.r.t. the scores.
pub fn standard_gan_generator(fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    if fake.is_empty() {
        return Err(Error::EmptyBatch("generator adversarial"));
    }
    let n = fake.len() as f64;
    let mut value = 0.0;
    let grad = fake
        .iter()
        .map(|&s| {
            let (c, inside) = clamp_score(s);
            value -= c.ln() / n;
            if inside {
                -1.0 / (n * c)
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, grad))
}
