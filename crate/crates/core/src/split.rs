use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Deterministic labeled / weak / unlabeled partition of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub weak_ids: Vec<String>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitPlan {
    pub fn total(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len() + self.weak_ids.len()
    }
}

/// Sample `round(ratio·N)` (at least one) labeled ids and `round(weak_fraction·N)`
/// weak ids; everything else is unlabeled. Each list keeps dataset order.
pub fn make_split(
    dataset_ids: &[String],
    ratio: f64,
    seed: u64,
    weak_fraction: f64,
) -> Result<SplitPlan> {
    if dataset_ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    if !(0.0..=1.0 - ratio + 1e-12).contains(&weak_fraction) {
        return Err(Error::InvalidWeakFraction {
            weak: weak_fraction,
            ratio,
        });
    }
    let n = dataset_ids.len();
    let n_labeled = ((ratio * n as f64).round() as usize).clamp(1, n);
    let n_weak = ((weak_fraction * n as f64).round() as usize).min(n - n_labeled);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    // 0 = labeled, 1 = weak, 2 = unlabeled
    let mut role = vec![2u8; n];
    for (rank, &i) in order.iter().enumerate() {
        role[i] = if rank < n_labeled {
            0
        } else if rank < n_labeled + n_weak {
            1
        } else {
            2
        };
    }
    let pick = |r: u8| -> Vec<String> {
        dataset_ids
            .iter()
            .zip(&role)
            .filter(|(_, &x)| x == r)
            .map(|(id, _)| id.clone())
            .collect()
    };
    Ok(SplitPlan {
        labeled_ids: pick(0),
        weak_ids: pick(1),
        unlabeled_ids: pick(2),
        ratio,
        seed,
    })
}

/// Parse `"a/b"` or a decimal into a ratio.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad ratio {s}")))?;
            let b: f64 = b
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad ratio {s}")))?;
            a / b
        }
        None => s
            .parse()
            .map_err(|_| Error::Invalid(format!("bad ratio {s}")))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Invalid(format!("bad ratio {s}")))
    }
}
