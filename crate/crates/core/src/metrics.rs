//! Confusion-matrix mIoU, ROC analysis and discriminator score traces.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::LabelMask;

/// `counts[i][j]` = pixels with ground truth `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Row-major `C × C` counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Shape {
                what: "confusion counts",
                expected: vec![num_classes, num_classes],
                got: vec![counts.len()],
            });
        }
        Ok(Self {
            num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction; pixels whose ground truth equals `ignore`
    /// are skipped.
    pub fn update(
        &mut self,
        pred: &LabelMask,
        truth: &LabelMask,
        ignore: Option<u8>,
    ) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape {
                what: "confusion update",
                expected: vec![truth.height(), truth.width()],
                got: vec![pred.height(), pred.width()],
            });
        }
        let c = self.num_classes;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if Some(t) == ignore {
                continue;
            }
            for class in [p, t] {
                if class as usize >= c {
                    return Err(Error::ClassOutOfRange {
                        class: class as usize,
                        num_classes: c,
                    });
                }
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape {
                what: "confusion merge",
                expected: vec![self.num_classes],
                got: vec![other.num_classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes with an empty union.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let inter = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = row + col - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that occur in the prediction or the ground truth.
    /// Summed in exact rational arithmetic while it fits, so the result is
    /// the correctly rounded mean.
    pub fn miou(&self) -> Result<f64> {
        let c = self.num_classes;
        let mut fracs = Vec::new();
        for k in 0..c {
            let inter = self.get(k, k);
            let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
            let union = row + col - inter;
            if union > 0 {
                fracs.push((inter as u128, union as u128));
            }
        }
        if fracs.is_empty() {
            return Err(Error::Invalid("mIoU of an empty confusion matrix".into()));
        }
        let n = fracs.len() as u128;
        let exact = fracs.iter().try_fold((0u128, 1u128), |(a, b), &(p, q)| {
            let num = a.checked_mul(q)?.checked_add(p.checked_mul(b)?)?;
            let den = b.checked_mul(q)?;
            let g = gcd(num, den);
            Some((num / g, den / g))
        });
        if let Some((num, den)) = exact.and_then(|(a, b)| Some((a, b.checked_mul(n)?))) {
            let g = gcd(num, den);
            let (num, den) = (num / g, den / g);
            if num < 1 << 53 && den < 1 << 53 {
                return Ok(num as f64 / den as f64);
            }
        }
        Ok(fracs.iter().map(|&(p, q)| p as f64 / q as f64).sum::<f64>() / n as f64)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// ROC points of the binary problem obtained by flattening all
/// `(sample, class)` pairs, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[(Vec<f64>, Vec<u8>)]) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for (p, z) in scores {
        if p.len() != z.len() {
            return Err(Error::Shape {
                what: "roc sample",
                expected: vec![z.len()],
                got: vec![p.len()],
            });
        }
        pairs.extend(p.iter().copied().zip(z.iter().map(|&b| b != 0)));
    }
    let pos = pairs.iter().filter(|(_, y)| *y).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid(format!(
            "roc needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a curve ordered by false-positive rate.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub const TRACE_WINDOW: usize = 100;

/// Completed window of discriminator scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Window index: iterations `[w·len, (w+1)·len)`.
    pub window: usize,
    pub mean_real: Option<f64>,
    pub mean_fake: Option<f64>,
}

impl TraceRow {
    pub fn gap(&self) -> Option<f64> {
        Some((self.mean_real? - self.mean_fake?).abs())
    }
}

/// Windowed means of discriminator scores on real and generated inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    window_len: usize,
    current: Option<usize>,
    real: (f64, usize),
    fake: (f64, usize),
    rows: Vec<TraceRow>,
}

impl Default for ScoreTrace {
    fn default() -> Self {
        Self::new(TRACE_WINDOW)
    }
}

impl ScoreTrace {
    pub fn new(window_len: usize) -> Self {
        Self {
            window_len: window_len.max(1),
            current: None,
            real: (0.0, 0),
            fake: (0.0, 0),
            rows: Vec::new(),
        }
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Record one score. A window is emitted once the last iteration in it
    /// has been recorded and a later iteration arrives, or on [`flush`](Self::flush).
    pub fn record(&mut self, iter: usize, score: f64, is_real: bool) {
        let w = iter / self.window_len;
        if self.current.is_some_and(|c| c != w) {
            self.flush();
        }
        self.current = Some(w);
        let acc = if is_real {
            &mut self.real
        } else {
            &mut self.fake
        };
        acc.0 += score;
        acc.1 += 1;
    }

    /// Emit the window in progress, complete or not.
    pub fn flush(&mut self) {
        let Some(window) = self.current.take() else {
            return;
        };
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        self.rows.push(TraceRow {
            window,
            mean_real: mean(self.real),
            mean_fake: mean(self.fake),
        });
        self.real = (0.0, 0);
        self.fake = (0.0, 0);
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    /// Lossless text encoding (floats as IEEE bit patterns) for checkpoints.
    pub fn to_state(&self) -> String {
        let bits = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:016x}", x.to_bits()));
        let mut s = format!(
            "{} {} {} {} {} {}\n",
            self.window_len,
            self.current.map_or("-".to_string(), |c| c.to_string()),
            bits(Some(self.real.0)),
            self.real.1,
            bits(Some(self.fake.0)),
            self.fake.1
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{} {} {}",
                r.window,
                bits(r.mean_real),
                bits(r.mean_fake)
            );
        }
        s
    }

    pub fn from_state(text: &str) -> Result<Self> {
        let bad = || Error::Invalid("malformed score trace state".into());
        let float = |t: &str| -> Result<Option<f64>> {
            if t == "-" {
                return Ok(None);
            }
            u64::from_str_radix(t, 16)
                .map(|b| Some(f64::from_bits(b)))
                .map_err(|_| bad())
        };
        let int = |t: &str| t.parse::<usize>().map_err(|_| bad());
        let mut lines = text.lines();
        let head: Vec<&str> = lines.next().ok_or_else(bad)?.split(' ').collect();
        if head.len() != 6 {
            return Err(bad());
        }
        let mut trace = Self::new(int(head[0])?);
        trace.current = if head[1] == "-" {
            None
        } else {
            Some(int(head[1])?)
        };
        trace.real = (float(head[2])?.ok_or_else(bad)?, int(head[3])?);
        trace.fake = (float(head[4])?.ok_or_else(bad)?, int(head[5])?);
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            trace.rows.push(TraceRow {
                window: int(f[0])?,
                mean_real: float(f[1])?,
                mean_fake: float(f[2])?,
            });
        }
        Ok(trace)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("window,iter_start,mean_real,mean_fake\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.window,
                r.window * self.window_len,
                opt(r.mean_real),
                opt(r.mean_fake)
            );
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str =
    "iter,lr,loss_ce,loss_fm,loss_st,loss_d,loss_cce,loss_cons,d_real_mean,d_fake_mean,miou_val";

/// One row of the training log. Missing values are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_ce: Option<f64>,
    pub loss_fm: Option<f64>,
    pub loss_st: Option<f64>,
    pub loss_d: Option<f64>,
    pub loss_cce: Option<f64>,
    pub loss_cons: Option<f64>,
    pub d_real_mean: Option<f64>,
    pub d_fake_mean: Option<f64>,
    pub miou_val: Option<f64>,
}

impl MetricRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.lr,
            opt(self.loss_ce),
            opt(self.loss_fm),
            opt(self.loss_st),
            opt(self.loss_d),
            opt(self.loss_cce),
            opt(self.loss_cons),
            opt(self.d_real_mean),
            opt(self.d_fake_mean),
            opt(self.miou_val)
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 11 {
            return Err(Error::Invalid(format!(
                "metrics row has {} fields: {line}",
                f.len()
            )));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Invalid(format!("bad number {s:?} in metrics row")))
            }
        };
        Ok(Self {
            iter: f[0]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad iteration {:?}", f[0])))?,
            lr: num(f[1])?.unwrap_or(0.0),
            loss_ce: num(f[2])?,
            loss_fm: num(f[3])?,
            loss_st: num(f[4])?,
            loss_d: num(f[5])?,
            loss_cce: num(f[6])?,
            loss_cons: num(f[7])?,
            d_real_mean: num(f[8])?,
            d_fake_mean: num(f[9])?,
            miou_val: num(f[10])?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_miou() {
        // class 0: inter 2, union 4; class 1: inter 1, union 3
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 1]).unwrap();
        assert_eq!(cm.miou().unwrap(), 5.0 / 12.0);
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = LabelMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&gt, &gt, None).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        let inv = LabelMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&inv, &gt, None).unwrap();
        assert_eq!(cm.miou().unwrap(), 0.0);
    }

    #[test]
    fn ignored_pixels_and_unseen_classes() {
        let gt = LabelMask::new(1, 3, vec![255, 255, 255]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&gt, &gt, Some(255)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err());
        let gt = LabelMask::new(1, 2, vec![0, 0]).unwrap();
        cm.update(&gt, &gt, None).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);
        let bad = LabelMask::new(1, 2, vec![0, 7]).unwrap();
        assert!(cm.update(&bad, &gt, None).is_err());
    }

    #[test]
    fn roc_extremes() {
        let sep = vec![(vec![0.9, 0.1], vec![1, 0]), (vec![0.8, 0.3], vec![1, 0])];
        let pts = roc_curve(&sep).unwrap();
        assert!(pts.contains(&(0.0, 1.0)));
        assert_eq!(auc(&pts), 1.0);
        let flipped: Vec<_> = sep
            .iter()
            .map(|(p, z)| (p.iter().map(|v| -v).collect(), z.clone()))
            .collect();
        assert_eq!(auc(&roc_curve(&flipped).unwrap()), 0.0);
        assert!(roc_curve(&[(vec![0.5], vec![1])]).is_err());
    }

    #[test]
    fn trace_windows() {
        let mut t = ScoreTrace::default();
        for i in 0..100 {
            t.record(i, 0.7, true);
            t.record(i, if i % 2 == 0 { 0.4 } else { 0.6 }, false);
        }
        assert!(t.rows().is_empty());
        t.record(100, 0.1, true);
        let r = &t.rows()[0];
        assert_eq!(r.window, 0);
        assert!((r.mean_real.unwrap() - 0.7).abs() < 1e-12);
        assert!((r.mean_fake.unwrap() - 0.5).abs() < 1e-12);
        let restored = ScoreTrace::from_state(&t.to_state()).unwrap();
        assert_eq!(restored, t);
        t.flush();
        assert_eq!(t.rows()[1].mean_fake, None);
    }

    #[test]
    fn metric_row_round_trip() {
        let r = MetricRecord {
            iter: 3,
            lr: 0.01,
            loss_ce: Some(1.25),
            miou_val: Some(0.5),
            ..Default::default()
        };
        let line = r.to_csv_row();
        assert_eq!(line, "3,0.01,1.25,,,,,,,,0.5");
        assert_eq!(MetricRecord::from_csv_row(&line).unwrap(), r);
        assert_eq!(METRICS_HEADER.split(',').count(), 11);
    }
}
