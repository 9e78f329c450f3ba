//! Scalar-loop reference implementations and the checks built on them.
//! Shared between this crate's integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg_core::fusion::{fuse, fuse_pixel_threshold, PixelThresholds};
use semiseg_core::metrics::ConfusionMatrix;
use semiseg_core::mlmt::{
    loss_mlmt, CceForm, ClassifierConfig, MlmtBranch, MlmtInput, MlmtSettings,
};
use semiseg_core::s4gan::{
    discriminator_objective, feature_matching, loss_ce, loss_discriminator, loss_fm, loss_st,
    make_pseudo_labels, Critic, DiscriminatorConfig, FmNorm, GeneratorConfig, LabeledPair,
    PseudoLabel, S4GanBranch, S4GanLosses, S4GanSettings,
};
use semiseg_core::synth::{generate_samples, SceneSpec};
use semiseg_core::{HyperParams, LabelMask, SegmentationSample};
use semiseg_nn::{sigmoid, Conv2d, ConvSpec, Graph, Linear, ParamSet, Tensor, Var};

/// `Ok(summary)` or `Err(what went wrong)`.
pub type Outcome = Result<String, String>;

const FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn at(shape: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

/// Per-pixel distributions over `c` classes, every entry at least ~1e-3.
pub fn random_probs(n: usize, c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let shape = [n, c, h, w];
    let mut d = vec![0.0; n * c * h * w];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
                let z: f64 = raw.iter().sum();
                for (k, r) in raw.iter().enumerate() {
                    d[at(&shape, i, k, y, x)] = r / z;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), d).unwrap()
}

pub fn random_mask(h: usize, w: usize, c: usize, rng: &mut impl Rng) -> LabelMask {
    LabelMask::new(
        h,
        w,
        (0..h * w).map(|_| rng.random_range(0..c) as u8).collect(),
    )
    .unwrap()
}

pub fn random_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- oracles

pub fn oracle_ce(pred: &Tensor, masks: &[&LabelMask]) -> f64 {
    let s = pred.shape();
    let mut sum = 0.0;
    let mut count = 0.0;
    for (i, m) in masks.iter().enumerate() {
        for y in 0..s[2] {
            for x in 0..s[3] {
                let p = pred.data()[at(s, i, m.get(y, x) as usize, y, x)];
                sum += -(p.max(FLOOR)).ln();
                count += 1.0;
            }
        }
    }
    sum / count
}

/// Lowest class index among the maxima.
pub fn oracle_argmax(pred: &Tensor, i: usize, y: usize, x: usize) -> usize {
    let s = pred.shape();
    let mut best = 0;
    for c in 1..s[1] {
        if pred.data()[at(s, i, c, y, x)] > pred.data()[at(s, i, best, y, x)] {
            best = c;
        }
    }
    best
}

/// Mean over admitted samples of the per-sample pixel-mean cross-entropy
/// against the sample's own argmax.
pub fn oracle_st(pred: &Tensor, scores: &[f64], gamma: f64) -> f64 {
    let s = pred.shape();
    let mut per_sample = Vec::new();
    for (i, &score) in scores.iter().enumerate() {
        if score < gamma {
            continue;
        }
        let mut sum = 0.0;
        for y in 0..s[2] {
            for x in 0..s[3] {
                let k = oracle_argmax(pred, i, y, x);
                sum -= pred.data()[at(s, i, k, y, x)].max(FLOOR).ln();
            }
        }
        per_sample.push(sum / (s[2] * s[3]) as f64);
    }
    if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    }
}

pub fn oracle_mlmt(
    student: &[f64],
    teacher: &[f64],
    labels: Option<&[f64]>,
    lambda: f64,
    binary: bool,
) -> (f64, f64, f64) {
    let c = student.len();
    let mut cce = 0.0;
    if let Some(z) = labels {
        for k in 0..c {
            cce -= z[k] * student[k].max(FLOOR).ln();
            if binary {
                cce -= (1.0 - z[k]) * (1.0 - student[k]).max(FLOOR).ln();
            }
        }
    }
    let mut cons = 0.0;
    for k in 0..c {
        cons += (student[k] - teacher[k]).powi(2);
    }
    cons /= c as f64;
    (cce + lambda * cons, cce, cons)
}

pub fn oracle_discriminator(real: &[f64], fake: &[f64]) -> f64 {
    let mut a = 0.0;
    for &r in real {
        a += r.ln();
    }
    let mut b = 0.0;
    for &f in fake {
        b += (1.0 - f).ln();
    }
    -(a / real.len() as f64 + b / fake.len() as f64)
}

pub fn oracle_fuse(seg: &Tensor, probs: &[f64], tau: f64) -> Vec<f64> {
    let s = seg.shape();
    let hw = s[1] * s[2];
    let mut out = seg.data().to_vec();
    for c in 1..s[0] {
        if probs[c] <= tau {
            for p in 0..hw {
                out[c * hw + p] = 0.0;
            }
        }
    }
    out
}

pub fn oracle_pixel_threshold(seg: &Tensor, thresholds: &[usize]) -> Vec<f64> {
    let s = seg.shape();
    let hw = s[1] * s[2];
    let mut counts = vec![0usize; s[0]];
    for p in 0..hw {
        let mut best = 0;
        for c in 1..s[0] {
            if seg.data()[c * hw + p] > seg.data()[best * hw + p] {
                best = c;
            }
        }
        counts[best] += 1;
    }
    let mut out = seg.data().to_vec();
    for c in 1..s[0] {
        if counts[c] < thresholds[c] {
            for p in 0..hw {
                out[c * hw + p] = 0.0;
            }
        }
    }
    out
}

pub fn oracle_miou(pred: &LabelMask, truth: &LabelMask, c: usize) -> f64 {
    let mut ious = Vec::new();
    for k in 0..c as u8 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            inter += (p == k && t == k) as usize;
            union += (p == k || t == k) as usize;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

// ----------------------------------------------------------------- stubs

/// Features are the flattened segmentation input; scores are the sigmoid of
/// their sum.
pub struct StubCritic;

impl Critic for StubCritic {
    fn critique(&self, seg: &Tensor, _image: &Tensor) -> semiseg_core::Result<(Vec<f64>, Tensor)> {
        let n = seg.shape()[0];
        let f = seg.numel() / n;
        let feats = Tensor::new(vec![n, f], seg.data().to_vec())?;
        let scores = seg
            .data()
            .chunks(f)
            .map(|r| sigmoid(r.iter().sum()))
            .collect();
        Ok((scores, feats))
    }
}

fn features(rows: &[&[f64]]) -> Tensor {
    let f = rows[0].len();
    Tensor::new(vec![rows.len(), f, 1, 1], rows.concat()).unwrap()
}

// ---------------------------------------------------------------- checks

fn worst(errs: impl IntoIterator<Item = f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

pub fn check_ce_exact() -> Outcome {
    let mut r = rng(11);
    let mut e = Vec::new();
    for _ in 0..20 {
        let (n, c, h, w) = (
            r.random_range(1..4),
            r.random_range(2..6),
            r.random_range(1..7),
            r.random_range(1..7),
        );
        let pred = random_probs(n, c, h, w, &mut r);
        let masks: Vec<LabelMask> = (0..n).map(|_| random_mask(h, w, c, &mut r)).collect();
        let refs: Vec<&LabelMask> = masks.iter().collect();
        e.push(rel_err(
            loss_ce(&pred, &refs).unwrap().value,
            oracle_ce(&pred, &refs),
        ));
    }
    verdict("loss_ce", worst(e), 1e-6)
}

pub fn check_st_exact() -> Outcome {
    let mut r = rng(12);
    let mut e = Vec::new();
    for _ in 0..20 {
        let (n, c, h, w) = (
            r.random_range(1..5),
            r.random_range(2..6),
            r.random_range(1..7),
            r.random_range(1..7),
        );
        let pred = random_probs(n, c, h, w, &mut r);
        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let gamma = r.random_range(0.0..1.0);
        let pseudo: Vec<Option<PseudoLabel>> = (0..n)
            .map(|i| make_pseudo_labels(&pred.index(i).unwrap(), scores[i], gamma).unwrap())
            .collect();
        let got = loss_st(&pred, &pseudo).unwrap().value;
        let want = oracle_st(&pred, &scores, gamma);
        e.push(if want == 0.0 {
            got.abs()
        } else {
            rel_err(got, want)
        });
    }
    verdict("loss_st", worst(e), 1e-6)
}

pub fn check_mlmt_exact() -> Outcome {
    let mut r = rng(13);
    let mut e = Vec::new();
    for t in 0..20 {
        let c = r.random_range(2..8);
        let s: Vec<f64> = (0..c).map(|_| r.random_range(0.01..0.99)).collect();
        let th: Vec<f64> = (0..c).map(|_| r.random_range(0.01..0.99)).collect();
        let z: Vec<f64> = (0..c).map(|_| r.random_range(0..2) as f64).collect();
        let lambda = r.random_range(0.0..2.0);
        let labels = (t % 3 != 0).then_some(z.as_slice());
        for (form, binary) in [(CceForm::PositiveOnly, false), (CceForm::Binary, true)] {
            let got = loss_mlmt(&s, &th, labels, lambda, form).unwrap();
            let (total, cce, cons) = oracle_mlmt(&s, &th, labels, lambda, binary);
            e.push(rel_err(got.total, total));
            e.push(rel_err(got.cce, cce));
            e.push(rel_err(got.cons, cons));
        }
    }
    verdict("loss_mlmt", worst(e), 1e-6)
}

pub fn check_discriminator_exact() -> Outcome {
    let mut r = rng(14);
    let mut e = Vec::new();
    for _ in 0..20 {
        let real: Vec<f64> = (0..r.random_range(1..9))
            .map(|_| r.random_range(0.01..0.99))
            .collect();
        let fake: Vec<f64> = (0..r.random_range(1..9))
            .map(|_| r.random_range(0.01..0.99))
            .collect();
        e.push(rel_err(
            discriminator_objective(&real, &fake).unwrap().value,
            oracle_discriminator(&real, &fake),
        ));
        // the same objective through a critic
        let (c, h, w) = (r.random_range(2..4), 2, 2);
        let seg_l = random_tensor(vec![real.len(), c, h, w], -0.5, 0.5, &mut r);
        let seg_u = random_tensor(vec![fake.len(), c, h, w], -0.5, 0.5, &mut r);
        let img_l = Tensor::zeros(vec![real.len(), 3, h, w]);
        let img_u = Tensor::zeros(vec![fake.len(), 3, h, w]);
        let sr = StubCritic.critique(&seg_l, &img_l).unwrap().0;
        let sf = StubCritic.critique(&seg_u, &img_u).unwrap().0;
        let got = loss_discriminator(&StubCritic, (&seg_l, &img_l), (&seg_u, &img_u)).unwrap();
        e.push(rel_err(got, oracle_discriminator(&sr, &sf)));
    }
    verdict("loss_discriminator", worst(e), 1e-6)
}

/// Hand-computed: real feature means (2, 3), fake means (0.5, 1).
pub fn check_fm_hand() -> Outcome {
    let real = features(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let fake = features(&[&[0.0, 1.0], &[1.0, 1.0]]);
    let img = |n| Tensor::zeros(vec![n, 3, 1, 1]);
    let cases = [(FmNorm::L1, 1.75), (FmNorm::L2, 3.125)];
    for (norm, want) in cases {
        let got = loss_fm(&StubCritic, (&real, &img(2)), (&fake, &img(2)), norm).unwrap();
        if got != want {
            return Err(format!("loss_fm {norm:?}: {got} != {want}"));
        }
    }
    // identical batches match perfectly; a single sample against itself too
    let same = loss_fm(&StubCritic, (&real, &img(2)), (&real, &img(2)), FmNorm::L1).unwrap();
    let one = features(&[&[0.5, -0.5, 2.0]]);
    let zero = Tensor::zeros(vec![1, 3, 1, 1]);
    let single = loss_fm(&StubCritic, (&one, &img(1)), (&zero, &img(1)), FmNorm::L1).unwrap();
    if same != 0.0 || single != 1.0 {
        return Err(format!("loss_fm degenerate cases: {same}, {single}"));
    }
    Ok("loss_fm: L1 1.75, L2 3.125, identical 0, single 1".into())
}

fn verdict(what: &str, err: f64, tol: f64) -> Outcome {
    if err <= tol {
        Ok(format!("{what}: worst relative error {err:.2e}"))
    } else {
        Err(format!(
            "{what}: worst relative error {err:.2e} > {tol:.0e}"
        ))
    }
}

// ------------------------------------------------------- tiny networks

const C: usize = 3;
const HW: usize = 6;

/// Conv + softmax segmenter.
pub struct TinySeg {
    pub params: ParamSet,
    conv: Conv2d,
}

impl TinySeg {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, "seg", 3, C, 3, ConvSpec::new(1, 1), rng);
        Self { params, conv }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let logits = self.conv.forward(g, vars, x).unwrap();
        g.softmax_channels(logits).unwrap()
    }
}

/// Strided conv, leaky ReLU, average pool, linear head, sigmoid.
pub struct TinyCritic {
    pub params: ParamSet,
    conv: Conv2d,
    head: Linear,
}

impl TinyCritic {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, "d", C + 3, 4, 3, ConvSpec::new(2, 1), rng);
        let head = Linear::new(&mut params, "head", 4, 1, rng);
        Self { params, conv, head }
    }

    /// `(score [N,1], features [N,4])`.
    fn forward(&self, g: &mut Graph, vars: &[Var], seg: Var, image: Var) -> (Var, Var) {
        let x = g.concat_channels(seg, image).unwrap();
        let h = self.conv.forward(g, vars, x).unwrap();
        let h = g.leaky_relu(h, 0.2);
        let f = g.global_avg_pool(h).unwrap();
        let logit = self.head.forward(g, vars, f).unwrap();
        (g.sigmoid(logit), f)
    }
}

/// Conv, global max pool, sigmoid.
pub struct TinyClassifier {
    pub params: ParamSet,
    conv: Conv2d,
}

impl TinyClassifier {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        let conv = Conv2d::new(&mut params, "cls", 3, C, 3, ConvSpec::new(2, 1), rng);
        Self { params, conv }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let h = self.conv.forward(g, vars, x).unwrap();
        let p = g.global_max_pool(h).unwrap();
        g.sigmoid(p)
    }
}

/// Fraction of scalars whose analytic derivative matches a central
/// difference (step 1e-4) within relative tolerance 1e-3.
pub fn agreement(
    params: &ParamSet,
    loss: impl Fn(&ParamSet) -> f64,
    analytic: &[Tensor],
) -> (usize, usize) {
    let step = 1e-4;
    let mut ok = 0;
    let mut total = 0;
    let mut p = params.clone();
    for t in 0..params.len() {
        for k in 0..params.tensors()[t].numel() {
            let orig = params.tensors()[t].data()[k];
            p.tensors_mut()[t].data_mut()[k] = orig + step;
            let up = loss(&p);
            p.tensors_mut()[t].data_mut()[k] = orig - step;
            let down = loss(&p);
            p.tensors_mut()[t].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t].data()[k];
            let diff = (a - numeric).abs();
            total += 1;
            if diff <= 1e-3 * a.abs().max(numeric.abs()) || diff < 1e-9 {
                ok += 1;
            }
        }
    }
    (ok, total)
}

pub struct GradFixture {
    pub seg: TinySeg,
    pub critic: TinyCritic,
    pub cls: TinyClassifier,
    pub x_l: Tensor,
    pub x_u: Tensor,
    pub masks: Vec<LabelMask>,
}

impl GradFixture {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        Self {
            seg: TinySeg::new(&mut r),
            critic: TinyCritic::new(&mut r),
            cls: TinyClassifier::new(&mut r),
            x_l: random_tensor(vec![2, 3, HW, HW], 0.0, 1.0, &mut r),
            x_u: random_tensor(vec![3, 3, HW, HW], 0.0, 1.0, &mut r),
            masks: (0..2).map(|_| random_mask(HW, HW, C, &mut r)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.seg.params.num_scalars()
            + self.critic.params.num_scalars()
            + self.cls.params.num_scalars()
    }

    fn one_hot(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![2, C, HW, HW]);
        let s = t.shape().to_vec();
        for (i, m) in self.masks.iter().enumerate() {
            for y in 0..HW {
                for x in 0..HW {
                    let k = at(&s, i, m.get(y, x) as usize, y, x);
                    t.data_mut()[k] = 1.0;
                }
            }
        }
        t
    }

    /// Segmenter gradient of `ce` through the softmax network.
    pub fn ce(&self) -> (usize, usize) {
        let masks: Vec<&LabelMask> = self.masks.iter().collect();
        let eval = |p: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let x = g.input(self.x_l.clone());
            let probs = self.seg.forward(&mut g, &vars, x);
            let l = loss_ce(g.value(probs), &masks).unwrap();
            let grads = grad.then(|| {
                let gr = g.backward(&[(probs, l.grad.clone())]).unwrap();
                p.collect_grads(&gr, &vars)
            });
            (l.value, grads)
        };
        let analytic = eval(&self.seg.params, true).1.unwrap();
        agreement(&self.seg.params, |p| eval(p, false).0, &analytic)
    }

    /// Segmenter gradient of the feature-matching term through the frozen critic.
    pub fn fm(&self, norm: FmNorm) -> (usize, usize) {
        let real = {
            let mut g = Graph::new();
            let vars = self.critic.params.bind_frozen(&mut g);
            let s = g.input(self.one_hot());
            let i = g.input(self.x_l.clone());
            let (_, f) = self.critic.forward(&mut g, &vars, s, i);
            g.value(f).clone()
        };
        let eval = |p: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let dvars = self.critic.params.bind_frozen(&mut g);
            let x = g.input(self.x_u.clone());
            let probs = self.seg.forward(&mut g, &vars, x);
            let (_, f) = self.critic.forward(&mut g, &dvars, probs, x);
            let l = feature_matching(&real, g.value(f), norm).unwrap();
            let grads = grad.then(|| {
                let gr = g.backward(&[(f, l.grad.clone())]).unwrap();
                p.collect_grads(&gr, &vars)
            });
            (l.value, grads)
        };
        let analytic = eval(&self.seg.params, true).1.unwrap();
        agreement(&self.seg.params, |p| eval(p, false).0, &analytic)
    }

    /// Segmenter gradient of self-training; pseudo-labels are frozen at the
    /// starting weights, every other sample is admitted.
    pub fn st(&self) -> (usize, usize) {
        let base = {
            let mut g = Graph::new();
            let vars = self.seg.params.bind_frozen(&mut g);
            let x = g.input(self.x_u.clone());
            let probs = self.seg.forward(&mut g, &vars, x);
            g.value(probs).clone()
        };
        let pseudo: Vec<Option<PseudoLabel>> = (0..3)
            .map(|i| {
                make_pseudo_labels(&base.index(i).unwrap(), if i == 1 { 0.2 } else { 0.9 }, 0.6)
                    .unwrap()
            })
            .collect();
        let eval = |p: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let x = g.input(self.x_u.clone());
            let probs = self.seg.forward(&mut g, &vars, x);
            let l = loss_st(g.value(probs), &pseudo).unwrap();
            let grads = grad.then(|| {
                let gr = g.backward(&[(probs, l.grad.clone())]).unwrap();
                p.collect_grads(&gr, &vars)
            });
            (l.value, grads)
        };
        let analytic = eval(&self.seg.params, true).1.unwrap();
        agreement(&self.seg.params, |p| eval(p, false).0, &analytic)
    }

    /// Critic gradient of the discriminator objective; fake maps are constants.
    pub fn discriminator(&self) -> (usize, usize) {
        let fake = {
            let mut g = Graph::new();
            let vars = self.seg.params.bind_frozen(&mut g);
            let x = g.input(self.x_u.clone());
            let probs = self.seg.forward(&mut g, &vars, x);
            g.value(probs).clone()
        };
        let eval = |p: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let (sr, il) = (g.input(self.one_hot()), g.input(self.x_l.clone()));
            let (sf, iu) = (g.input(fake.clone()), g.input(self.x_u.clone()));
            let (real, _) = self.critic.forward(&mut g, &vars, sr, il);
            let (fake, _) = self.critic.forward(&mut g, &vars, sf, iu);
            let l = discriminator_objective(g.value(real).data(), g.value(fake).data()).unwrap();
            let grads = grad.then(|| {
                let seeds = [
                    (real, Tensor::new(vec![2, 1], l.grad_real.clone()).unwrap()),
                    (fake, Tensor::new(vec![3, 1], l.grad_fake.clone()).unwrap()),
                ];
                let gr = g.backward(&seeds).unwrap();
                p.collect_grads(&gr, &vars)
            });
            (l.value, grads)
        };
        let analytic = eval(&self.critic.params, true).1.unwrap();
        agreement(&self.critic.params, |p| eval(p, false).0, &analytic)
    }

    /// Student gradient of the classifier objective, batch mean over two
    /// labeled and three unlabeled images against fixed teacher outputs.
    pub fn mlmt(&self, form: CceForm) -> (usize, usize) {
        let x = Tensor::stack(&[
            self.x_l.index(0).unwrap(),
            self.x_l.index(1).unwrap(),
            self.x_u.index(0).unwrap(),
            self.x_u.index(1).unwrap(),
            self.x_u.index(2).unwrap(),
        ])
        .unwrap();
        let teacher = [
            0.9, 0.3, 0.6, 0.8, 0.1, 0.5, 0.7, 0.4, 0.2, 0.55, 0.45, 0.35, 0.65, 0.25, 0.75,
        ];
        let labels = [[1.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        let eval = |p: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let vars = p.bind(&mut g);
            let xi = g.input(x.clone());
            let probs = self.cls.forward(&mut g, &vars, xi);
            let out = g.value(probs).data().to_vec();
            let mut total = 0.0;
            let mut seed = vec![0.0; 5 * C];
            for i in 0..5 {
                let row = i * C..(i + 1) * C;
                let z = labels.get(i).map(|v| v.as_slice());
                let l = loss_mlmt(&out[row.clone()], &teacher[row.clone()], z, 1.0, form).unwrap();
                total += l.total / 5.0;
                for (s, gk) in seed[row].iter_mut().zip(&l.grad) {
                    *s = gk / 5.0;
                }
            }
            let grads = grad.then(|| {
                let gr = g
                    .backward(&[(probs, Tensor::new(vec![5, C], seed).unwrap())])
                    .unwrap();
                p.collect_grads(&gr, &vars)
            });
            (total, grads)
        };
        let analytic = eval(&self.cls.params, true).1.unwrap();
        agreement(&self.cls.params, |p| eval(p, false).0, &analytic)
    }
}

/// Every loss on three independent fixtures; each needs ≥ 95% agreement.
pub fn check_gradients() -> Outcome {
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for seed in 0..3 {
        let f = GradFixture::new(100 + seed);
        if f.num_params() > 500 {
            return Err(format!("fixture has {} parameters", f.num_params()));
        }
        let runs = [
            ("ce", f.ce()),
            ("fm-l1", f.fm(FmNorm::L1)),
            ("fm-l2", f.fm(FmNorm::L2)),
            ("st", f.st()),
            ("d", f.discriminator()),
            ("mlmt", f.mlmt(CceForm::Binary)),
            ("mlmt-pos", f.mlmt(CceForm::PositiveOnly)),
        ];
        for (name, (ok, total)) in runs {
            let frac = ok as f64 / total as f64;
            if seed == 0 {
                lines.push(format!("{name} {ok}/{total}"));
            }
            if frac < 0.95 {
                failed.push(format!("{name} seed {seed}: {ok}/{total}"));
            }
        }
    }
    if failed.is_empty() {
        Ok(lines.join(", "))
    } else {
        Err(failed.join("; "))
    }
}

// ---------------------------------------------------------- training runs

pub fn tiny_scenes(n: usize, seed: u64) -> Vec<SegmentationSample> {
    let spec = SceneSpec {
        height: 32,
        width: 32,
        num_classes: 3,
        seed,
        ..SceneSpec::default()
    };
    generate_samples(&spec, 0, n)
}

pub fn tiny_branch(hp: HyperParams) -> S4GanBranch {
    let gen = GeneratorConfig {
        num_classes: 3,
        height: 32,
        width: 32,
        base_width: 2,
    };
    S4GanBranch::new(
        gen,
        DiscriminatorConfig::scaled(3, 2),
        hp,
        S4GanSettings::default(),
    )
    .unwrap()
}

/// Train for `iters` steps, two labeled and two unlabeled images per step.
pub fn run_branch(hp: HyperParams, iters: usize) -> Vec<S4GanLosses> {
    let data = tiny_scenes(16, 3);
    let mut branch = tiny_branch(HyperParams {
        max_iter: iters,
        ..hp
    });
    (0..iters)
        .map(|it| {
            let lab: Vec<LabeledPair> = (0..2)
                .map(|k| {
                    let s = &data[(2 * it + k) % 4];
                    LabeledPair {
                        image: &s.image,
                        mask: s.mask.as_ref().unwrap(),
                    }
                })
                .collect();
            let unl: Vec<_> = (0..2).map(|k| &data[4 + (2 * it + k) % 12].image).collect();
            branch.train_step(&lab, &unl, it).unwrap()
        })
        .collect()
}

pub fn check_composition() -> Outcome {
    let hp = HyperParams {
        lambda_fm: 0.1,
        lambda_st: 1.0,
        gamma: 0.3,
        lr_seg: 1e-2,
        ..HyperParams::default()
    };
    let log = run_branch(hp.clone(), 200);
    let worst = log
        .iter()
        .map(|l| (l.total - (l.ce + hp.lambda_fm * l.fm + hp.lambda_st * l.st)).abs())
        .fold(0.0, f64::max);
    let active = log.iter().filter(|l| l.st > 0.0).count();
    if worst <= 1e-6 {
        Ok(format!(
            "200 iterations, worst deviation {worst:.1e}, self-training active on {active}"
        ))
    } else {
        Err(format!("worst deviation {worst:.2e} > 1e-6"))
    }
}

pub fn check_st_gate() -> Outcome {
    let closed = run_branch(
        HyperParams {
            gamma: 1.0,
            ..HyperParams::default()
        },
        60,
    );
    if let Some((it, l)) = closed
        .iter()
        .enumerate()
        .find(|(_, l)| l.st != 0.0 || l.pseudo_labeled != 0)
    {
        return Err(format!(
            "gamma 1: iteration {it} has st {} with {} admitted",
            l.st, l.pseudo_labeled
        ));
    }
    let open = run_branch(
        HyperParams {
            gamma: 0.0,
            ..HyperParams::default()
        },
        60,
    );
    if let Some((it, l)) = open
        .iter()
        .enumerate()
        .find(|(_, l)| l.st <= 0.0 || l.pseudo_labeled != 2)
    {
        return Err(format!(
            "gamma 0: iteration {it} has st {} with {} admitted",
            l.st, l.pseudo_labeled
        ));
    }
    Ok("gamma 1: zero on 60/60 iterations; gamma 0: active on 60/60".into())
}

pub fn check_ema_replay() -> Outcome {
    let data = tiny_scenes(8, 5);
    let cfg = ClassifierConfig {
        num_classes: 3,
        height: 32,
        width: 32,
        base_width: 2,
    };
    let hp = HyperParams {
        ema_decay: 0.95,
        ..HyperParams::default()
    };
    let settings = MlmtSettings {
        max_iter: 50,
        ..MlmtSettings::default()
    };
    let mut branch = MlmtBranch::new(cfg, hp.clone(), settings).unwrap();
    let mut teacher = branch.student.params().flatten();
    let labels: Vec<_> = data.iter().map(|s| s.class_vector.clone()).collect();
    let mut worst = 0.0f64;
    for it in 0..50 {
        let batch: Vec<MlmtInput> = (0..3)
            .map(|k| {
                let i = (3 * it + k) % data.len();
                MlmtInput {
                    image: &data[i].image,
                    labels: if k == 0 { labels[i].as_ref() } else { None },
                }
            })
            .collect();
        branch.train_step(&batch, it).unwrap();
        let d = hp.ema_decay;
        for (t, s) in teacher.iter_mut().zip(branch.student.params().flatten()) {
            *t = d * *t + (1.0 - d) * s;
        }
    }
    for (a, b) in teacher.iter().zip(branch.teacher.params().flatten()) {
        worst = worst.max((a - b).abs());
    }
    if worst <= 1e-10 {
        Ok(format!(
            "50 steps, {} parameters, worst deviation {worst:.1e}",
            teacher.len()
        ))
    } else {
        Err(format!("worst deviation {worst:.2e} > 1e-10"))
    }
}

pub fn check_fusion() -> Outcome {
    let mut r = rng(21);
    for case in 0..100 {
        let (c, h, w) = (
            r.random_range(2..7),
            r.random_range(1..9),
            r.random_range(1..9),
        );
        let seg = random_probs(1, c, h, w, &mut r)
            .reshape(vec![c, h, w])
            .unwrap();
        let probs: Vec<f64> = (0..c).map(|_| r.random()).collect();
        let tau = if case % 10 == 0 {
            probs[c - 1]
        } else {
            r.random()
        };
        let fused = fuse(&seg, &probs, tau).unwrap();
        if fused.data() != oracle_fuse(&seg, &probs, tau).as_slice() {
            return Err(format!("fuse differs from oracle on instance {case}"));
        }
        if fuse(&fused, &probs, tau).unwrap() != fused {
            return Err(format!("fuse not idempotent on instance {case}"));
        }
        let hw = h * w;
        if fused.data()[..hw] != seg.data()[..hw] {
            return Err(format!("fuse touched background on instance {case}"));
        }
        let thr: Vec<usize> = (0..c).map(|_| r.random_range(0..=hw)).collect();
        let global = r.random_range(0..=hw);
        let per = fuse_pixel_threshold(&seg, &PixelThresholds::PerClass(thr.clone())).unwrap();
        let glob = fuse_pixel_threshold(&seg, &PixelThresholds::Global(global)).unwrap();
        if per.data() != oracle_pixel_threshold(&seg, &thr).as_slice()
            || glob.data() != oracle_pixel_threshold(&seg, &vec![global; c]).as_slice()
        {
            return Err(format!(
                "pixel threshold differs from oracle on instance {case}"
            ));
        }
        if per.data()[..hw] != seg.data()[..hw] || glob.data()[..hw] != seg.data()[..hw] {
            return Err(format!(
                "pixel threshold touched background on instance {case}"
            ));
        }
    }
    Ok("100 instances: oracle match, idempotent, background untouched".into())
}

pub fn check_miou() -> Outcome {
    let mut r = rng(31);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (c, h, w) = (
            r.random_range(2..7),
            r.random_range(1..12),
            r.random_range(1..12),
        );
        let pred = random_mask(h, w, c, &mut r);
        let truth = random_mask(h, w, c, &mut r);
        let mut cm = ConfusionMatrix::new(c);
        cm.update(&pred, &truth, None).unwrap();
        worst = worst.max((cm.miou().unwrap() - oracle_miou(&pred, &truth, c)).abs());
    }
    let hand = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 1])
        .unwrap()
        .miou()
        .unwrap();
    if worst > 1e-12 {
        return Err(format!("worst deviation {worst:.2e} > 1e-12"));
    }
    if hand != 5.0 / 12.0 {
        return Err(format!("hand example gives {hand:?}, not 5/12"));
    }
    Ok(format!(
        "50 pairs, worst deviation {worst:.1e}; hand example exactly 5/12"
    ))
}
