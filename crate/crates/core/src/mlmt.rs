//! Multi-label mean teacher: a student classifier trained on image-level
//! labels plus a consistency term against a teacher whose weights are an
//! exponential moving average of the student's.

use semiseg_nn::{Adam, Conv2d, ConvSpec, Graph, ParamSet, Tensor, Var};

use crate::augment::{perturb, AugmentConfig};
use crate::error::{Error, Result};
use crate::hparams::HyperParams;
use crate::rng::{stream_rng, Stream};
use crate::s4gan::PROB_FLOOR;
use crate::sample::{images_to_tensor, ClassVector, ImageTensor};
use crate::schedule::poly_lr;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
}

/// Strided convolution stack ending in one evidence map per class; each
/// map is reduced by its spatial maximum and passed through a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ParamSet,
    convs: [Conv2d; 4],
    head: Conv2d,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.num_classes == 0
            || config.base_width == 0
            || config.height < 8
            || config.width < 8
        {
            return Err(Error::Architecture(format!(
                "invalid classifier config {config:?}"
            )));
        }
        let mut rng = stream_rng(seed, Stream::Init, 2);
        let mut p = ParamSet::new();
        let w = config.base_width;
        let down = ConvSpec::new(2, 1);
        let chans = [
            (3, w, down),
            (w, 2 * w, down),
            (2 * w, 4 * w, down),
            (4 * w, 4 * w, ConvSpec::new(1, 1)),
        ];
        let convs = std::array::from_fn(|i| {
            let (i_c, o_c, spec) = chans[i];
            Conv2d::new(
                &mut p,
                &format!("conv{}", i + 1),
                i_c,
                o_c,
                3,
                spec,
                &mut rng,
            )
        });
        let head = Conv2d::new(
            &mut p,
            "head",
            4 * w,
            config.num_classes,
            1,
            ConvSpec::new(1, 0),
            &mut rng,
        );
        Ok(Self {
            config,
            params: p,
            convs,
            head,
        })
    }

    pub fn from_params(config: ClassifierConfig, params: ParamSet) -> Result<Self> {
        let mut c = Self::new(config, 0)?;
        if !c.params.same_layout(&params) {
            return Err(Error::Architecture(
                "classifier parameters do not match config".into(),
            ));
        }
        c.params = params;
        Ok(c)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `images [N,3,H,W]` → class probabilities `[N,C]`.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], images: Var) -> Result<Var> {
        let shape = g.value(images).shape();
        if shape.len() != 4 || shape[1..] != [3, self.config.height, self.config.width] {
            return Err(Error::Shape {
                what: "classifier input",
                expected: vec![0, 3, self.config.height, self.config.width],
                got: shape.to_vec(),
            });
        }
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(g, vars, x)?;
            x = g.leaky_relu(x, 0.1);
        }
        let maps = self.head.forward(g, vars, x)?;
        let logits = g.global_max_pool(maps)?;
        Ok(g.sigmoid(logits))
    }

    pub fn classify_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let x = g.input(images.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    /// Independent presence probabilities for one image.
    pub fn classify(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self
            .classify_batch(&images_to_tensor(&[image])?)?
            .into_data())
    }
}

/// `teacher ← decay·teacher + (1 − decay)·student`, parameter by parameter.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::HyperParam {
            name: "ema_decay",
            reason: format!("{decay} is outside [0, 1]"),
        });
    }
    if !teacher.same_layout(student) {
        return Err(Error::Architecture(
            "teacher and student layouts differ".into(),
        ));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

/// Form of the supervised classification term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CceForm {
    /// `−Σ_c z_c log p_c`: only present classes contribute.
    PositiveOnly,
    /// `−Σ_c [z_c log p_c + (1 − z_c) log(1 − p_c)]`.
    #[default]
    Binary,
}

/// Terms of the classifier objective for one sample, and the gradient of
/// `total` with respect to the student probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmtLoss {
    pub total: f64,
    pub cce: f64,
    pub cons: f64,
    pub grad: Vec<f64>,
}

pub fn loss_mlmt(
    student: &[f64],
    teacher: &[f64],
    labels: Option<&[f64]>,
    lambda_cons: f64,
    form: CceForm,
) -> Result<MlmtLoss> {
    let c = student.len();
    let check = |n: usize, what: &'static str| {
        if n == c {
            Ok(())
        } else {
            Err(Error::Shape {
                what,
                expected: vec![c],
                got: vec![n],
            })
        }
    };
    check(teacher.len(), "teacher output")?;
    if c == 0 {
        return Err(Error::EmptyBatch("class probabilities"));
    }
    let mut grad = vec![0.0; c];
    let mut cce = 0.0;
    if let Some(z) = labels {
        check(z.len(), "class labels")?;
        for k in 0..c {
            let p = student[k];
            if p >= PROB_FLOOR {
                cce -= z[k] * p.ln();
                grad[k] -= z[k] / p;
            } else {
                cce -= z[k] * PROB_FLOOR.ln();
            }
            if form == CceForm::Binary {
                let q = 1.0 - p;
                if q >= PROB_FLOOR {
                    cce -= (1.0 - z[k]) * q.ln();
                    grad[k] += (1.0 - z[k]) / q;
                } else {
                    cce -= (1.0 - z[k]) * PROB_FLOOR.ln();
                }
            }
        }
    }
    let mut cons = 0.0;
    for k in 0..c {
        let d = student[k] - teacher[k];
        cons += d * d;
        grad[k] += lambda_cons * 2.0 * d / c as f64;
    }
    cons /= c as f64;
    Ok(MlmtLoss {
        total: cce + lambda_cons * cons,
        cce,
        cons,
        grad,
    })
}

/// One image for the classifier branch; `labels` is present for labeled and
/// weakly labeled samples.
#[derive(Clone, Copy, Debug)]
pub struct MlmtInput<'a> {
    pub image: &'a ImageTensor,
    pub labels: Option<&'a ClassVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmtSettings {
    pub lr: f64,
    pub max_iter: usize,
    pub cce_form: CceForm,
    pub augment: AugmentConfig,
    pub adam_betas: (f64, f64),
}

impl Default for MlmtSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_iter: 35_000,
            cce_form: CceForm::Binary,
            augment: AugmentConfig::default(),
            adam_betas: (0.9, 0.99),
        }
    }
}

/// Batch means of the objective terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MlmtLosses {
    pub total: f64,
    pub cce: f64,
    pub cons: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct MlmtBranch {
    pub student: Classifier,
    pub teacher: Classifier,
    pub opt: Adam,
    pub hparams: HyperParams,
    pub settings: MlmtSettings,
}

impl MlmtBranch {
    /// Student and teacher start from the same weights.
    pub fn new(
        config: ClassifierConfig,
        hparams: HyperParams,
        settings: MlmtSettings,
    ) -> Result<Self> {
        hparams.validate()?;
        if !(settings.lr.is_finite() && settings.lr > 0.0) || settings.max_iter == 0 {
            return Err(Error::HyperParam {
                name: "lr_cls",
                reason: "learning rate and iteration budget must be positive".into(),
            });
        }
        let student = Classifier::new(config, hparams.seed)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            opt: Adam::new(settings.adam_betas.0, settings.adam_betas.1),
            hparams,
            settings,
        })
    }

    /// Student sees one perturbed view, teacher another; gradient step on the
    /// student, then the teacher follows by EMA. Labels get the background
    /// class forced present.
    pub fn train_step(&mut self, batch: &[MlmtInput<'_>], iter: usize) -> Result<MlmtLosses> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("classifier"));
        }
        let lr = poly_lr(
            self.settings.lr,
            iter,
            self.settings.max_iter,
            self.hparams.pow,
        )?;
        let mut rng = stream_rng(self.hparams.seed, Stream::MlmtAugment, iter as u64);
        let (view_a, view_b): (Vec<ImageTensor>, Vec<ImageTensor>) = batch
            .iter()
            .map(|s| {
                let a = perturb(s.image, &self.settings.augment, &mut rng);
                let b = perturb(s.image, &self.settings.augment, &mut rng);
                (a, b)
            })
            .unzip();
        let xa = images_to_tensor(&view_a.iter().collect::<Vec<_>>())?;
        let xb = images_to_tensor(&view_b.iter().collect::<Vec<_>>())?;
        let teacher_out = self.teacher.classify_batch(&xb)?;

        let mut g = Graph::new();
        let vars = self.student.params().bind(&mut g);
        let x = g.input(xa);
        let probs = self.student.forward(&mut g, &vars, x)?;
        let c = self.student.config().num_classes;
        let n = batch.len() as f64;
        let student_out = g.value(probs).data().to_vec();
        let mut seed = vec![0.0; student_out.len()];
        let mut out = MlmtLosses {
            lr,
            ..Default::default()
        };
        for (i, s) in batch.iter().enumerate() {
            let z = s.labels.map(|v| v.with_background().as_f64());
            let row = i * c..(i + 1) * c;
            let l = loss_mlmt(
                &student_out[row.clone()],
                &teacher_out.data()[row.clone()],
                z.as_deref(),
                self.hparams.lambda_cons,
                self.settings.cce_form,
            )?;
            out.total += l.total / n;
            out.cce += l.cce / n;
            out.cons += l.cons / n;
            for (d, gk) in seed[row].iter_mut().zip(&l.grad) {
                *d = gk / n;
            }
        }
        if !out.total.is_finite() {
            return Err(Error::NonFinite {
                term: "loss_mlmt",
                iter,
            });
        }
        let grads = g.backward(&[(probs, Tensor::new(vec![batch.len(), c], seed)?)])?;
        let grads = self.student.params().collect_grads(&grads, &vars);
        self.opt.step(self.student.params_mut(), &grads, lr)?;
        ema_update(
            self.teacher.params_mut(),
            self.student.params(),
            self.hparams.ema_decay,
        )?;
        Ok(out)
    }
}
