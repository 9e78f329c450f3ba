use rand::Rng as _;
use semiseg_nn::{Adam, Graph, Optimizer, Sgd, Tensor};

use crate::error::{Error, Result};
use crate::hparams::HyperParams;
use crate::rng::{stream_rng, Stream};
use crate::s4gan::discriminator::{Discriminator, DiscriminatorConfig};
use crate::s4gan::generator::{Generator, GeneratorConfig};
use crate::s4gan::losses::{
    discriminator_objective, feature_matching, loss_ce, loss_st, make_pseudo_labels,
    standard_gan_generator, FmNorm, PseudoLabel, SCORE_CLAMP,
};
use crate::sample::{images_to_tensor, masks_to_one_hot, ImageTensor, LabelMask};
use crate::schedule::poly_lr;

/// Adversarial term added to the generator objective with weight `lambda_fm`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialTerm {
    #[default]
    FeatureMatching,
    StandardGan,
}

/// Optimizer for the segmentation network. The discriminator always uses Adam.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SegOptimizer {
    /// Momentum SGD with weight decay.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct S4GanSettings {
    pub seg_optimizer: SegOptimizer,
    pub adversarial: AdversarialTerm,
    pub fm_norm: FmNorm,
    /// Update the discriminator. Off for supervised-only baselines, which then
    /// skip every unlabeled forward pass.
    pub train_discriminator: bool,
    /// Random horizontal flips of both labeled and unlabeled inputs.
    pub flip: bool,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
}

impl Default for S4GanSettings {
    fn default() -> Self {
        Self {
            seg_optimizer: SegOptimizer::Sgd,
            adversarial: AdversarialTerm::FeatureMatching,
            fm_norm: FmNorm::L1,
            train_discriminator: true,
            flip: true,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            adam_betas: (0.9, 0.99),
        }
    }
}

/// Per-iteration diagnostics. `ce`, `fm` and `st` are unweighted; `total`
/// is the weighted generator objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct S4GanLosses {
    pub ce: f64,
    pub fm: f64,
    pub st: f64,
    pub total: f64,
    pub d_loss: Option<f64>,
    pub d_real_mean: Option<f64>,
    pub d_fake_mean: Option<f64>,
    /// Unlabeled samples admitted by the self-training gate.
    pub pseudo_labeled: usize,
    pub lr_seg: f64,
}

/// A labeled image with its dense annotation.
#[derive(Clone, Copy, Debug)]
pub struct LabeledPair<'a> {
    pub image: &'a ImageTensor,
    pub mask: &'a LabelMask,
}

/// Generator, discriminator and their optimizer states.
#[derive(Clone, Debug)]
pub struct S4GanBranch {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub seg_opt: Optimizer,
    pub disc_opt: Adam,
    pub hparams: HyperParams,
    pub settings: S4GanSettings,
}

fn finite(v: f64, term: &'static str, iter: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, iter })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl S4GanBranch {
    pub fn new(
        gen_config: GeneratorConfig,
        disc_config: DiscriminatorConfig,
        hparams: HyperParams,
        settings: S4GanSettings,
    ) -> Result<Self> {
        hparams.validate()?;
        if gen_config.num_classes != disc_config.num_classes {
            return Err(Error::Architecture(format!(
                "generator has {} classes but discriminator expects {}",
                gen_config.num_classes, disc_config.num_classes
            )));
        }
        let generator = Generator::new(gen_config, hparams.seed)?;
        let discriminator = Discriminator::new(disc_config, hparams.seed)?;
        Ok(Self {
            generator,
            discriminator,
            seg_opt: match settings.seg_optimizer {
                SegOptimizer::Sgd => {
                    Optimizer::Sgd(Sgd::new(settings.sgd_momentum, settings.weight_decay))
                }
                SegOptimizer::Adam => {
                    Optimizer::Adam(Adam::new(settings.adam_betas.0, settings.adam_betas.1))
                }
            },
            disc_opt: Adam::new(settings.adam_betas.0, settings.adam_betas.1),
            hparams,
            settings,
        })
    }

    fn num_classes(&self) -> usize {
        self.generator.config().num_classes
    }

    fn uses_unlabeled(&self) -> bool {
        self.settings.train_discriminator
            || self.hparams.lambda_fm > 0.0
            || self.hparams.lambda_st > 0.0
    }

    /// One optimization step at iteration `iter` (0-based): a discriminator
    /// update on detached predictions, then a generator update through the
    /// frozen, freshly updated discriminator.
    pub fn train_step(
        &mut self,
        labeled: &[LabeledPair<'_>],
        unlabeled: &[&ImageTensor],
        iter: usize,
    ) -> Result<S4GanLosses> {
        if labeled.is_empty() {
            return Err(Error::EmptyBatch("labeled"));
        }
        let use_unlabeled = self.uses_unlabeled();
        if use_unlabeled && unlabeled.is_empty() {
            return Err(Error::EmptyBatch("unlabeled"));
        }
        let hp = &self.hparams;
        let lr_seg = poly_lr(hp.lr_seg, iter, hp.max_iter, hp.pow)?;
        let lr_disc = poly_lr(hp.lr_disc, iter, hp.max_iter, hp.pow)?;
        let seed = hp.seed;
        let c = self.num_classes();

        let mut aug = stream_rng(seed, Stream::SegAugment, iter as u64);
        let mut flip = |n: usize| -> Vec<bool> {
            (0..n)
                .map(|_| self.settings.flip && aug.random_bool(0.5))
                .collect()
        };
        let flip_l = flip(labeled.len());
        let flip_u = flip(unlabeled.len());
        let (imgs_l, masks_l): (Vec<ImageTensor>, Vec<LabelMask>) = labeled
            .iter()
            .zip(&flip_l)
            .map(|(p, &f)| {
                if f {
                    (p.image.flipped(), p.mask.flipped())
                } else {
                    (p.image.clone(), p.mask.clone())
                }
            })
            .unzip();
        let imgs_u: Vec<ImageTensor> = unlabeled
            .iter()
            .zip(&flip_u)
            .map(|(i, &f)| if f { i.flipped() } else { (*i).clone() })
            .collect();
        let mask_refs: Vec<&LabelMask> = masks_l.iter().collect();
        let x_l = images_to_tensor(&imgs_l.iter().collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let gen_vars = self.generator.params().bind(&mut g);
        let xl = g.input(x_l.clone());
        let pred_l = self.generator.forward(&mut g, &gen_vars, xl)?;

        let mut out = S4GanLosses {
            lr_seg,
            ..Default::default()
        };
        let ce = loss_ce(g.value(pred_l), &mask_refs)?;
        out.ce = finite(ce.value, "loss_ce", iter)?;
        let mut seeds = vec![(pred_l, ce.grad)];

        if use_unlabeled {
            let x_u = images_to_tensor(&imgs_u.iter().collect::<Vec<_>>())?;
            let real_seg = masks_to_one_hot(&mask_refs, c)?;
            let xu = g.input(x_u.clone());
            let pred_u = self.generator.forward(&mut g, &gen_vars, xu)?;
            let mut dropout = stream_rng(seed, Stream::Dropout, iter as u64);

            if self.settings.train_discriminator {
                let mut gd = Graph::new();
                let dv = self.discriminator.params().bind(&mut gd);
                let rs = gd.input(real_seg.clone());
                let ri = gd.input(x_l.clone());
                let real = self
                    .discriminator
                    .forward(&mut gd, &dv, rs, ri, Some(&mut dropout))?;
                let fs = gd.input(g.value(pred_u).clone());
                let fi = gd.input(x_u.clone());
                let fake = self
                    .discriminator
                    .forward(&mut gd, &dv, fs, fi, Some(&mut dropout))?;
                let real_scores = gd.value(real.score).data().to_vec();
                let fake_scores = gd.value(fake.score).data().to_vec();
                let obj = discriminator_objective(&real_scores, &fake_scores)?;
                out.d_loss = Some(finite(obj.value, "loss_d", iter)?);
                out.d_real_mean = Some(mean(&real_scores));
                out.d_fake_mean = Some(mean(&fake_scores));
                let grads = gd.backward(&[
                    (
                        real.score,
                        Tensor::new(vec![real_scores.len(), 1], obj.grad_real)?,
                    ),
                    (
                        fake.score,
                        Tensor::new(vec![fake_scores.len(), 1], obj.grad_fake)?,
                    ),
                ])?;
                let grads = self.discriminator.params().collect_grads(&grads, &dv);
                self.disc_opt
                    .step(self.discriminator.params_mut(), &grads, lr_disc)?;
            }

            let dv = self.discriminator.params().bind_frozen(&mut g);
            let rs = g.input(real_seg);
            let real = self
                .discriminator
                .forward(&mut g, &dv, rs, xl, Some(&mut dropout))?;
            let fake = self
                .discriminator
                .forward(&mut g, &dv, pred_u, xu, Some(&mut dropout))?;
            let scores = g.value(fake.score).data().to_vec();

            match self.settings.adversarial {
                AdversarialTerm::FeatureMatching => {
                    let mut fm = feature_matching(
                        g.value(real.features),
                        g.value(fake.features),
                        self.settings.fm_norm,
                    )?;
                    out.fm = finite(fm.value, "loss_fm", iter)?;
                    fm.grad.scale(hp.lambda_fm);
                    seeds.push((fake.features, fm.grad));
                }
                AdversarialTerm::StandardGan => {
                    let (v, grad) = standard_gan_generator(&scores)?;
                    out.fm = finite(v, "loss_adv", iter)?;
                    let grad = grad.into_iter().map(|d| d * hp.lambda_fm).collect();
                    seeds.push((fake.score, Tensor::new(vec![scores.len(), 1], grad)?));
                }
            }

            let probs_u = g.value(pred_u);
            let pseudo = scores
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let s = s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
                    make_pseudo_labels(&probs_u.index(i)?, s, hp.gamma)
                })
                .collect::<Result<Vec<Option<PseudoLabel>>>>()?;
            out.pseudo_labeled = pseudo.iter().flatten().count();
            let mut st = loss_st(probs_u, &pseudo)?;
            out.st = finite(st.value, "loss_st", iter)?;
            st.grad.scale(hp.lambda_st);
            seeds.push((pred_u, st.grad));
        }

        out.total = finite(
            out.ce + hp.lambda_fm * out.fm + hp.lambda_st * out.st,
            "loss_total",
            iter,
        )?;
        let grads = g.backward(&seeds)?;
        let grads = self.generator.params().collect_grads(&grads, &gen_vars);
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                term: "generator gradient",
                iter,
            });
        }
        self.seg_opt
            .step(self.generator.params_mut(), &grads, lr_seg)?;
        Ok(out)
    }
}
