//! A training run: data, both branches, and the per-iteration log.

use std::sync::Arc;

use anyhow::{bail, Context, Result};
use semiseg_core::metrics::{ConfusionMatrix, MetricRecord, ScoreTrace};
use semiseg_core::mlmt::{ClassifierConfig, MlmtBranch, MlmtInput, MlmtSettings};
use semiseg_core::rng::{stream_rng, Stream};
use semiseg_core::s4gan::{
    DiscriminatorConfig, GeneratorConfig, LabeledPair, S4GanBranch, S4GanSettings,
};
use semiseg_core::sample::argmax_mask;
use semiseg_core::split::{make_split, SplitPlan};
use semiseg_core::synth::{generate_samples, SceneSpec};
use semiseg_core::{ClassVector, ImageTensor, SegmentationSample};
use semiseg_nn::Tensor;

use crate::config::RunConfig;

/// Training and validation scenes with the labeled/weak/unlabeled partition.
#[derive(Debug)]
pub struct Dataset {
    pub train: Vec<SegmentationSample>,
    pub val: Vec<SegmentationSample>,
    pub split: SplitPlan,
    pub labeled: Vec<usize>,
    pub weak: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Image-level labels of labeled and weak samples, indexed like `train`.
    pub class_labels: Vec<Option<ClassVector>>,
}

impl Dataset {
    pub fn scene_spec(config: &RunConfig) -> SceneSpec {
        SceneSpec {
            height: config.resolution,
            width: config.resolution,
            num_classes: config.num_classes,
            seed: config.data_seed,
            color_jitter: config.color_jitter,
            ..SceneSpec::default()
        }
    }

    /// Synthetic scenes `0..num_scenes` for training and the following
    /// `val_scenes` for validation. The split depends on the run seed.
    pub fn synthetic(config: &RunConfig) -> Result<Self> {
        let spec = Self::scene_spec(config);
        let train = generate_samples(&spec, 0, config.num_scenes);
        let val = generate_samples(&spec, config.num_scenes as u64, config.val_scenes);
        Self::from_samples(train, val, config)
    }

    pub fn from_samples(
        train: Vec<SegmentationSample>,
        val: Vec<SegmentationSample>,
        config: &RunConfig,
    ) -> Result<Self> {
        let ids: Vec<String> = train.iter().map(|s| s.sample_id.clone()).collect();
        let split = make_split(
            &ids,
            config.labeled_ratio,
            config.hparams.seed,
            config.weak_fraction,
        )?;
        let position = |list: &[String]| -> Vec<usize> {
            let set: std::collections::HashSet<&String> = list.iter().collect();
            (0..ids.len()).filter(|&i| set.contains(&ids[i])).collect()
        };
        let labeled = position(&split.labeled_ids);
        let weak = position(&split.weak_ids);
        let unlabeled = position(&split.unlabeled_ids);
        let mut class_labels = vec![None; train.len()];
        for &i in labeled.iter().chain(&weak) {
            class_labels[i] = train[i].image_labels(config.num_classes)?;
        }
        for &i in &labeled {
            if train[i].mask.is_none() {
                bail!("labeled sample {} has no mask", train[i].sample_id);
            }
        }
        if val.iter().any(|s| s.mask.is_none()) {
            bail!("every validation sample needs a mask");
        }
        Ok(Self {
            train,
            val,
            split,
            labeled,
            weak,
            unlabeled,
            class_labels,
        })
    }
}

/// Which pool a batch is drawn from; each has its own shuffling stream.
#[derive(Clone, Copy, Debug)]
enum Pool {
    SegLabeled,
    SegUnlabeled,
    ClsLabeled,
    ClsUnlabeled,
}

/// Entries `iter·b .. iter·b + b` of the concatenation of per-epoch
/// permutations of `pool`. Stateless, so any iteration can be replayed.
fn batch_from(pool: &[usize], seed: u64, which: Pool, iter: usize, b: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let (stream, tag) = match which {
        Pool::SegLabeled => (Stream::LabeledOrder, 0u64),
        Pool::SegUnlabeled => (Stream::UnlabeledOrder, 0),
        Pool::ClsLabeled => (Stream::LabeledOrder, 1 << 40),
        Pool::ClsUnlabeled => (Stream::UnlabeledOrder, 1 << 40),
    };
    let n = pool.len();
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (iter * b..iter * b + b)
        .map(|p| {
            let epoch = p / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm = pool.to_vec();
                perm.shuffle(&mut stream_rng(seed, stream, tag | epoch as u64));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("filled above").1[p % n]
        })
        .collect()
}

pub struct Session {
    pub config: RunConfig,
    pub data: Arc<Dataset>,
    pub seg: S4GanBranch,
    pub mlmt: Option<MlmtBranch>,
    /// Plain classifier: the same network trained without the consistency term.
    pub cnn: Option<MlmtBranch>,
    /// Next iteration to run.
    pub iter: usize,
    pub trace: ScoreTrace,
    pub records: Vec<MetricRecord>,
}

impl Session {
    pub fn new(config: &RunConfig, data: Arc<Dataset>) -> Result<Self> {
        let config = config.effective();
        for w in config.validate()? {
            eprintln!("warning: {w}");
        }
        let hp = config.hparams.clone();
        let gen = GeneratorConfig {
            num_classes: config.num_classes,
            height: config.resolution,
            width: config.resolution,
            base_width: config.gen_width,
        };
        let disc = DiscriminatorConfig::scaled(config.num_classes, config.disc_width);
        let settings = S4GanSettings {
            adversarial: config.gen_loss,
            fm_norm: config.fm_norm,
            seg_optimizer: config.seg_optimizer,
            train_discriminator: config.hparams.lambda_fm > 0.0 || config.hparams.lambda_st > 0.0,
            flip: config.flip,
            ..S4GanSettings::default()
        };
        let seg = S4GanBranch::new(gen, disc, hp.clone(), settings)?;
        let cls = ClassifierConfig {
            num_classes: config.num_classes,
            height: config.resolution,
            width: config.resolution,
            base_width: config.cls_width,
        };
        let mlmt_settings = MlmtSettings {
            lr: config.lr_cls,
            max_iter: config.mlmt_iters(),
            ..MlmtSettings::default()
        };
        let mlmt = config
            .mlmt
            .then(|| MlmtBranch::new(cls.clone(), hp.clone(), mlmt_settings.clone()))
            .transpose()?;
        let cnn = config
            .cnn_baseline
            .then(|| {
                let hp = semiseg_core::HyperParams {
                    lambda_cons: 0.0,
                    ..hp.clone()
                };
                MlmtBranch::new(cls.clone(), hp, mlmt_settings.clone())
            })
            .transpose()?;
        if data.labeled.is_empty() {
            bail!("no labeled samples");
        }
        if seg.settings.train_discriminator && data.unlabeled.is_empty() && data.weak.is_empty() {
            bail!("semi-supervised training needs unlabeled samples");
        }
        Ok(Self {
            config,
            data,
            seg,
            mlmt,
            cnn,
            iter: 0,
            trace: ScoreTrace::default(),
            records: Vec::new(),
        })
    }

    pub fn max_iter(&self) -> usize {
        self.config.hparams.max_iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.max_iter()
    }

    fn unlabeled_pool(&self) -> Vec<usize> {
        // weakly labeled images are unlabeled as far as segmentation goes
        let mut pool: Vec<usize> = self
            .data
            .unlabeled
            .iter()
            .chain(&self.data.weak)
            .copied()
            .collect();
        pool.sort_unstable();
        pool
    }

    fn classifier_step(
        branch: &mut MlmtBranch,
        data: &Dataset,
        pools: (&[usize], &[usize]),
        seed: u64,
        batch: usize,
        iter: usize,
    ) -> Result<semiseg_core::mlmt::MlmtLosses> {
        let idx = batch_from(pools.0, seed, Pool::ClsLabeled, iter, batch);
        let mut inputs: Vec<MlmtInput> = idx
            .iter()
            .map(|&i| MlmtInput {
                image: &data.train[i].image,
                labels: data.class_labels[i].as_ref(),
            })
            .collect();
        if !pools.1.is_empty() {
            let idx = batch_from(pools.1, seed, Pool::ClsUnlabeled, iter, batch);
            inputs.extend(idx.iter().map(|&i| MlmtInput {
                image: &data.train[i].image,
                labels: None,
            }));
        }
        Ok(branch.train_step(&inputs, iter)?)
    }

    /// Run one iteration of every active branch and log it.
    pub fn step(&mut self) -> Result<&MetricRecord> {
        if self.is_done() {
            bail!("training already reached max_iter = {}", self.max_iter());
        }
        let it = self.iter;
        let seed = self.config.hparams.seed;
        let b = self.config.hparams.batch_size;
        let data = Arc::clone(&self.data);
        let lab = batch_from(&data.labeled, seed, Pool::SegLabeled, it, b);
        let pairs: Vec<LabeledPair> = lab
            .iter()
            .map(|&i| LabeledPair {
                image: &data.train[i].image,
                mask: data.train[i].mask.as_ref().expect("checked at load"),
            })
            .collect();
        let un_pool = self.unlabeled_pool();
        let unl: Vec<&ImageTensor> = if un_pool.is_empty() || !self.seg.settings.train_discriminator
        {
            Vec::new()
        } else {
            batch_from(&un_pool, seed, Pool::SegUnlabeled, it, b)
                .into_iter()
                .map(|i| &data.train[i].image)
                .collect()
        };
        let losses = self
            .seg
            .train_step(&pairs, &unl, it)
            .with_context(|| format!("segmentation step {it}"))?;
        let semi = self.seg.settings.train_discriminator;
        let mut rec = MetricRecord {
            iter: it,
            lr: losses.lr_seg,
            loss_ce: Some(losses.ce),
            loss_fm: semi.then_some(losses.fm),
            loss_st: semi.then_some(losses.st),
            loss_d: losses.d_loss,
            d_real_mean: losses.d_real_mean,
            d_fake_mean: losses.d_fake_mean,
            ..MetricRecord::default()
        };
        if let (Some(r), Some(f)) = (losses.d_real_mean, losses.d_fake_mean) {
            self.trace.record(it, r, true);
            self.trace.record(it, f, false);
        }

        let cls_lab: Vec<usize> = {
            let mut v: Vec<usize> = data.labeled.iter().chain(&data.weak).copied().collect();
            v.sort_unstable();
            v
        };
        let cls_un = data.unlabeled.clone();
        let mb = self.config.mlmt_batch();
        if it < self.config.mlmt_iters() {
            if let Some(m) = self.mlmt.as_mut() {
                let l = Self::classifier_step(m, &data, (&cls_lab, &cls_un), seed, mb, it)
                    .with_context(|| format!("classifier step {it}"))?;
                rec.loss_cce = Some(l.cce);
                rec.loss_cons = Some(l.cons);
            }
            if let Some(c) = self.cnn.as_mut() {
                Self::classifier_step(c, &data, (&cls_lab, &[]), seed, mb, it)
                    .with_context(|| format!("baseline classifier step {it}"))?;
            }
        }
        self.iter += 1;
        let every = self.config.val_every;
        if self.is_done() || (every > 0 && self.iter.is_multiple_of(every)) {
            let fusion = if self.mlmt.is_some() {
                Fusion::Mlmt
            } else {
                Fusion::None
            };
            rec.miou_val = Some(self.evaluate(fusion)?);
        }
        if self.is_done() {
            self.trace.flush();
        }
        self.records.push(rec);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Step until `iter == stop` (capped at max_iter).
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        while self.iter < stop.min(self.max_iter()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn val_predictions(&self) -> Result<Vec<Tensor>> {
        self.predictions(&self.data.val)
    }

    pub fn predictions(&self, samples: &[SegmentationSample]) -> Result<Vec<Tensor>> {
        samples
            .iter()
            .map(|s| Ok(self.seg.generator.segment(&s.image)?))
            .collect()
    }

    /// Class probabilities of the selected classifier on `samples`.
    pub fn class_probs(
        &self,
        which: Classifier,
        samples: &[SegmentationSample],
    ) -> Result<Vec<Vec<f64>>> {
        let branch = match which {
            Classifier::Mlmt => self
                .mlmt
                .as_ref()
                .context("classifier branch is disabled")?,
            Classifier::Cnn => self
                .cnn
                .as_ref()
                .context("baseline classifier is disabled")?,
        };
        // the plain classifier has no meaningful teacher
        let net = if self.config.fusion_student || matches!(which, Classifier::Cnn) {
            &branch.student
        } else {
            &branch.teacher
        };
        samples
            .iter()
            .map(|s| Ok(net.classify(&s.image)?))
            .collect()
    }

    /// Validation mIoU under a simple fusion mode.
    pub fn evaluate(&self, fusion: Fusion) -> Result<f64> {
        let preds = self.val_predictions()?;
        let probs = match fusion {
            Fusion::None => None,
            Fusion::Mlmt => Some(self.class_probs(Classifier::Mlmt, &self.data.val)?),
            Fusion::Cnn => Some(self.class_probs(Classifier::Cnn, &self.data.val)?),
        };
        let tau = self.config.hparams.tau;
        let fused = preds
            .into_iter()
            .enumerate()
            .map(|(i, p)| match &probs {
                Some(pr) => Ok(semiseg_core::fusion::fuse(&p, &pr[i], tau)?),
                None => Ok(p),
            })
            .collect::<Result<Vec<_>>>()?;
        miou_of(&fused, &self.data.val, self.config.num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    None,
    Mlmt,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Classifier {
    Mlmt,
    Cnn,
}

/// mIoU of argmax predictions against the samples' masks.
pub fn miou_of(
    preds: &[Tensor],
    samples: &[SegmentationSample],
    num_classes: usize,
) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, s) in preds.iter().zip(samples) {
        let gt = s.mask.as_ref().context("evaluation sample without mask")?;
        cm.update(&argmax_mask(p)?, gt, None)?;
    }
    Ok(cm.miou()?)
}
