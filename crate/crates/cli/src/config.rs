//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use semiseg_core::s4gan::{AdversarialTerm, FmNorm, SegOptimizer};
use semiseg_core::HyperParams;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Semi,
    SupervisedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Small networks and short schedules sized for a single CPU core.
    Desk,
    /// Default hyperparameters with wider networks.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => bail!("unknown preset {s:?} (expected desk or full)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hparams: HyperParams,
    pub mode: Mode,
    pub labeled_ratio: f64,
    pub weak_fraction: f64,
    pub mlmt: bool,
    /// Also train a plain classifier (no consistency term) for comparison.
    pub cnn_baseline: bool,
    pub gen_loss: AdversarialTerm,
    pub seg_optimizer: SegOptimizer,
    pub fm_norm: FmNorm,
    pub flip: bool,
    pub data_seed: u64,
    /// Weight of the random colour mixed into each class colour.
    pub color_jitter: f64,
    pub num_scenes: usize,
    pub val_scenes: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub gen_width: usize,
    pub disc_width: usize,
    pub cls_width: usize,
    pub lr_cls: f64,
    /// 0 means "same as max_iter".
    pub mlmt_max_iter: usize,
    /// 0 means "same as batch_size".
    pub mlmt_batch_size: usize,
    /// Fuse with the student instead of the teacher.
    pub fusion_student: bool,
    /// 0 disables periodic checkpoints; a final one is always written.
    pub checkpoint_every: usize,
    /// 0 evaluates only after the last iteration.
    pub val_every: usize,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    pub fn desk() -> Self {
        Self {
            hparams: HyperParams {
                lr_seg: 3e-3,
                lr_disc: 1e-3,
                max_iter: 1000,
                batch_size: 4,
                ..HyperParams::default()
            },
            mode: Mode::Semi,
            labeled_ratio: 0.05,
            weak_fraction: 0.0,
            mlmt: true,
            cnn_baseline: false,
            gen_loss: AdversarialTerm::FeatureMatching,
            seg_optimizer: SegOptimizer::Adam,
            fm_norm: FmNorm::L1,
            flip: true,
            data_seed: 0,
            color_jitter: 0.15,
            num_scenes: 1000,
            val_scenes: 200,
            resolution: 64,
            num_classes: 5,
            gen_width: 16,
            disc_width: 16,
            cls_width: 16,
            lr_cls: 1e-3,
            mlmt_max_iter: 0,
            mlmt_batch_size: 0,
            fusion_student: false,
            checkpoint_every: 0,
            val_every: 500,
        }
    }

    pub fn full() -> Self {
        Self {
            hparams: HyperParams::default(),
            seg_optimizer: SegOptimizer::Sgd,
            color_jitter: 0.55,
            labeled_ratio: 0.125,
            disc_width: 64,
            gen_width: 32,
            cls_width: 32,
            val_every: 5000,
            checkpoint_every: 5000,
            ..Self::desk()
        }
    }

    pub fn mlmt_iters(&self) -> usize {
        if self.mlmt_max_iter == 0 {
            self.hparams.max_iter
        } else {
            self.mlmt_max_iter
        }
    }

    pub fn mlmt_batch(&self) -> usize {
        if self.mlmt_batch_size == 0 {
            self.hparams.batch_size
        } else {
            self.mlmt_batch_size
        }
    }

    /// Supervised-only runs drop the unlabeled terms and the classifier.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if c.mode == Mode::SupervisedOnly {
            c.hparams.lambda_fm = 0.0;
            c.hparams.lambda_st = 0.0;
            c.mlmt = false;
            c.cnn_baseline = false;
        }
        c
    }

    pub const KEYS: &'static [&'static str] = &[
        "lambda_fm",
        "lambda_st",
        "lambda_cons",
        "gamma",
        "tau",
        "lr_seg",
        "lr_disc",
        "pow",
        "max_iter",
        "batch_size",
        "ema_decay",
        "seed",
        "mode",
        "labeled_ratio",
        "weak_fraction",
        "mlmt",
        "cnn_baseline",
        "gen_loss",
        "seg_optimizer",
        "fm_norm",
        "flip",
        "data_seed",
        "color_jitter",
        "num_scenes",
        "val_scenes",
        "resolution",
        "num_classes",
        "gen_width",
        "disc_width",
        "cls_width",
        "lr_cls",
        "mlmt_max_iter",
        "mlmt_batch_size",
        "fusion_student",
        "checkpoint_every",
        "val_every",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| anyhow::anyhow!("invalid value {v:?} for {key}"))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => bail!("invalid value {v:?} for {key} (expected true or false)"),
            }
        }
        let hp = &mut self.hparams;
        match key {
            "lambda_fm" => hp.lambda_fm = num(key, v)?,
            "lambda_st" => hp.lambda_st = num(key, v)?,
            "lambda_cons" => hp.lambda_cons = num(key, v)?,
            "gamma" => hp.gamma = num(key, v)?,
            "tau" => hp.tau = num(key, v)?,
            "lr_seg" => hp.lr_seg = num(key, v)?,
            "lr_disc" => hp.lr_disc = num(key, v)?,
            "pow" => hp.pow = num(key, v)?,
            "max_iter" => hp.max_iter = num(key, v)?,
            "batch_size" => hp.batch_size = num(key, v)?,
            "ema_decay" => hp.ema_decay = num(key, v)?,
            "seed" => hp.seed = num(key, v)?,
            "mode" => {
                self.mode = match v {
                    "semi" => Mode::Semi,
                    "supervised_only" => Mode::SupervisedOnly,
                    _ => bail!("invalid mode {v:?} (expected semi or supervised_only)"),
                }
            }
            "labeled_ratio" => self.labeled_ratio = semiseg_core::split::parse_ratio(v)?,
            "weak_fraction" => self.weak_fraction = num(key, v)?,
            "mlmt" => self.mlmt = flag(key, v)?,
            "cnn_baseline" => self.cnn_baseline = flag(key, v)?,
            "gen_loss" => {
                self.gen_loss = match v {
                    "fm" => AdversarialTerm::FeatureMatching,
                    "sgan" => AdversarialTerm::StandardGan,
                    _ => bail!("invalid gen_loss {v:?} (expected fm or sgan)"),
                }
            }
            "seg_optimizer" => {
                self.seg_optimizer = match v {
                    "sgd" => SegOptimizer::Sgd,
                    "adam" => SegOptimizer::Adam,
                    _ => bail!("invalid seg_optimizer {v:?} (expected sgd or adam)"),
                }
            }
            "fm_norm" => {
                self.fm_norm = match v {
                    "l1" => FmNorm::L1,
                    "l2" => FmNorm::L2,
                    _ => bail!("invalid fm_norm {v:?} (expected l1 or l2)"),
                }
            }
            "flip" => self.flip = flag(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "color_jitter" => self.color_jitter = num(key, v)?,
            "num_scenes" => self.num_scenes = num(key, v)?,
            "val_scenes" => self.val_scenes = num(key, v)?,
            "resolution" => self.resolution = num(key, v)?,
            "num_classes" => self.num_classes = num(key, v)?,
            "gen_width" => self.gen_width = num(key, v)?,
            "disc_width" => self.disc_width = num(key, v)?,
            "cls_width" => self.cls_width = num(key, v)?,
            "lr_cls" => self.lr_cls = num(key, v)?,
            "mlmt_max_iter" => self.mlmt_max_iter = num(key, v)?,
            "mlmt_batch_size" => self.mlmt_batch_size = num(key, v)?,
            "fusion_student" => self.fusion_student = flag(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "val_every" => self.val_every = num(key, v)?,
            _ => bail!(
                "unknown config key {key:?}; valid keys: {}",
                Self::KEYS.join(", ")
            ),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let hp = &self.hparams;
        let b = |v: bool| v.to_string();
        Some(match key {
            "lambda_fm" => hp.lambda_fm.to_string(),
            "lambda_st" => hp.lambda_st.to_string(),
            "lambda_cons" => hp.lambda_cons.to_string(),
            "gamma" => hp.gamma.to_string(),
            "tau" => hp.tau.to_string(),
            "lr_seg" => hp.lr_seg.to_string(),
            "lr_disc" => hp.lr_disc.to_string(),
            "pow" => hp.pow.to_string(),
            "max_iter" => hp.max_iter.to_string(),
            "batch_size" => hp.batch_size.to_string(),
            "ema_decay" => hp.ema_decay.to_string(),
            "seed" => hp.seed.to_string(),
            "mode" => match self.mode {
                Mode::Semi => "semi".into(),
                Mode::SupervisedOnly => "supervised_only".into(),
            },
            "labeled_ratio" => self.labeled_ratio.to_string(),
            "weak_fraction" => self.weak_fraction.to_string(),
            "mlmt" => b(self.mlmt),
            "cnn_baseline" => b(self.cnn_baseline),
            "gen_loss" => match self.gen_loss {
                AdversarialTerm::FeatureMatching => "fm".into(),
                AdversarialTerm::StandardGan => "sgan".into(),
            },
            "seg_optimizer" => match self.seg_optimizer {
                SegOptimizer::Sgd => "sgd".into(),
                SegOptimizer::Adam => "adam".into(),
            },
            "fm_norm" => match self.fm_norm {
                FmNorm::L1 => "l1".into(),
                FmNorm::L2 => "l2".into(),
            },
            "flip" => b(self.flip),
            "data_seed" => self.data_seed.to_string(),
            "color_jitter" => self.color_jitter.to_string(),
            "num_scenes" => self.num_scenes.to_string(),
            "val_scenes" => self.val_scenes.to_string(),
            "resolution" => self.resolution.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "gen_width" => self.gen_width.to_string(),
            "disc_width" => self.disc_width.to_string(),
            "cls_width" => self.cls_width.to_string(),
            "lr_cls" => self.lr_cls.to_string(),
            "mlmt_max_iter" => self.mlmt_max_iter.to_string(),
            "mlmt_batch_size" => self.mlmt_batch_size.to_string(),
            "fusion_student" => b(self.fusion_student),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "val_every" => self.val_every.to_string(),
            _ => return None,
        })
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v)
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut c = base;
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Canonical text form: every key in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        let warnings = self.hparams.validate()?;
        if self.resolution == 0 || !self.resolution.is_multiple_of(16) {
            bail!(
                "resolution must be a positive multiple of 16, got {}",
                self.resolution
            );
        }
        if !(2..=255).contains(&self.num_classes) {
            bail!("num_classes must lie in 2..=255, got {}", self.num_classes);
        }
        if self.num_scenes == 0 || self.val_scenes == 0 {
            bail!("num_scenes and val_scenes must be positive");
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            bail!("color_jitter must lie in [0, 1]");
        }
        if !(self.lr_cls > 0.0 && self.lr_cls.is_finite()) {
            bail!("lr_cls must be positive");
        }
        Ok(warnings)
    }
}
