//! Perturbations for the student/teacher views of the classifier branch.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::rng::Rng as StdRng;
use crate::sample::{ImageTensor, SegmentationSample};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Horizontal flip with probability 0.5.
    pub flip: bool,
    /// Standard deviation of additive Gaussian pixel noise; 0 disables it.
    pub noise_sigma: f64,
    /// Crop a window covering `crop_min_area..=1` of the image and resize back.
    pub crop: bool,
    pub crop_min_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            noise_sigma: 0.02,
            crop: true,
            crop_min_area: 0.9,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            flip: false,
            noise_sigma: 0.0,
            crop: false,
            crop_min_area: 1.0,
        }
    }
}

/// Student view (`view_a`) and teacher view (`view_b`) of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view_a: ImageTensor,
    pub view_b: ImageTensor,
    pub provenance: String,
}

pub fn augment_pair(
    sample: &SegmentationSample,
    seed: u64,
    config: &AugmentConfig,
) -> AugmentedPair {
    let mut rng = StdRng::seed_from_u64(seed);
    let view_a = perturb(&sample.image, config, &mut rng);
    let view_b = perturb(&sample.image, config, &mut rng);
    AugmentedPair {
        view_a,
        view_b,
        provenance: sample.sample_id.clone(),
    }
}

/// One independent draw of crop → flip → noise.
pub fn perturb(image: &ImageTensor, config: &AugmentConfig, rng: &mut impl Rng) -> ImageTensor {
    let mut img = image.clone();
    if config.crop {
        let area = rng.random_range(config.crop_min_area.clamp(0.01, 1.0)..=1.0);
        img = crop_resize(&img, area, rng);
    }
    if config.flip && rng.random_bool(0.5) {
        img = img.flipped();
    }
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("positive sigma");
        let data = img
            .data()
            .iter()
            .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0))
            .collect();
        img = ImageTensor::new(img.height(), img.width(), data).expect("same shape, clamped");
    }
    img
}

fn crop_resize(img: &ImageTensor, area: f64, rng: &mut impl Rng) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let scale = area.sqrt();
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    if (ch, cw) == (h, w) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(h * w * 3);
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    for oy in 0..h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let (ya, fy) = (fy.floor() as usize, fy.fract());
        let yb = (ya + 1).min(ch - 1);
        for ox in 0..w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let (xa, fx) = (fx.floor() as usize, fx.fract());
            let xb = (xa + 1).min(cw - 1);
            let p = |y: usize, x: usize| img.pixel(y0 + y, x0 + x);
            let (a, b, c, d) = (p(ya, xa), p(ya, xb), p(yb, xa), p(yb, xb));
            for k in 0..3 {
                let top = a[k] * (1.0 - fx) + b[k] * fx;
                let bot = c[k] * (1.0 - fx) + d[k] * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(h, w, data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::SegmentationSample;

    fn sample() -> SegmentationSample {
        let data = (0..8 * 8 * 3).map(|i| (i % 17) as f64 / 16.0).collect();
        SegmentationSample {
            sample_id: "x".into(),
            image: ImageTensor::new(8, 8, data).unwrap(),
            mask: None,
            class_vector: None,
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let s = sample();
        let cfg = AugmentConfig::default();
        assert_eq!(augment_pair(&s, 5, &cfg), augment_pair(&s, 5, &cfg));
    }

    #[test]
    fn identity_config() {
        let s = sample();
        let p = augment_pair(&s, 5, &AugmentConfig::identity());
        assert_eq!(p.view_a, s.image);
        assert_eq!(p.view_b, s.image);
        assert_eq!(p.provenance, "x");
    }

    #[test]
    fn default_views_differ_almost_always() {
        let s = sample();
        let cfg = AugmentConfig::default();
        let differ = (0..1000u64)
            .filter(|&seed| {
                let p = augment_pair(&s, seed, &cfg);
                p.view_a != p.view_b
            })
            .count();
        assert!(differ >= 990, "{differ}");
    }

    #[test]
    fn views_stay_in_range() {
        let s = sample();
        let cfg = AugmentConfig {
            noise_sigma: 0.5,
            ..Default::default()
        };
        let p = augment_pair(&s, 1, &cfg);
        assert!(p.view_a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((p.view_b.height(), p.view_b.width()), (8, 8));
    }
}
