//! Deterministic synthetic scenes: coloured, textured shapes on a textured
//! background, one shape family per foreground class.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::manifest::{save_image, save_mask, write_manifest, ImageRef, ManifestRecord};
use crate::rng::{stream_rng, Stream};
use crate::sample::{derive_class_vector, ImageTensor, LabelMask, SegmentationSample};

/// Minimum pixel area of every foreground class that appears in a scene.
pub const MIN_CLASS_PIXELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeFamily {
    /// Family drawn for a foreground class (1-based); cycles past four.
    pub fn for_class(class: usize) -> Self {
        match (class.max(1) - 1) % 4 {
            0 => ShapeFamily::Disk,
            1 => ShapeFamily::Square,
            2 => ShapeFamily::Triangle,
            _ => ShapeFamily::Ring,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus foreground classes.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Per-pixel Gaussian texture noise.
    pub texture_sigma: f64,
    /// Weight of a random colour mixed into each class colour.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            min_shapes: 1,
            max_shapes: 3,
            texture_sigma: 0.06,
            color_jitter: 0.55,
            seed: 0,
        }
    }
}

const PALETTE: [[f64; 3]; 4] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
];

struct Shape {
    family: ShapeFamily,
    class: u8,
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, py: f64, px: f64) -> bool {
        let (dy, dx) = (py - self.cy, px - self.cx);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let r = self.radius;
        match self.family {
            ShapeFamily::Disk => u * u + v * v <= r * r,
            ShapeFamily::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeFamily::Square => u.abs() <= 0.85 * r && v.abs() <= 0.85 * r,
            ShapeFamily::Triangle => {
                // Equilateral, circumradius r: three half-planes at distance r/2.
                (0..3).all(|k| {
                    let t =
                        std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    u * t.cos() + v * t.sin() <= 0.5 * r
                })
            }
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn sample_shapes(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<Shape> {
    let count = if spec.max_shapes == 0 {
        0
    } else {
        rng.random_range(spec.min_shapes.min(spec.max_shapes)..=spec.max_shapes)
    };
    let side = spec.height.min(spec.width) as f64;
    (0..count)
        .map(|_| {
            let class = rng.random_range(1..spec.num_classes.max(2));
            let radius = side * rng.random_range(0.12..0.25);
            let cy = rng.random_range(0.5 * radius..spec.height as f64 - 0.5 * radius);
            let cx = rng.random_range(0.5 * radius..spec.width as f64 - 0.5 * radius);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let base = PALETTE[(class - 1) % PALETTE.len()];
            let noise = random_color(rng);
            let j = spec.color_jitter;
            let color = [0, 1, 2].map(|k| (1.0 - j) * base[k] + j * noise[k]);
            Shape {
                family: ShapeFamily::for_class(class),
                class: class as u8,
                cy,
                cx,
                radius,
                angle,
                color,
            }
        })
        .collect()
}

/// Render scene `index`. Deterministic in `(spec.seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> SegmentationSample {
    let mut rng = stream_rng(spec.seed, Stream::Scene, index);
    let (h, w) = (spec.height, spec.width);
    // Resample until no foreground class is reduced to a sliver.
    let (shapes, owner) = loop {
        let shapes = sample_shapes(spec, &mut rng);
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for (si, s) in shapes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if s.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        owner[y * w + x] = Some(si);
                    }
                }
            }
        }
        let mut counts = vec![0usize; spec.num_classes.max(2)];
        for o in owner.iter().flatten() {
            counts[shapes[*o].class as usize] += 1;
        }
        let slivers = counts
            .iter()
            .skip(1)
            .any(|&c| c > 0 && c < MIN_CLASS_PIXELS);
        let lost = shapes.iter().any(|s| counts[s.class as usize] == 0);
        if !slivers && !lost {
            break (shapes, owner);
        }
    };

    let bg = [0, 1, 2].map(|_| rng.random_range(0.15..0.85));
    let noise = Normal::new(0.0, spec.texture_sigma.max(0.0)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(h * w * 3);
    let mut labels = Vec::with_capacity(h * w);
    for o in &owner {
        let (color, class) = match o {
            Some(si) => (shapes[*si].color, shapes[*si].class),
            None => (bg, 0),
        };
        labels.push(class);
        for c in color {
            let v = if spec.texture_sigma > 0.0 {
                c + noise.sample(&mut rng)
            } else {
                c
            };
            // Quantize so the PNG round trip is exact.
            pixels.push((v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        }
    }
    let image = ImageTensor::new(h, w, pixels).expect("scene shape");
    let mask = LabelMask::new(h, w, labels).expect("scene shape");
    let class_vector = derive_class_vector(&mask, spec.num_classes).expect("classes in range");
    SegmentationSample {
        sample_id: scene_id(index),
        image,
        mask: Some(mask),
        class_vector: Some(class_vector),
    }
}

pub fn scene_id(index: u64) -> String {
    format!("scene-{index:06}")
}

/// Scenes `start..start + n`.
pub fn generate_samples(spec: &SceneSpec, start: u64, n: usize) -> Vec<SegmentationSample> {
    (start..start + n as u64)
        .map(|i| generate_scene(spec, i))
        .collect()
}

/// Render `n` scenes to `dir` as PNG files plus `manifest.jsonl`.
pub fn generate_dataset(spec: &SceneSpec, n: usize, dir: &Path) -> Result<Vec<ManifestRecord>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(n);
    for index in 0..n as u64 {
        let s = generate_scene(spec, index);
        let image = format!("images/{}.png", s.sample_id);
        let mask = format!("masks/{}.png", s.sample_id);
        save_image(&dir.join(&image), &s.image)?;
        save_mask(
            &dir.join(&mask),
            s.mask.as_ref().expect("scenes carry masks"),
        )?;
        records.push(ManifestRecord {
            id: s.sample_id,
            image: ImageRef::Path(image),
            mask: Some(mask),
            classes: s.class_vector,
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}
