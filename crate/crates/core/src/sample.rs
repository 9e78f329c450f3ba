//! Data model shared by both branches.

use semiseg_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The background class. Always index 0.
pub const BACKGROUND: usize = 0;

/// RGB image, `height × width × 3`, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape {
                what: "image",
                expected: vec![height, width, 3],
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// `3 × H × W` channel-first copy.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c];
            }
        }
        out
    }
}

/// Dense per-pixel class indices, `height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape {
                what: "mask",
                expected: vec![height, width],
                got: vec![labels.len()],
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn flipped(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks_exact(self.width) {
            labels.extend(row.iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Error if any entry is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::ClassOutOfRange {
                class: l as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Number of pixels per class.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        counts
    }
}

/// Multi-hot class presence vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassVector(Vec<u8>);

impl ClassVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Invalid("class vector entries must be 0 or 1".into()));
        }
        Ok(Self(bits))
    }

    pub fn empty(num_classes: usize) -> Self {
        Self(vec![0; num_classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.get(class) == Some(&1)
    }

    pub fn set(&mut self, class: usize) {
        self.0[class] = 1;
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().map(|&b| b as usize).sum()
    }

    /// Copy with the background class marked present.
    pub fn with_background(&self) -> Self {
        let mut v = self.clone();
        if !v.is_empty() {
            v.set(BACKGROUND);
        }
        v
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

/// Entry `c` is 1 iff class `c` occurs somewhere in `mask`.
pub fn derive_class_vector(mask: &LabelMask, num_classes: usize) -> Result<ClassVector> {
    mask.check_classes(num_classes)?;
    let mut v = ClassVector::empty(num_classes);
    for &l in mask.labels() {
        v.set(l as usize);
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub sample_id: String,
    pub image: ImageTensor,
    pub mask: Option<LabelMask>,
    pub class_vector: Option<ClassVector>,
}

impl SegmentationSample {
    /// Checks the mask range and mask/class-vector agreement.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(mask) = &self.mask {
            if (mask.height(), mask.width()) != (self.image.height(), self.image.width()) {
                return Err(Error::Shape {
                    what: "mask",
                    expected: vec![self.image.height(), self.image.width()],
                    got: vec![mask.height(), mask.width()],
                });
            }
            let derived = derive_class_vector(mask, num_classes)?;
            if let Some(cv) = &self.class_vector {
                if *cv != derived {
                    return Err(Error::Invalid(format!(
                        "{}: class vector disagrees with mask",
                        self.sample_id
                    )));
                }
            }
        }
        if let Some(cv) = &self.class_vector {
            if cv.len() != num_classes {
                return Err(Error::Shape {
                    what: "class vector",
                    expected: vec![num_classes],
                    got: vec![cv.len()],
                });
            }
        }
        Ok(())
    }

    /// Image-level labels: the explicit vector, else one derived from the mask.
    pub fn image_labels(&self, num_classes: usize) -> Result<Option<ClassVector>> {
        match (&self.class_vector, &self.mask) {
            (Some(cv), _) => Ok(Some(cv.clone())),
            (None, Some(mask)) => derive_class_vector(mask, num_classes).map(Some),
            (None, None) => Ok(None),
        }
    }
}

/// Stack images into an `N × 3 × H × W` tensor.
pub fn images_to_tensor(images: &[&ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyBatch("image"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape {
                what: "image batch",
                expected: vec![h, w],
                got: vec![img.height(), img.width()],
            });
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// One-hot encode masks into an `N × C × H × W` tensor.
pub fn masks_to_one_hot(masks: &[&LabelMask], num_classes: usize) -> Result<Tensor> {
    let first = masks.first().ok_or(Error::EmptyBatch("mask"))?;
    let hw = first.len();
    let mut data = vec![0.0; masks.len() * num_classes * hw];
    for (n, m) in masks.iter().enumerate() {
        m.check_classes(num_classes)?;
        if m.len() != hw {
            return Err(Error::Shape {
                what: "mask batch",
                expected: vec![first.height(), first.width()],
                got: vec![m.height(), m.width()],
            });
        }
        for (p, &l) in m.labels().iter().enumerate() {
            data[(n * num_classes + l as usize) * hw + p] = 1.0;
        }
    }
    Ok(Tensor::new(
        vec![masks.len(), num_classes, first.height(), first.width()],
        data,
    )?)
}

/// Per-pixel argmax over the channel axis of one `C × H × W` map; ties go to
/// the lowest class index.
pub fn argmax_mask(probs: &Tensor) -> Result<LabelMask> {
    let (c, h, w) = match probs.shape() {
        &[c, h, w] => (c, h, w),
        &[1, c, h, w] => (c, h, w),
        other => {
            return Err(Error::Shape {
                what: "probability map",
                expected: vec![0, 0, 0],
                got: other.to_vec(),
            })
        }
    };
    let hw = h * w;
    let d = probs.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * hw + p] > d[best * hw + p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels)
}
