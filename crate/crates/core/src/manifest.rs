//! Line-delimited JSON dataset manifest and lossless raster persistence.
//!
//! Each line holds one record with the fields `id`, `image`, `mask` and
//! `classes`. `image` is either a path (relative to the manifest) or an
//! integer scene index for the synthetic generator.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{ClassVector, ImageTensor, LabelMask, SegmentationSample};
use crate::synth::{generate_scene, SceneSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Seed(u64),
    Path(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: ImageRef,
    pub mask: Option<String>,
    pub classes: Option<ClassVector>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Invalid(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Materialize every record. Integer image references need `synth`.
pub fn load_samples(
    manifest: &Path,
    synth: Option<&SceneSpec>,
    num_classes: usize,
) -> Result<Vec<SegmentationSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let (image, generated_mask) = match &rec.image {
            ImageRef::Path(p) => (load_image(&base.join(p))?, None),
            ImageRef::Seed(index) => {
                let spec = synth.ok_or_else(|| Error::Manifest {
                    line: i + 1,
                    reason: "integer image reference without a scene spec".into(),
                })?;
                let s = generate_scene(spec, *index);
                (s.image, s.mask)
            }
        };
        let mask = match &rec.mask {
            Some(p) => Some(load_mask(&base.join(p))?),
            None => generated_mask,
        };
        let sample = SegmentationSample {
            sample_id: rec.id,
            image,
            mask,
            class_vector: rec.classes,
        };
        sample.validate(num_classes)?;
        samples.push(sample);
    }
    Ok(samples)
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let raw = img.data().iter().map(|&v| to_u8(v)).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .ok_or_else(|| Error::Invalid("image buffer size".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: PathBuf::from(path),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    ImageTensor::new(h as usize, w as usize, data)
}

pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let buf = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.labels().to_vec(),
    )
    .ok_or_else(|| Error::Invalid("mask buffer size".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: PathBuf::from(path),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    LabelMask::new(h as usize, w as usize, img.into_raw())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_field_names() {
        let r = ManifestRecord {
            id: "a".into(),
            image: ImageRef::Path("images/a.png".into()),
            mask: None,
            classes: Some(ClassVector::new(vec![1, 0, 1]).unwrap()),
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(
            line,
            r#"{"id":"a","image":"images/a.png","mask":null,"classes":[1,0,1]}"#
        );
        let seeded: ManifestRecord =
            serde_json::from_str(r#"{"id":"b","image":7,"mask":null,"classes":null}"#).unwrap();
        assert_eq!(seeded.image, ImageRef::Seed(7));
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"image\":1,\"mask\":null,\"classes\":null}\n{oops}\n",
        )
        .unwrap();
        assert!(matches!(
            read_manifest(&p),
            Err(Error::Manifest { line: 2, .. })
        ));
    }
}
