use std::path::Path;

use crate::data::cache;
use crate::data::manifest::{Crop, DatasetManifest, ImageRecord, Split};
use crate::data::resize::resize_bilinear;
use crate::error::{Error, Result};
use crate::model::ClassLabel;
use crate::tensor::Tensor;

/// Decodes a PNG/JPEG file, applies the optional crop, resizes bilinearly to
/// `target` (height, width) and scales to `[0, 1]`. Grayscale sources are
/// replicated to three channels; alpha is dropped.
pub fn load_and_preprocess(
    path: &Path,
    crop: Option<Crop>,
    target: (usize, usize),
) -> Result<Tensor> {
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let img = image::open(path).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Err(img_err("zero-dimension image".into()));
    }
    let img = match crop {
        Some(c) if !c.fits(w, h) => {
            return Err(img_err(format!(
                "crop ({}, {}, {}x{}) outside {w}x{h} image",
                c.x, c.y, c.width, c.height
            )))
        }
        Some(c) => img.crop_imm(c.x, c.y, c.width, c.height),
        None => img,
    };
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels: Vec<f32> = rgb.as_raw().iter().map(|&b| b as f32).collect();
    preprocess_pixels(&pixels, (h, w), target)
}

/// Resizes interleaved RGB values in `[0, 255]` and scales them to `[0, 1]`.
pub fn preprocess_pixels(
    rgb: &[f32],
    (h, w): (usize, usize),
    target: (usize, usize),
) -> Result<Tensor> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let resized = resize_bilinear(rgb, (h, w, 3), target);
    let data = resized
        .into_iter()
        .map(|v| (v / 255.0).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(&[target.0, target.1, 3], data)
}

/// Loads a record either from a cached tensor (`.f32`) or by preprocessing
/// its image.
pub fn load_record(manifest: &DatasetManifest, record: &ImageRecord) -> Result<Tensor> {
    let path = manifest.resolve(record);
    let side = manifest.target_size;
    if cache::is_cached_tensor(&path) {
        let t = cache::read_tensor(&path)?;
        if t.shape() != [side, side, 3] {
            return Err(Error::Data(format!(
                "{}: cached tensor {:?} does not match target {side}x{side}x3",
                path.display(),
                t.shape()
            )));
        }
        Ok(t)
    } else {
        load_and_preprocess(&path, record.crop, (side, side))
    }
}

/// Images with their labels, ready for training or evaluation.
#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub images: Vec<Tensor>,
    pub labels: Vec<ClassLabel>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Tensor, label: ClassLabel) {
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        Samples {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub fn load_samples<'a>(
    manifest: &DatasetManifest,
    records: impl IntoIterator<Item = &'a ImageRecord>,
) -> Result<Samples> {
    let mut s = Samples::default();
    for r in records {
        s.push(load_record(manifest, r)?, r.class_label()?);
    }
    Ok(s)
}

pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Samples> {
    load_samples(manifest, manifest.in_split(split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img =
            image::RgbImage::from_fn(5, 4, |x, y| image::Rgb([(x * 50) as u8, (y * 60) as u8, 7]));
        img.save(&p).unwrap();
        let t = load_and_preprocess(&p, None, (4, 5)).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                let px = img.get_pixel(x, y);
                for c in 0..3 {
                    assert_eq!(t.at(&[y as usize, x as usize, c]), px[c] as f32 / 255.0);
                }
            }
        }
    }

    #[test]
    fn uniform_gray_any_crop() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(40, 30, image::Luma([77]))
            .save(&p)
            .unwrap();
        let crop = Crop {
            x: 3,
            y: 2,
            width: 17,
            height: 11,
        };
        let t = load_and_preprocess(&p, Some(crop), (224, 224)).unwrap();
        assert_eq!(t.shape(), &[224, 224, 3]);
        assert!(t.data().iter().all(|&v| v == 77.0 / 255.0));
    }

    #[test]
    fn checkerboard_to_three() {
        let t = preprocess_pixels(
            &[0., 0., 0., 255., 255., 255., 255., 255., 255., 0., 0., 0.],
            (2, 2),
            (3, 3),
        )
        .unwrap();
        assert_eq!(t.at(&[1, 1, 0]), 0.5);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(
            load_and_preprocess(&p, None, (8, 8)),
            Err(Error::Image { .. })
        ));
        let ok = dir.path().join("ok.png");
        image::RgbImage::new(4, 4).save(&ok).unwrap();
        let crop = Crop {
            x: 2,
            y: 0,
            width: 3,
            height: 2,
        };
        assert!(load_and_preprocess(&ok, Some(crop), (8, 8)).is_err());
    }

    #[test]
    fn deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jpg");
        image::RgbImage::from_fn(31, 17, |x, y| {
            image::Rgb([(x * 7) as u8, (y * 13) as u8, (x ^ y) as u8])
        })
        .save(&p)
        .unwrap();
        let a = load_and_preprocess(&p, None, (20, 20)).unwrap();
        let b = load_and_preprocess(&p, None, (20, 20)).unwrap();
        assert_eq!(a, b);
    }
}
