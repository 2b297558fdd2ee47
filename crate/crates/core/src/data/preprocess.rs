//! Resize, crop, flip and normalize grayscale images.

use std::path::Path;

use image::imageops::FilterType;
use image::GrayImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub resize_to: usize,
    pub crop_to: usize,
    pub hflip_prob: f64,
    /// Normalization constants on the raw 0–255 scale; `None` means "use
    /// the training corpus statistics".
    pub normalize_mean: Option<f64>,
    pub normalize_std: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize_to: 72,
            crop_to: 64,
            hflip_prob: 0.5,
            normalize_mean: None,
            normalize_std: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return Err(Error::config(format!(
                "crop_to {} must be in 1..=resize_to ({})",
                self.crop_to, self.resize_to
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("hflip_prob must lie in [0, 1]"));
        }
        if let Some(s) = self.normalize_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("normalize_std must be positive"));
            }
        }
        Ok(())
    }

    pub fn normalization(&self) -> Result<(f64, f64)> {
        match (self.normalize_mean, self.normalize_std) {
            (Some(m), Some(s)) => Ok((m, s)),
            _ => Err(Error::config("normalization statistics are unresolved")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepMode {
    Train,
    Eval,
}

/// Crop window and flip decision for one draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

pub fn sample_crop<R: Rng + ?Sized>(
    cfg: &PreprocessConfig,
    mode: PrepMode,
    rng: &mut R,
) -> CropParams {
    let slack = cfg.resize_to - cfg.crop_to;
    match mode {
        PrepMode::Eval => CropParams {
            top: slack / 2,
            left: slack / 2,
            flip: false,
        },
        PrepMode::Train => CropParams {
            top: rng.gen_range(0..=slack),
            left: rng.gen_range(0..=slack),
            flip: cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob),
        },
    }
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    if !path.is_file() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    image::open(path)
        .map(|img| img.into_luma8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Bilinear resize to `size × size`; returns a `[1,size,size]` raw-scale
/// tensor.
pub fn resize_image(img: &GrayImage, size: usize) -> Tensor<f64> {
    let s = size as u32;
    let resized;
    let src = if img.width() == s && img.height() == s {
        img
    } else {
        resized = image::imageops::resize(img, s, s, FilterType::Triangle);
        &resized
    };
    Tensor::new(
        &[1, size, size],
        src.as_raw().iter().map(|&p| p as f64).collect(),
    )
    .expect("luma buffer matches its dimensions")
}

/// Cuts the crop window (and mirrors it if requested) from a `[1,R,R]`
/// tensor.
pub fn crop<T: Scalar>(resized: &Tensor<f64>, crop_to: usize, p: CropParams) -> Result<Tensor<T>> {
    let r = resized.shape()[2];
    if resized.shape()[1] < p.top + crop_to || r < p.left + crop_to {
        return Err(Error::shape(format!(
            "crop {crop_to} at ({}, {}) exceeds image {:?}",
            p.top,
            p.left,
            resized.shape()
        )));
    }
    let src = resized.data();
    Ok(Tensor::from_fn(&[1, crop_to, crop_to], |i| {
        let (y, x) = (i / crop_to, i % crop_to);
        let x = if p.flip { crop_to - 1 - x } else { x };
        T::lit(src[(p.top + y) * r + p.left + x])
    }))
}

pub fn normalize<T: Scalar>(raw: &Tensor<T>, mean: f64, std: f64) -> Tensor<T> {
    let (m, s) = (T::lit(mean), T::lit(std));
    raw.map(|v| (v - m) / s)
}

/// Raw-scale crop plus its normalized copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed<T> {
    pub raw: Tensor<T>,
    pub normalized: Tensor<T>,
}

pub fn preprocess<T: Scalar, R: Rng + ?Sized>(
    path: &Path,
    cfg: &PreprocessConfig,
    mode: PrepMode,
    rng: &mut R,
) -> Result<Preprocessed<T>> {
    cfg.validate()?;
    let (mean, std) = cfg.normalization()?;
    let img = load_gray(path)?;
    let resized = resize_image(&img, cfg.resize_to);
    let raw = crop(&resized, cfg.crop_to, sample_crop(cfg, mode, rng))?;
    let normalized = normalize(&raw, mean, std);
    Ok(Preprocessed { raw, normalized })
}

/// Loads and resizes every manifest image (in parallel, order preserved).
pub fn load_resized_all(
    manifest: &DatasetManifest,
    root: &Path,
    size: usize,
) -> Result<Vec<Tensor<f64>>> {
    manifest
        .records
        .par_iter()
        .map(|r| load_gray(&root.join(&r.path)).map(|img| resize_image(&img, size)))
        .collect()
}

/// Pixel mean and standard deviation over a set of images.
pub fn corpus_stats(images: &[Tensor<f64>]) -> Result<(f64, f64)> {
    let n: usize = images.iter().map(Tensor::numel).sum();
    if n == 0 {
        return Err(Error::config("corpus statistics need at least one pixel"));
    }
    let mean = images.iter().flat_map(|t| t.data()).sum::<f64>() / n as f64;
    let var = images
        .iter()
        .flat_map(|t| t.data())
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    Ok((mean, var.sqrt().max(1e-6)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(size: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, size, size], |i| i as f64)
    }

    #[test]
    fn center_crop_offset() {
        let cfg = PreprocessConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_crop(&cfg, PrepMode::Eval, &mut rng);
        assert_eq!((p.top, p.left, p.flip), (4, 4, false));
        let out: Tensor<f64> = crop(&ramp(72), 64, p).unwrap();
        assert_eq!(out.data()[0], (4 * 72 + 4) as f64);
        assert_eq!(out.shape(), &[1, 64, 64]);
    }

    #[test]
    fn no_flip_when_prob_zero() {
        let cfg = PreprocessConfig {
            hflip_prob: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..200).all(|_| !sample_crop(&cfg, PrepMode::Train, &mut rng).flip));
        let cfg = PreprocessConfig {
            hflip_prob: 1.0,
            ..Default::default()
        };
        let p = sample_crop(&cfg, PrepMode::Train, &mut rng);
        assert!(p.flip && p.top <= 8 && p.left <= 8);
    }

    #[test]
    fn flip_mirrors_rows() {
        let img = ramp(4);
        let p = CropParams {
            top: 0,
            left: 0,
            flip: true,
        };
        let out: Tensor<f64> = crop(&img, 4, p).unwrap();
        assert_eq!(&out.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert!(crop::<f64>(
            &img,
            5,
            CropParams {
                top: 0,
                left: 0,
                flip: false
            }
        )
        .is_err());
    }

    #[test]
    fn eval_preprocess_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        GrayImage::from_fn(40, 40, |x, y| image::Luma([(x * 5 + y) as u8]))
            .save(&path)
            .unwrap();
        let cfg = PreprocessConfig {
            resize_to: 36,
            crop_to: 32,
            normalize_mean: Some(100.0),
            normalize_std: Some(50.0),
            ..Default::default()
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a: Preprocessed<f64> = preprocess(&path, &cfg, PrepMode::Eval, &mut r1).unwrap();
        let b: Preprocessed<f64> = preprocess(&path, &cfg, PrepMode::Eval, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.normalized, normalize(&a.raw, 100.0, 50.0));
        let small = PreprocessConfig {
            resize_to: 30,
            ..cfg.clone()
        };
        assert!(preprocess::<f64, _>(&path, &small, PrepMode::Eval, &mut r1).is_err());
        let unresolved = PreprocessConfig {
            normalize_mean: None,
            ..cfg
        };
        assert!(preprocess::<f64, _>(&path, &unresolved, PrepMode::Eval, &mut r1).is_err());
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        assert!(matches!(load_gray(&bad), Err(Error::Image { .. })));
    }

    #[test]
    fn corpus_stats_of_constant() {
        let (m, s) = corpus_stats(&[Tensor::full(&[1, 2, 2], 7.0)]).unwrap();
        assert_eq!(m, 7.0);
        assert!(s > 0.0);
    }
}
