//! Seeded image perturbations.
//!
//! Weak transforms (crop, rotation, translation, brightness, contrast) keep
//! the clinical content intact and only diversify the sampled responses.
//! Distortions (Poisson shot noise plus additive Gaussian noise) degrade fine
//! detail and feed the contrast branch. Both are pure functions of
//! `(image, config, seed)`.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("image file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Decoded image with channel values in `[0, 1]`, row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<f32>) -> Result<Self, PerturbError> {
        if width == 0 || height == 0 {
            return Err(PerturbError::InvalidImage("zero-sized image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(PerturbError::InvalidImage(format!("{channels} channels, expected 1 or 3")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(PerturbError::InvalidImage(format!(
                "pixel buffer has {} values, expected {expected}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PerturbError::InvalidImage(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, pixels })
    }

    /// Image filled with a single value on every channel.
    pub fn constant(width: u32, height: u32, channels: u8, value: f32) -> Result<Self, PerturbError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    /// Deterministic random texture, handy for fixtures: transformed copies
    /// of a textured image rarely quantize to the same PNG.
    pub fn noise_pattern(width: u32, height: u32, channels: u8, seed: u64) -> Result<Self, PerturbError> {
        let n = width as usize * height as usize * channels as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(width, height, channels, (0..n).map(|_| rng.random::<f32>()).collect())
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width as usize + x) * self.channels as usize + c]
    }

    /// Encode as 8-bit PNG. The encoding is deterministic, so the SHA-256 of
    /// the result identifies the image content seen by a backend.
    pub fn to_png(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        let img = if self.channels == 1 {
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, bytes).expect("buffer size checked"),
            )
        } else {
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, bytes).expect("buffer size checked"),
            )
        };
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
        out.into_inner()
    }

    pub fn from_encoded(bytes: &[u8]) -> Result<Self, PerturbError> {
        let format = image::guess_format(bytes)
            .map_err(|_| PerturbError::UnsupportedFormat("unrecognized file signature".into()))?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
            return Err(PerturbError::UnsupportedFormat(format!("{format:?}")));
        }
        let decoded = image::load_from_memory_with_format(bytes, format)
            .map_err(|e| PerturbError::CorruptImage(e.to_string()))?;
        let (width, height) = (decoded.width(), decoded.height());
        let grayscale = !decoded.color().has_color();
        let (channels, pixels) = if grayscale {
            (1, decoded.to_luma32f().into_raw())
        } else {
            (3, decoded.to_rgb32f().into_raw())
        };
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(width, height, channels, pixels)
    }
}

/// Hex SHA-256 of encoded image bytes; `"none"` stands for a text-only request.
pub fn image_digest(png: Option<&[u8]>) -> String {
    match png {
        Some(bytes) => hex::encode(Sha256::digest(bytes)),
        None => "none".to_string(),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor, PerturbError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(PerturbError::FileNotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    ImageTensor::from_encoded(&bytes)
}

/// Intensity presets for the weak transforms. `Trans1` is the default recipe;
/// each step widens rotation by 5 degrees, lowers the crop floor by 5 % and
/// widens the brightness/contrast jitter by 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TransformPreset {
    #[default]
    Trans1,
    Trans2,
    Trans3,
    Trans4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakTransformConfig {
    pub crop_area_range: (f64, f64),
    pub rotation_range: (f64, f64),
    pub translate_max_frac: f64,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub enabled: bool,
}

impl Default for WeakTransformConfig {
    fn default() -> Self {
        Self::preset(TransformPreset::Trans1)
    }
}

impl WeakTransformConfig {
    pub fn preset(preset: TransformPreset) -> Self {
        let step = match preset {
            TransformPreset::Trans1 => 0.0,
            TransformPreset::Trans2 => 1.0,
            TransformPreset::Trans3 => 2.0,
            TransformPreset::Trans4 => 3.0,
        };
        let rotation = 10.0 + 5.0 * step;
        let jitter = 0.2 + 0.1 * step;
        Self {
            crop_area_range: (0.90 - 0.05 * step, 1.0),
            rotation_range: (-rotation, rotation),
            translate_max_frac: 0.10,
            brightness_range: (1.0 - jitter, 1.0 + jitter),
            contrast_range: (1.0 - jitter, 1.0 + jitter),
            enabled: true,
        }
    }

    /// Parameters that leave every image untouched.
    pub fn identity() -> Self {
        Self {
            crop_area_range: (1.0, 1.0),
            rotation_range: (0.0, 0.0),
            translate_max_frac: 0.0,
            brightness_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        let ranges = [
            ("crop_area_range", self.crop_area_range),
            ("rotation_range", self.rotation_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(PerturbError::InvalidConfig(format!("{name} ({lo}, {hi}) is empty")));
            }
        }
        let (lo, hi) = self.crop_area_range;
        if lo <= 0.0 || hi > 1.0 {
            return Err(PerturbError::InvalidConfig(format!("crop fractions ({lo}, {hi}) must lie in (0, 1]")));
        }
        if !(0.0..1.0).contains(&self.translate_max_frac) {
            return Err(PerturbError::InvalidConfig(format!(
                "translate_max_frac {} must lie in [0, 1)",
                self.translate_max_frac
            )));
        }
        if self.brightness_range.0 < 0.0 || self.contrast_range.0 < 0.0 {
            return Err(PerturbError::InvalidConfig("jitter factors must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One concrete draw of the weak-transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakTransformParams {
    pub crop_fraction: f64,
    /// Crop window origin in source pixels.
    pub crop_origin: (f64, f64),
    pub rotation_deg: f64,
    /// Translation in output pixels.
    pub translation: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

impl WeakTransformParams {
    pub fn draw(cfg: &WeakTransformConfig, width: u32, height: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let crop_fraction = uniform(&mut rng, cfg.crop_area_range);
        let side = crop_fraction.sqrt();
        let ox = uniform(&mut rng, (0.0, w - w * side));
        let oy = uniform(&mut rng, (0.0, h - h * side));
        let rotation_deg = uniform(&mut rng, cfg.rotation_range);
        let t = cfg.translate_max_frac;
        let tx = uniform(&mut rng, (-t * w, t * w));
        let ty = uniform(&mut rng, (-t * h, t * h));
        let brightness = uniform(&mut rng, cfg.brightness_range);
        let contrast = uniform(&mut rng, cfg.contrast_range);
        Self {
            crop_fraction,
            crop_origin: (ox, oy),
            rotation_deg,
            translation: (tx, ty),
            brightness,
            contrast,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.crop_fraction == 1.0
            && self.crop_origin == (0.0, 0.0)
            && self.rotation_deg == 0.0
            && self.translation == (0.0, 0.0)
    }
}

/// Apply a freshly drawn weak transform. Output keeps the input shape; the
/// crop window is resampled back to full size with bilinear interpolation and
/// exposed borders replicate the nearest edge pixel.
pub fn apply_weak_transform(
    img: &ImageTensor,
    cfg: &WeakTransformConfig,
    seed: u64,
) -> Result<ImageTensor, PerturbError> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(img.clone());
    }
    let params = WeakTransformParams::draw(cfg, img.width, img.height, seed);
    Ok(apply_params(img, &params))
}

pub fn apply_params(img: &ImageTensor, params: &WeakTransformParams) -> ImageTensor {
    let mut out = if params.is_geometric_identity() {
        img.clone()
    } else {
        resample(img, params)
    };
    if params.brightness != 1.0 {
        for v in &mut out.pixels {
            *v = (*v as f64 * params.brightness).clamp(0.0, 1.0) as f32;
        }
    }
    if params.contrast != 1.0 {
        let mean = out.pixels.iter().map(|&v| v as f64).sum::<f64>() / out.pixels.len() as f64;
        for v in &mut out.pixels {
            *v = ((*v as f64 - mean) * params.contrast + mean).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn resample(img: &ImageTensor, params: &WeakTransformParams) -> ImageTensor {
    let (w, h) = (img.width as usize, img.height as usize);
    let channels = img.channels as usize;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
    let side = params.crop_fraction.sqrt();
    let (ox, oy) = params.crop_origin;
    let (tx, ty) = params.translation;

    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            // Output -> undo translation -> undo rotation -> crop window.
            let dx = x as f64 - tx - cx;
            let dy = y as f64 - ty - cy;
            let rx = cos * dx + sin * dy + cx;
            let ry = -sin * dx + cos * dy + cy;
            let u = ox + (rx + 0.5) * side - 0.5;
            let v = oy + (ry + 0.5) * side - 0.5;
            for c in 0..channels {
                pixels.push(bilinear(img, u, v, c));
            }
        }
    }
    ImageTensor {
        width: img.width,
        height: img.height,
        channels: img.channels,
        pixels,
    }
}

fn bilinear(img: &ImageTensor, u: f64, v: f64, c: usize) -> f32 {
    let max_x = img.width as f64 - 1.0;
    let max_y = img.height as f64 - 1.0;
    let u = u.clamp(0.0, max_x);
    let v = v.clamp(0.0, max_y);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(img.width as usize - 1);
    let y1 = (y0 + 1).min(img.height as usize - 1);
    let value = (1.0 - fx) * (1.0 - fy) * img.at(x0, y0, c) as f64
        + fx * (1.0 - fy) * img.at(x1, y0, c) as f64
        + (1.0 - fx) * fy * img.at(x0, y1, c) as f64
        + fx * fy * img.at(x1, y1, c) as f64;
    value.clamp(0.0, 1.0) as f32
}

/// Noise intensity presets: Gaussian std 0.03/0.05/0.07/0.09 paired with
/// Poisson scale 30/50/70/90.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoisePreset {
    Noise1,
    Noise2,
    #[default]
    Noise3,
    Noise4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    pub gaussian_std: f64,
    pub poisson_scale: f64,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            gaussian_std: 0.07,
            poisson_scale: 70.0,
        }
    }
}

impl DistortionConfig {
    pub fn preset(preset: NoisePreset) -> Self {
        let (gaussian_std, poisson_scale) = match preset {
            NoisePreset::Noise1 => (0.03, 30.0),
            NoisePreset::Noise2 => (0.05, 50.0),
            NoisePreset::Noise3 => (0.07, 70.0),
            NoisePreset::Noise4 => (0.09, 90.0),
        };
        Self { gaussian_std, poisson_scale }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(self.gaussian_std >= 0.0 && self.gaussian_std.is_finite()) {
            return Err(PerturbError::InvalidConfig(format!("gaussian_std {} must be >= 0", self.gaussian_std)));
        }
        if !(self.poisson_scale > 0.0 && self.poisson_scale.is_finite()) {
            return Err(PerturbError::InvalidConfig(format!("poisson_scale {} must be > 0", self.poisson_scale)));
        }
        Ok(())
    }
}

/// `clamp(Poisson(v * scale) / scale + N(0, std), 0, 1)` per channel value.
pub fn apply_distortion(img: &ImageTensor, cfg: &DistortionConfig, seed: u64) -> Result<ImageTensor, PerturbError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = if cfg.gaussian_std > 0.0 {
        Some(Normal::new(0.0, cfg.gaussian_std).map_err(|e| PerturbError::InvalidConfig(e.to_string()))?)
    } else {
        None
    };
    let pixels = img
        .pixels
        .iter()
        .map(|&v| {
            let lambda = v as f64 * cfg.poisson_scale;
            let shot = if lambda > 0.0 {
                let poisson = Poisson::new(lambda).expect("positive finite rate");
                let count: f64 = poisson.sample(&mut rng);
                count / cfg.poisson_scale
            } else {
                0.0
            };
            let noise = gaussian.as_ref().map_or(0.0, |g| g.sample(&mut rng));
            (shot + noise).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(ImageTensor {
        width: img.width,
        height: img.height,
        channels: img.channels,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32, channels: u8) -> ImageTensor {
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    let v = (x as f32 + 2.0 * y as f32 + c as f32) / (w as f32 + 2.0 * h as f32 + 3.0);
                    pixels.push(v);
                }
            }
        }
        ImageTensor::new(w, h, channels, pixels).unwrap()
    }

    fn write_png(dir: &Path, name: &str, img: &ImageTensor) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, img.to_png()).unwrap();
        path
    }

    #[test]
    fn loads_black_and_white_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let black = write_png(dir.path(), "black.png", &ImageTensor::constant(2, 2, 1, 0.0).unwrap());
        let white = write_png(dir.path(), "white.png", &ImageTensor::constant(2, 2, 3, 1.0).unwrap());
        let b = load_image(&black).unwrap();
        assert_eq!(b.channels(), 1);
        assert!(b.pixels().iter().all(|&v| v == 0.0));
        let w = load_image(&white).unwrap();
        assert_eq!(w.channels(), 3);
        assert!(w.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.png");
        assert!(matches!(load_image(&missing), Err(PerturbError::FileNotFound(_))));

        let png = gradient(16, 16, 3).to_png();
        let truncated = dir.path().join("truncated.png");
        std::fs::write(&truncated, &png[..png.len() / 2]).unwrap();
        assert!(matches!(load_image(&truncated), Err(PerturbError::CorruptImage(_))));

        let text = dir.path().join("notes.png");
        std::fs::write(&text, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&text), Err(PerturbError::UnsupportedFormat(_))));
    }

    #[test]
    fn identity_transform_is_exact() {
        let img = gradient(9, 7, 3);
        let out = apply_weak_transform(&img, &WeakTransformConfig::identity(), 42).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn brightness_scales_pointwise() {
        let img = ImageTensor::constant(5, 5, 1, 0.5).unwrap();
        let cfg = WeakTransformConfig {
            brightness_range: (1.2, 1.2),
            ..WeakTransformConfig::identity()
        };
        let out = apply_weak_transform(&img, &cfg, 3).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn weak_transform_is_seeded() {
        let img = gradient(24, 24, 1);
        let cfg = WeakTransformConfig::default();
        let a = apply_weak_transform(&img, &cfg, 11).unwrap();
        let b = apply_weak_transform(&img, &cfg, 11).unwrap();
        assert_eq!(a.to_png(), b.to_png());
        let c = apply_weak_transform(&img, &cfg, 12).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn disabled_transform_passes_through() {
        let img = gradient(6, 6, 1);
        let cfg = WeakTransformConfig {
            enabled: false,
            ..WeakTransformConfig::default()
        };
        assert_eq!(apply_weak_transform(&img, &cfg, 1).unwrap(), img);
    }

    #[test]
    fn invalid_weak_configs_rejected() {
        let img = gradient(4, 4, 1);
        let bad = [
            WeakTransformConfig { crop_area_range: (0.0, 1.0), ..Default::default() },
            WeakTransformConfig { crop_area_range: (0.9, 1.1), ..Default::default() },
            WeakTransformConfig { rotation_range: (5.0, -5.0), ..Default::default() },
            WeakTransformConfig { translate_max_frac: 1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(apply_weak_transform(&img, &cfg, 0), Err(PerturbError::InvalidConfig(_))));
        }
    }

    #[test]
    fn presets_widen_monotonically() {
        let presets = [
            TransformPreset::Trans1,
            TransformPreset::Trans2,
            TransformPreset::Trans3,
            TransformPreset::Trans4,
        ]
        .map(WeakTransformConfig::preset);
        assert_eq!(presets[0], WeakTransformConfig::default());
        assert_eq!(presets[0].rotation_range, (-10.0, 10.0));
        assert_eq!(presets[0].crop_area_range, (0.9, 1.0));
        for pair in presets.windows(2) {
            assert!(pair[1].rotation_range.1 > pair[0].rotation_range.1);
            assert!(pair[1].crop_area_range.0 < pair[0].crop_area_range.0);
            assert!(pair[1].brightness_range.1 > pair[0].brightness_range.1);
        }
        assert_eq!(DistortionConfig::preset(NoisePreset::Noise3), DistortionConfig::default());
        assert_eq!(DistortionConfig::preset(NoisePreset::Noise1).poisson_scale, 30.0);
        assert_eq!(DistortionConfig::preset(NoisePreset::Noise4).gaussian_std, 0.09);
    }

    #[test]
    fn vanishing_noise_limit() {
        let img = ImageTensor::constant(10, 10, 1, 0.5).unwrap();
        let cfg = DistortionConfig { gaussian_std: 0.0, poisson_scale: 1e6 };
        let out = apply_distortion(&img, &cfg, 5).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.5).abs() < 0.01));
    }

    #[test]
    fn default_noise_is_zero_mean_on_midgray() {
        let img = ImageTensor::constant(40, 25, 1, 0.5).unwrap();
        for seed in 0..20 {
            let out = apply_distortion(&img, &DistortionConfig::default(), seed).unwrap();
            let mean = out.pixels().iter().map(|&v| v as f64).sum::<f64>() / 1000.0;
            assert!((mean - 0.5).abs() < 0.02, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn distortion_is_seeded() {
        let img = gradient(8, 8, 3);
        let a = apply_distortion(&img, &DistortionConfig::default(), 9).unwrap();
        let b = apply_distortion(&img, &DistortionConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        assert!(apply_distortion(&img, &DistortionConfig { gaussian_std: -0.1, poisson_scale: 70.0 }, 0).is_err());
        assert!(apply_distortion(&img, &DistortionConfig { gaussian_std: 0.1, poisson_scale: 0.0 }, 0).is_err());
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let img = gradient(5, 3, 3);
        let back = ImageTensor::from_encoded(&img.to_png()).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_image() -> impl Strategy<Value = ImageTensor> {
            (1u32..12, 1u32..12, prop_oneof![Just(1u8), Just(3u8)]).prop_flat_map(|(w, h, c)| {
                proptest::collection::vec(0.0f32..=1.0, (w * h * c as u32) as usize)
                    .prop_map(move |px| ImageTensor::new(w, h, c, px).unwrap())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn transforms_preserve_shape_and_range(img in arb_image(), seed in any::<u64>(), preset in 0usize..4) {
                let preset = [TransformPreset::Trans1, TransformPreset::Trans2, TransformPreset::Trans3, TransformPreset::Trans4][preset];
                let weak = apply_weak_transform(&img, &WeakTransformConfig::preset(preset), seed).unwrap();
                let noisy = apply_distortion(&img, &DistortionConfig::default(), seed).unwrap();
                for out in [&weak, &noisy] {
                    prop_assert_eq!((out.width(), out.height(), out.channels()), (img.width(), img.height(), img.channels()));
                    prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
                }
                prop_assert_eq!(weak, apply_weak_transform(&img, &WeakTransformConfig::preset(preset), seed).unwrap());
                prop_assert_eq!(noisy, apply_distortion(&img, &DistortionConfig::default(), seed).unwrap());
            }

            #[test]
            fn identity_config_is_exact(img in arb_image(), seed in any::<u64>()) {
                prop_assert_eq!(apply_weak_transform(&img, &WeakTransformConfig::identity(), seed).unwrap(), img);
            }
        }
    }
}
