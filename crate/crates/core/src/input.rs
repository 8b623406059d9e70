//! Turning files into network inputs of the shape a config expects.
//!
//! Audio becomes a per-clip standardized log-Mel map `[1,T,M]`; images are
//! resized to `[3,H,W]` and mapped from `[0,1]` by `(x - 0.5) / 0.25`.

use std::path::Path;

use crate::audio::{self, AudioClip, LogMelConfig};
use crate::error::{Error, Result};
use crate::image::{self, RgbImage};
use crate::model::{AgcnConfig, Modality};
use crate::tensor::Tensor;

/// Sample rate every clip is resampled to before feature extraction.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_SCALE: f64 = 0.25;

/// Log-Mel settings producing `input_h` frames of `input_w` bands.
pub fn logmel_config_for(config: &AgcnConfig) -> LogMelConfig {
    LogMelConfig { n_mels: config.input_w, ..LogMelConfig::default() }
}

/// Clip length in seconds that yields `config.input_h` frames.
pub fn clip_seconds_for(config: &AgcnConfig) -> f64 {
    let hop = logmel_config_for(config).hop;
    (config.input_h.saturating_sub(1) * hop) as f64 / TARGET_SAMPLE_RATE as f64
}

/// Zero mean, unit variance over the whole tensor.
pub fn standardize(mut t: Tensor) -> Tensor {
    let n = t.numel() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-12);
    t.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * inv);
    t
}

/// Raw log-Mel map `[1,T,M]` of a clip, sized for `config`.
pub fn clip_features(clip: &AudioClip, config: &AgcnConfig) -> Result<Tensor> {
    let spec = audio::preprocess(clip, clip_seconds_for(config), logmel_config_for(config))?;
    if spec.values.shape() != config.input_shape() {
        return Err(Error::config(format!(
            "log-Mel shape {:?} does not match configured input {:?}",
            spec.values.shape(),
            config.input_shape()
        )));
    }
    Ok(spec.values)
}

pub fn clip_to_input(clip: &AudioClip, config: &AgcnConfig) -> Result<Tensor> {
    Ok(standardize(clip_features(clip, config)?))
}

/// Image tensor `[3,H,W]` in `[0,1]`, resized for `config`.
pub fn image_features(img: &RgbImage, config: &AgcnConfig) -> Result<Tensor> {
    image::resize_chw(&img.to_tensor(), config.input_h, config.input_w)
}

pub fn normalize_pixels(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v = (*v - PIXEL_MEAN) / PIXEL_SCALE);
    t
}

pub fn image_to_input(img: &RgbImage, config: &AgcnConfig) -> Result<Tensor> {
    Ok(normalize_pixels(image_features(img, config)?))
}

/// Unnormalized features of a `.wav`, `.ppm` or `.pgm` file.
pub fn load_features(path: &Path, config: &AgcnConfig) -> Result<Tensor> {
    match config.modality {
        Modality::Audio => clip_features(&audio::load_wav(path)?, config),
        Modality::Visual => image_features(&image::load_pnm(path)?, config),
    }
}

/// Network-ready input for a file.
pub fn load_input(path: &Path, config: &AgcnConfig) -> Result<Tensor> {
    match config.modality {
        Modality::Audio => clip_to_input(&audio::load_wav(path)?, config),
        Modality::Visual => image_to_input(&image::load_pnm(path)?, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_second_clip_for_the_full_audio_config() {
        let cfg = AgcnConfig::full_audio(10);
        assert_eq!(clip_seconds_for(&cfg), 5.0);
        let clip = AudioClip::new((0..44_100).map(|i| (i as f64 * 0.01).sin()).collect(), 44_100).unwrap();
        let x = clip_to_input(&clip, &cfg).unwrap();
        assert_eq!(x.shape(), &[1, 201, 64]);
        assert!(x.data().iter().sum::<f64>().abs() < 1e-8);
    }

    #[test]
    fn images_are_resized_and_centered() {
        let cfg = AgcnConfig::tiny(Modality::Visual, 2);
        let img = RgbImage::new(10, 7, [128, 128, 128]);
        let x = image_to_input(&img, &cfg).unwrap();
        assert_eq!(x.shape(), &cfg.input_shape());
        assert!(x.data().iter().all(|v| (v - (128.0 / 255.0 - 0.5) / 0.25).abs() < 1e-12));
    }

    #[test]
    fn standardize_constant_is_finite() {
        let t = standardize(Tensor::full(&[1, 2, 2], 3.0));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}
