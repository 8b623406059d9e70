//! Deterministic synthetic scene datasets for desk-scale training.
//!
//! A visual example of class `c` shows texture `c` (oriented stripes, checker,
//! vertical or horizontal bars) in a small high-contrast patch, and a decoy
//! texture in a larger, fainter patch in the other half of the image. Global
//! pooling sees mostly the decoy; the most intense cells sit on the class
//! patch. Audio class `c` is a cluster of partials in mel region `c` of
//! `classes` equal regions, shaped by one of four temporal envelopes.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{hz_to_mel, mel_to_hz, AudioClip};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::input;
use crate::model::{AgcnConfig, Modality};
use crate::tensor::Tensor;
use crate::train::Dataset;

pub const SYNTH_SAMPLE_RATE: u32 = 16_000;
/// Audio clip length giving 101 frames at hop 400.
pub const SYNTH_AUDIO_SAMPLES: usize = 40_000;
pub const SYNTH_AUDIO_MELS: usize = 32;
pub const SYNTH_IMAGE_SIZE: usize = 48;
const SALIENT_PATCH: i64 = 16;
const DECOY_PATCH: i64 = 24;

/// One generated example before conversion to a network input.
#[derive(Clone, Debug, PartialEq)]
pub enum SynthItem {
    Image(RgbImage),
    Clip(AudioClip),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub label: usize,
    pub item: SynthItem,
}

/// Largest class count a synthetic task supports.
pub fn max_classes(kind: Modality) -> usize {
    match kind {
        Modality::Visual => 4,
        Modality::Audio => 8,
    }
}

fn check_classes(kind: Modality, classes: usize) -> Result<()> {
    let max = max_classes(kind);
    if !(2..=max).contains(&classes) {
        return Err(Error::config(format!("synthetic {} tasks support 2..={max} classes, got {classes}", kind.as_str())));
    }
    Ok(())
}

/// Balanced labels: sample `i` has class `i % classes`.
pub fn synth_samples(kind: Modality, classes: usize, n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    check_classes(kind, classes)?;
    Ok((0..n)
        .map(|i| {
            let label = i % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let item = match kind {
                Modality::Visual => SynthItem::Image(visual_example(label, &mut rng)),
                Modality::Audio => SynthItem::Clip(audio_example(label, classes, &mut rng)),
            };
            SynthSample { label, item }
        })
        .collect())
}

fn texture(kind: usize, x: f64, y: f64, period: f64, phase: f64, theta: f64) -> f64 {
    match kind {
        0 => (2.0 * PI * (x * theta.cos() + y * theta.sin()) / period + phase).sin(),
        1 => (2.0 * PI * x / period + phase).sin() * (2.0 * PI * y / period + phase).sin(),
        2 => (2.0 * PI * x / period + phase).sin(),
        _ => (2.0 * PI * y / period + phase).sin(),
    }
}

/// Class texture in a small high-contrast patch; a decoy texture covers a
/// larger patch at lower contrast in the other half of the image.
fn visual_example(label: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = SYNTH_IMAGE_SIZE as i64;
    let (small, large) = (SALIENT_PATCH, DECOY_PATCH);
    let scale = rng.random_range(0.6..1.4);
    let (a_small, a_large) = (0.4 * scale, 0.15 * scale);
    let decoy = (label + rng.random_range(1..4)) % 4;
    let half = s / 2;
    let vertical = rng.random_bool(0.5);
    let decoy_first = rng.random_bool(0.5);
    let mut place = |size: i64, first: bool| -> (i64, i64) {
        let (lo, hi) = if first { (0, half - size) } else { (half, s - size) };
        let along = rng.random_range(lo..=hi.max(lo));
        let across = rng.random_range(0..=s - size);
        if vertical { (along, across) } else { (across, along) }
    };
    let (bx, by) = place(large, decoy_first);
    let (dx, dy) = place(small, !decoy_first);
    let phase = rng.random_range(0.0..2.0 * PI);
    let period = rng.random_range(4.0..6.0);
    let mut img = RgbImage::new(s as usize, s as usize, [0, 0, 0]);
    for y in 0..s {
        for x in 0..s {
            let (fx, fy) = (x as f64, y as f64);
            let t = if (dx..dx + small).contains(&x) && (dy..dy + small).contains(&y) {
                a_small * texture(label, fx, fy, period, phase, PI / 4.0)
            } else if (bx..bx + large).contains(&x) && (by..by + large).contains(&y) {
                a_large * texture(decoy, fx, fy, period, phase, PI / 4.0)
            } else {
                0.0
            };
            let rgb: [u8; 3] = std::array::from_fn(|_| {
                let noise = rng.random_range(-0.1..0.1);
                ((0.5 + t + noise).clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put(x, y, rgb);
        }
    }
    img
}

fn envelope(kind: usize, t: f64) -> f64 {
    match kind {
        0 => 1.0,
        1 => t,
        2 => 1.0 - t,
        _ => 0.5 + 0.5 * (2.0 * PI * 4.0 * t).sin(),
    }
}

fn audio_example(label: usize, classes: usize, rng: &mut ChaCha8Rng) -> AudioClip {
    let sr = SYNTH_SAMPLE_RATE as f64;
    let (lo_mel, hi_mel) = (hz_to_mel(100.0), hz_to_mel(sr / 2.0 - 500.0));
    let width = (hi_mel - lo_mel) / classes as f64;
    let band_lo = mel_to_hz(lo_mel + width * label as f64);
    let band_hi = mel_to_hz(lo_mel + width * (label as f64 + 1.0));
    let partials: Vec<(f64, f64)> = (0..24)
        .map(|_| (rng.random_range(band_lo..band_hi), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let len = SYNTH_AUDIO_SAMPLES;
    let env = label % 4;
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = partials.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() / 24.0;
            0.5 * envelope(env, i as f64 / len as f64) * tone + rng.random_range(-0.02..0.02)
        })
        .collect();
    AudioClip { samples, sample_rate: SYNTH_SAMPLE_RATE }
}

/// Network input for a sample under [`synth_config`].
pub fn sample_to_input(sample: &SynthSample, config: &AgcnConfig) -> Result<Tensor> {
    match &sample.item {
        SynthItem::Image(img) => input::image_to_input(img, config),
        SynthItem::Clip(clip) => input::clip_to_input(clip, config),
    }
}

/// Network-ready synthetic dataset for [`synth_config`].
pub fn synth_dataset(kind: Modality, classes: usize, n: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_for(&synth_config(kind, classes), n, seed)
}

/// Synthetic dataset of `config.modality` and `config.num_classes`, converted
/// to the input size of `config`.
pub fn synth_dataset_for(config: &AgcnConfig, n: usize, seed: u64) -> Result<Dataset> {
    let samples = synth_samples(config.modality, config.num_classes, n, seed)?;
    let inputs = samples.iter().map(|s| sample_to_input(s, config)).collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, samples.iter().map(|s| s.label).collect(), config.num_classes)
}

/// Tiny model config whose input shape matches [`synth_dataset`].
pub fn synth_config(kind: Modality, classes: usize) -> AgcnConfig {
    let mut cfg = AgcnConfig::tiny(kind, classes);
    match kind {
        Modality::Visual => (cfg.input_h, cfg.input_w) = (SYNTH_IMAGE_SIZE, SYNTH_IMAGE_SIZE),
        Modality::Audio => (cfg.input_h, cfg.input_w) = (1 + SYNTH_AUDIO_SAMPLES / 400, SYNTH_AUDIO_MELS),
    }
    cfg
}
