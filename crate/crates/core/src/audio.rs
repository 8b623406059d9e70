//! PCM WAV decoding, resampling and log-Mel spectrogram extraction.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor added before the logarithm so silence stays finite.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("audio clip has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode a RIFF/WAVE PCM16 byte buffer. Stereo is averaged to mono and
/// samples are scaled by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::data("not a RIFF/WAVE file (byte 0)"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::data(format!("truncated fmt chunk at byte {pos}")));
                }
                let tag = read_u16(bytes, body);
                let channels = read_u16(bytes, body + 2);
                let rate = read_u32(bytes, body + 4);
                let bits = read_u16(bytes, body + 14);
                if tag != 1 {
                    return Err(Error::data(format!("unsupported format tag {tag} at byte {body}, need PCM (1)")));
                }
                if bits != 16 {
                    return Err(Error::data(format!("unsupported bit depth {bits} at byte {}, need 16", body + 14)));
                }
                if !(1..=2).contains(&channels) {
                    return Err(Error::data(format!("unsupported channel count {channels} at byte {}", body + 2)));
                }
                if rate == 0 {
                    return Err(Error::data(format!("zero sample rate at byte {}", body + 4)));
                }
                format = Some((channels, rate));
            }
            b"data" => {
                let (channels, rate) =
                    format.ok_or_else(|| Error::data(format!("data chunk before fmt chunk at byte {pos}")))?;
                if body + size > bytes.len() {
                    return Err(Error::data(format!(
                        "data chunk at byte {pos} declares {size} bytes, file ends at byte {}",
                        bytes.len()
                    )));
                }
                let frame = 2 * channels as usize;
                if size % frame != 0 {
                    return Err(Error::data(format!("partial sample frame at byte {}", body + size - size % frame)));
                }
                let samples: Vec<f64> = bytes[body..body + size]
                    .chunks_exact(frame)
                    .map(|f| {
                        let sum: f64 = f
                            .chunks_exact(2)
                            .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                            .sum();
                        sum / channels as f64
                    })
                    .collect();
                return AudioClip::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::data(format!("no data chunk found before byte {}", bytes.len())))
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).context(path.display()))?;
    decode_wav(&bytes).map_err(|e| e.context(path.display()))
}

/// Encode mono PCM16, clamping to [-1, 1).
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let data_len = 2 * clip.samples.len();
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_wav(clip))?;
    Ok(())
}

/// Linear-interpolation resampling; output length is `round(len * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::config("target sample rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let len = clip.samples.len();
    let ratio = clip.sample_rate as f64 / target_rate as f64;
    let out_len = ((len as f64 * target_rate as f64 / clip.sample_rate as f64).round() as usize).max(1);
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = pos - i0 as f64;
            let (a, b) = (clip.samples[i0], clip.samples[i1]);
            if i1 == i0 { a } else { a + (b - a) * frac }
        })
        .collect();
    AudioClip::new(samples, target_rate)
}

/// Truncate or zero-pad at the end to `round(seconds * rate)` samples.
pub fn fix_length(clip: &AudioClip, seconds: f64) -> Result<AudioClip> {
    if !(seconds > 0.0) {
        return Err(Error::config(format!("target length must be positive, got {seconds}")));
    }
    let target = ((seconds * clip.sample_rate as f64).round() as usize).max(1);
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip::new(samples, clip.sample_rate)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogMelConfig {
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_fft: usize,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig { window: 1024, hop: 400, n_mels: 64, n_fft: 1024 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    /// `[1, frames, n_mels]`.
    pub values: Tensor,
    pub hop: usize,
    pub window: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
}

impl LogMelSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `n_mels + 2` HTK-mel-spaced edge frequencies from 0 Hz to Nyquist.
fn mel_edges(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect()
}

/// Peak frequency of each triangular filter.
pub fn mel_band_centers(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    mel_edges(sample_rate, n_mels)[1..=n_mels].to_vec()
}

/// Triangular HTK-mel filterbank, `n_mels` rows of `n_fft/2 + 1` weights,
/// each row normalized to unit sum.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Result<Vec<Vec<f64>>> {
    if n_mels == 0 || n_fft < 2 {
        return Err(Error::config(format!("invalid filterbank n_fft={n_fft}, n_mels={n_mels}")));
    }
    let edges = mel_edges(sample_rate, n_mels);
    let bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut rows = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row: Vec<f64> = (0..bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                }
            })
            .collect();
        let area: f64 = row.iter().sum();
        if area <= 0.0 {
            return Err(Error::config(format!(
                "mel band {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; use a larger n_fft or fewer mels"
            )));
        }
        row.iter_mut().for_each(|w| *w /= area);
        rows.push(row);
    }
    Ok(rows)
}

/// Mirror index without repeating the edge sample, periodic for any overhang.
fn reflect_index(q: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let r = q.rem_euclid(period);
    if r >= len as isize { (period - r) as usize } else { r as usize }
}

/// Periodic Hann window of `window` taps centred inside `n_fft`.
fn padded_hann(window: usize, n_fft: usize) -> Vec<f64> {
    let offset = (n_fft - window) / 2;
    let mut w = vec![0.0; n_fft];
    for i in 0..window {
        w[offset + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / window as f64).cos();
    }
    w
}

/// Reusable log-Mel extractor: FFT plan, window and filterbank are built once.
pub struct LogMelExtractor {
    config: LogMelConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(config: LogMelConfig, sample_rate: u32) -> Result<Self> {
        if config.hop == 0 {
            return Err(Error::config("hop must be at least 1"));
        }
        if config.window == 0 || config.window > config.n_fft {
            return Err(Error::config(format!(
                "window {} must be in 1..=n_fft ({})",
                config.window, config.n_fft
            )));
        }
        let filters = mel_filterbank(sample_rate, config.n_fft, config.n_mels)?;
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(LogMelExtractor { config, sample_rate, window: padded_hann(config.window, config.n_fft), filters, fft })
    }

    /// Number of frames produced for a clip of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        1 + len / self.config.hop
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<LogMelSpectrogram> {
        if clip.sample_rate != self.sample_rate {
            return Err(Error::config(format!(
                "extractor built for {} Hz, clip is {} Hz",
                self.sample_rate, clip.sample_rate
            )));
        }
        let len = clip.samples.len();
        if len == 0 {
            return Err(Error::data("clip shorter than one window after padding"));
        }
        let LogMelConfig { hop, n_fft, n_mels, .. } = self.config;
        let pad = (n_fft / 2) as isize;
        let frames = self.frames_for(len);
        let bins = n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; bins];
        let mut out = Vec::with_capacity(frames * n_mels);
        for t in 0..frames {
            let start = (t * hop) as isize - pad;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = clip.samples[reflect_index(start + i as isize, len)];
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            for row in &self.filters {
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push((e + LOG_FLOOR).ln());
            }
        }
        Ok(LogMelSpectrogram {
            values: Tensor::from_parts(vec![1, frames, n_mels], out),
            hop,
            window: self.config.window,
            n_mels,
            sample_rate: self.sample_rate,
        })
    }
}

/// Hann-windowed, reflect-padded STFT power projected onto a mel filterbank,
/// followed by `ln(x + 1e-10)`.
pub fn extract_logmel(clip: &AudioClip, config: LogMelConfig) -> Result<LogMelSpectrogram> {
    LogMelExtractor::new(config, clip.sample_rate)?.extract(clip)
}

/// The standard audio pipeline: resample to 16 kHz, fix to `seconds`, log-Mel.
pub fn preprocess(clip: &AudioClip, seconds: f64, config: LogMelConfig) -> Result<LogMelSpectrogram> {
    let clip = resample(clip, 16_000)?;
    let clip = fix_length(&clip, seconds)?;
    extract_logmel(&clip, config)
}
