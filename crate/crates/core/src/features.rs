//! Mono PCM audio to normalized log-mel frames.
//!
//! Frames are 25 ms Hann-windowed slices taken every 10 ms, transformed to a
//! power spectrum and projected onto triangular mel filters (HTK mel scale,
//! 0 Hz to Nyquist). The log is floored so silence stays finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Reads a 16-bit mono PCM WAV file.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Invalid(format!(
            "{}: expected 16-bit mono PCM, found {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM, clipping to the representable range.
pub fn write_wav(path: &Path, audio: &AudioBuffer) -> Result<()> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &audio.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub num_mel_bins: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub fft_size: usize,
    /// Power floor applied before the log.
    pub floor_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, num_mel_bins: 80, frame_length_ms: 25.0, frame_shift_ms: 10.0, fft_size: 512, floor_eps: 1e-10 }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (f64::from(self.sample_rate) * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (f64::from(self.sample_rate) * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// Number of frames produced for `num_samples` input samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let window = self.window_samples();
        if num_samples < window {
            0
        } else {
            (num_samples - window) / self.hop_samples() + 1
        }
    }

    pub fn frames_per_second(&self) -> f64 {
        1000.0 / self.frame_shift_ms
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the one-sided power spectrum.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `num_mel_bins × (fft_size/2 + 1)`, row-major.
    weights: Vec<f64>,
    num_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let num_bins = cfg.fft_size / 2 + 1;
        let nyquist = f64::from(cfg.sample_rate) / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> =
            (0..cfg.num_mel_bins + 2).map(|i| mel_to_hz(top * i as f64 / (cfg.num_mel_bins + 1) as f64)).collect();
        let bin_hz = f64::from(cfg.sample_rate) / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.num_mel_bins * num_bins];
        for m in 0..cfg.num_mel_bins {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..num_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * num_bins + k] = w;
            }
        }
        Self { weights, num_bins, centers_hz: edges[1..=cfg.num_mel_bins].to_vec() }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, power: &[f64], out: &mut [f32], floor: f64) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.num_bins..(m + 1) * self.num_bins];
            let e: f64 = row.iter().zip(power).map(|(w, p)| w * p).sum();
            *o = e.max(floor).ln() as f32;
        }
    }
}

/// Per-utterance `T × F` log-mel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFrames {
    values: Vec<f32>,
    num_frames: usize,
    dim: usize,
}

impl LogMelFrames {
    pub fn new(values: Vec<f32>, num_frames: usize, dim: usize) -> Result<Self> {
        if values.len() != num_frames * dim {
            return Err(Error::Shape(format!("{} values cannot form {num_frames}×{dim} frames", values.len())));
        }
        Ok(Self { values, num_frames, dim })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([self.num_frames, self.dim], self.values.clone()).expect("consistent by construction")
    }

    /// Frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let values = self.values[start * self.dim..(start + len) * self.dim].to_vec();
        Self { values, num_frames: len, dim: self.dim }
    }
}

/// Log-mel front end with a planned FFT.
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        let window_len = cfg.window_samples();
        if cfg.fft_size < window_len {
            return Err(Error::Config(format!("fft_size {} shorter than the {window_len}-sample window", cfg.fft_size)));
        }
        if cfg.hop_samples() == 0 || window_len == 0 || cfg.num_mel_bins == 0 {
            return Err(Error::Config("window, hop and mel bin count must be positive".into()));
        }
        // periodic Hann
        let window = (0..window_len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window_len as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { filterbank: MelFilterbank::new(&cfg), cfg, window, fft })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, audio: &AudioBuffer) -> Result<LogMelFrames> {
        if audio.sample_rate() != self.cfg.sample_rate {
            return Err(Error::SampleRate { got: audio.sample_rate(), expected: self.cfg.sample_rate });
        }
        let window = self.cfg.window_samples();
        let hop = self.cfg.hop_samples();
        let num_frames = self.cfg.num_frames(audio.samples().len());
        if num_frames == 0 {
            return Err(Error::AudioTooShort {
                got: audio.samples().len(),
                need: window,
                need_ms: self.cfg.frame_length_ms,
            });
        }
        let dim = self.cfg.num_mel_bins;
        let num_bins = self.cfg.fft_size / 2 + 1;
        let mut values = vec![0f32; num_frames * dim];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; num_bins];
        for t in 0..num_frames {
            let frame = &audio.samples()[t * hop..t * hop + window];
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < window { f64::from(frame[i]) * self.window[i] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut values[t * dim..(t + 1) * dim], self.cfg.floor_eps);
        }
        LogMelFrames::new(values, num_frames, dim)
    }
}

/// Per-dimension normalization statistics, frozen once computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub num_frames_used: usize,
}

pub const STD_FLOOR: f64 = 1e-5;

/// Population mean and standard deviation over every frame of the sample.
pub fn compute_feature_stats<'a>(corpus_sample: impl IntoIterator<Item = &'a LogMelFrames>) -> Result<FeatureStats> {
    let mut dim = None;
    let mut count = 0usize;
    let mut sum = Vec::new();
    let mut sumsq = Vec::new();
    for frames in corpus_sample {
        let d = *dim.get_or_insert(frames.dim());
        if d != frames.dim() {
            return Err(Error::Shape(format!("feature dimension {} vs {d}", frames.dim())));
        }
        if sum.is_empty() {
            sum = vec![0f64; d];
            sumsq = vec![0f64; d];
        }
        for t in 0..frames.num_frames() {
            for (i, &v) in frames.frame(t).iter().enumerate() {
                sum[i] += f64::from(v);
                sumsq[i] += f64::from(v) * f64::from(v);
            }
        }
        count += frames.num_frames();
    }
    if count == 0 {
        return Err(Error::Invalid("feature statistics need at least one frame".into()));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sumsq.iter().zip(&mean).map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR) as f32).collect();
    Ok(FeatureStats { mean: mean.iter().map(|&m| m as f32).collect(), std, num_frames_used: count })
}

impl FeatureStats {
    fn check(&self, frames: &LogMelFrames) -> Result<()> {
        if frames.dim() != self.mean.len() {
            return Err(Error::Shape(format!(
                "frames have {} dimensions, statistics have {}",
                frames.dim(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, frames: &LogMelFrames) -> Result<LogMelFrames> {
        self.check(frames)?;
        let d = frames.dim();
        let values = frames.values().iter().enumerate().map(|(i, &v)| (v - self.mean[i % d]) / self.std[i % d]).collect();
        LogMelFrames::new(values, frames.num_frames(), d)
    }

    pub fn denormalize(&self, frames: &LogMelFrames) -> Result<LogMelFrames> {
        self.check(frames)?;
        let d = frames.dim();
        let values = frames.values().iter().enumerate().map(|(i, &v)| v * self.std[i % d] + self.mean[i % d]).collect();
        LogMelFrames::new(values, frames.num_frames(), d)
    }
}

/// Writes frames as `T: i32 LE, F: i32 LE` followed by row-major `f32 LE` values.
pub fn write_feature_file(path: &Path, frames: &LogMelFrames) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&(frames.num_frames() as i32).to_le_bytes()).map_err(io)?;
    w.write_all(&(frames.dim() as i32).to_le_bytes()).map_err(io)?;
    for v in frames.values() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_feature_file(path: &Path) -> Result<LogMelFrames> {
    let io = |e| Error::io(path, e);
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io)?).read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() < 8 {
        return Err(Error::Invalid(format!("{}: truncated feature header", path.display())));
    }
    let t = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let f = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if t < 0 || f < 0 || bytes.len() != 8 + 4 * (t as usize) * (f as usize) {
        return Err(Error::Invalid(format!("{}: header {t}×{f} does not match payload size", path.display())));
    }
    let values = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    LogMelFrames::new(values, t as usize, f as usize)
}
