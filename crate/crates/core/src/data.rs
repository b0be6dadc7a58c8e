//! Multilingual corpus handling: manifests, α-smoothed language sampling,
//! cropping into batches, and a synthetic multilingual corpus generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, AudioBuffer, FeatureStats, LogMelExtractor, LogMelFrames};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub language: String,
    pub duration_seconds: f64,
}

/// Utterance list with its derived, lexicographically sorted language set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    languages: Vec<String>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        for e in &entries {
            if !(e.duration_seconds > 0.0) {
                return Err(Error::Manifest(format!("{}: duration must be positive", e.path.display())));
            }
            if e.language.is_empty() || e.language.contains(char::is_whitespace) {
                return Err(Error::Manifest(format!("{}: invalid language code {:?}", e.path.display(), e.language)));
            }
        }
        let mut languages: Vec<String> = entries.iter().map(|e| e.language.clone()).collect();
        languages.sort();
        languages.dedup();
        Ok(Self { entries, languages })
    }

    /// Parses `path<TAB>language<TAB>duration_seconds` lines. Relative paths
    /// are resolved against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [p, lang, dur] = fields[..] else {
                return Err(Error::Manifest(format!(
                    "{}:{}: expected 3 tab-separated fields, found {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            };
            let duration_seconds = dur.trim().parse::<f64>().map_err(|e| {
                Error::Manifest(format!("{}:{}: bad duration {dur:?}: {e}", path.display(), lineno + 1))
            })?;
            let p = PathBuf::from(p);
            let p = if p.is_relative() { base.join(p) } else { p };
            entries.push(ManifestEntry { path: p, language: lang.to_string(), duration_seconds });
        }
        Self::new(entries)
    }

    /// Writes the manifest, storing paths relative to `root` where possible.
    pub fn save(&self, path: &Path, root: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(root).unwrap_or(&e.path);
            writeln!(out, "{}\t{}\t{}", p.display(), e.language, e.duration_seconds).expect("string write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn language_id(&self, code: &str) -> Option<usize> {
        self.languages.binary_search_by(|l| l.as_str().cmp(code)).ok()
    }

    /// Rejects manifests that cannot feed training: no entries or missing files.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Manifest("manifest has no utterances".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| !e.path.is_file()) {
            return Err(Error::Manifest(format!("unresolvable path {}", e.path.display())));
        }
        Ok(())
    }

    /// Total hours per language, in `languages()` order.
    pub fn hours_per_language(&self) -> Vec<f64> {
        let mut hours = vec![0.0; self.languages.len()];
        for e in &self.entries {
            hours[self.language_id(&e.language).expect("derived")] += e.duration_seconds / 3600.0;
        }
        hours
    }

    /// Keeps, per language, a seeded random selection of utterances whose
    /// total duration first reaches `minutes`. Returns the languages for
    /// which not enough audio was available (all of theirs is kept).
    pub fn subsample_minutes(&self, minutes: f64, seed: u64) -> Result<(Manifest, Vec<String>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kept = Vec::new();
        let mut short = Vec::new();
        for lang in &self.languages {
            let mut pool: Vec<&ManifestEntry> = self.entries.iter().filter(|e| &e.language == lang).collect();
            pool.shuffle(&mut rng);
            let mut total = 0.0;
            for e in pool {
                if total >= minutes * 60.0 {
                    break;
                }
                total += e.duration_seconds;
                kept.push(e.clone());
            }
            if total < minutes * 60.0 {
                short.push(lang.clone());
            }
        }
        Ok((Manifest::new(kept)?, short))
    }

    /// Seeded selection of at most `count` utterances per language.
    pub fn subsample_count(&self, count: usize, seed: u64) -> Result<Manifest> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kept = Vec::new();
        for lang in &self.languages {
            let mut pool: Vec<&ManifestEntry> = self.entries.iter().filter(|e| &e.language == lang).collect();
            pool.shuffle(&mut rng);
            kept.extend(pool.into_iter().take(count).cloned());
        }
        Manifest::new(kept)
    }
}

/// Multinomial language distribution `p_l ∝ (n_l / N)^α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution {
    probs: Vec<f64>,
    alpha: f64,
}

pub fn build_sampling_distribution(hours: &[f64], alpha: f64) -> Result<SamplingDistribution> {
    if hours.is_empty() {
        return Err(Error::Invalid("no languages to sample from".into()));
    }
    if let Some(h) = hours.iter().find(|h| !(**h > 0.0) || !h.is_finite()) {
        return Err(Error::Invalid(format!("language hours must be positive, got {h}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let total: f64 = hours.iter().sum();
    let weights: Vec<f64> = hours.iter().map(|h| (h / total).powf(alpha)).collect();
    let z: f64 = weights.iter().sum();
    Ok(SamplingDistribution { probs: weights.iter().map(|w| w / z).collect(), alpha })
}

impl SamplingDistribution {
    /// Explicit probabilities (zeros allowed), normalized.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let z: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| *p < 0.0 || !p.is_finite()) || !(z > 0.0) {
            return Err(Error::Invalid(format!("invalid probabilities {probs:?}")));
        }
        Ok(Self { probs: probs.iter().map(|p| p / z).collect(), alpha: 1.0 })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // floating-point slack: last language with nonzero mass
        self.probs.iter().rposition(|&p| p > 0.0).expect("some positive mass")
    }
}

/// Normalized features for every manifest entry, grouped by language.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    frames: Vec<LogMelFrames>,
    language_ids: Vec<usize>,
    utterance_ids: Vec<String>,
    languages: Vec<String>,
    by_language: Vec<Vec<usize>>,
}

/// Extracts raw log-mel frames for every entry, in manifest order.
pub fn extract_manifest(manifest: &Manifest, extractor: &LogMelExtractor) -> Result<Vec<LogMelFrames>> {
    manifest.entries().iter().map(|e| extractor.extract(&features::read_wav(&e.path)?)).collect()
}

impl FeatureSet {
    /// Groups already-normalized frames; `frames[i]` belongs to `manifest.entries()[i]`.
    /// `languages` fixes the id assignment (defaults to the manifest's own set).
    pub fn new(manifest: &Manifest, frames: Vec<LogMelFrames>, languages: Option<&[String]>) -> Result<Self> {
        if frames.len() != manifest.len() {
            return Err(Error::Invalid(format!("{} feature matrices for {} entries", frames.len(), manifest.len())));
        }
        if manifest.is_empty() {
            return Err(Error::Manifest("manifest has no utterances".into()));
        }
        let languages = languages.map_or_else(|| manifest.languages().to_vec(), <[String]>::to_vec);
        let mut by_language = vec![Vec::new(); languages.len()];
        let mut language_ids = Vec::with_capacity(frames.len());
        for (i, e) in manifest.entries().iter().enumerate() {
            let id = languages.iter().position(|l| l == &e.language).ok_or_else(|| {
                Error::Manifest(format!("language {:?} is not in the trained set {:?}", e.language, languages))
            })?;
            by_language[id].push(i);
            language_ids.push(id);
        }
        let utterance_ids = manifest
            .entries()
            .iter()
            .map(|e| e.path.file_stem().map_or_else(|| e.path.display().to_string(), |s| s.to_string_lossy().into()))
            .collect();
        Ok(Self { frames, language_ids, utterance_ids, languages, by_language })
    }

    /// Extracts and normalizes every entry. Without `stats`, statistics are
    /// computed from `stats_utterances` entries spread evenly over the
    /// manifest (0: all of them) and returned.
    pub fn load(
        manifest: &Manifest,
        extractor: &LogMelExtractor,
        stats: Option<&FeatureStats>,
        stats_utterances: usize,
        languages: Option<&[String]>,
    ) -> Result<(Self, FeatureStats)> {
        manifest.validate()?;
        let raw = extract_manifest(manifest, extractor)?;
        let stats = match stats {
            Some(s) => s.clone(),
            None => {
                let stride = match stats_utterances {
                    0 => 1,
                    n => raw.len().div_ceil(n).max(1),
                };
                features::compute_feature_stats(raw.iter().step_by(stride))?
            }
        };
        let normed = raw.iter().map(|f| stats.normalize(f)).collect::<Result<Vec<_>>>()?;
        Ok((Self::new(manifest, normed, languages)?, stats))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn frames(&self, i: usize) -> &LogMelFrames {
        &self.frames[i]
    }

    pub fn language_id(&self, i: usize) -> usize {
        self.language_ids[i]
    }

    pub fn utterance_id(&self, i: usize) -> &str {
        &self.utterance_ids[i]
    }

    pub fn utterances_of(&self, language: usize) -> &[usize] {
        &self.by_language[language]
    }

    /// Per-language hours implied by frame counts.
    pub fn hours_per_language(&self, frames_per_second: f64) -> Vec<f64> {
        self.by_language
            .iter()
            .map(|idx| idx.iter().map(|&i| self.frames[i].num_frames() as f64).sum::<f64>() / frames_per_second / 3600.0)
            .collect()
    }
}

/// Equal-length crops; slots shorter than the crop are zero-padded.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B × T_crop × F`.
    pub features: Tensor<f32>,
    pub valid_lengths: Vec<usize>,
    pub language_ids: Vec<usize>,
    pub utterance_ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.language_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.language_ids.is_empty()
    }

    pub fn crop_frames(&self) -> usize {
        self.features.shape()[1]
    }

    /// Valid (unpadded) frames of slot `b`.
    pub fn utterance(&self, b: usize) -> LogMelFrames {
        let (t, f) = (self.features.shape()[1], self.features.shape()[2]);
        let start = b * t * f;
        let values = self.features.data()[start..start + self.valid_lengths[b] * f].to_vec();
        LogMelFrames::new(values, self.valid_lengths[b], f).expect("consistent")
    }

    /// Whether frame `t` of slot `b` is padding.
    pub fn is_padding(&self, b: usize, t: usize) -> bool {
        t >= self.valid_lengths[b]
    }
}

/// Draws `batch_size` slots: language from `dist`, utterance uniformly within
/// the language, crop start uniformly over valid positions.
pub fn sample_batch(
    set: &FeatureSet,
    dist: &SamplingDistribution,
    batch_size: usize,
    crop_frames: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    if crop_frames == 0 || batch_size == 0 {
        return Err(Error::Invalid("batch size and crop length must be positive".into()));
    }
    if dist.probs().len() != set.languages().len() {
        return Err(Error::Invalid(format!(
            "distribution over {} languages, corpus has {}",
            dist.probs().len(),
            set.languages().len()
        )));
    }
    if let Some(l) = (0..set.languages().len()).find(|&l| dist.probs()[l] > 0.0 && set.utterances_of(l).is_empty()) {
        return Err(Error::Manifest(format!("language {} has no utterances", set.languages()[l])));
    }
    let dim = set.frames(0).dim();
    let mut data = vec![0f32; batch_size * crop_frames * dim];
    let mut valid_lengths = Vec::with_capacity(batch_size);
    let mut language_ids = Vec::with_capacity(batch_size);
    let mut utterance_ids = Vec::with_capacity(batch_size);
    for slot in 0..batch_size {
        let lang = dist.sample(rng);
        let pool = set.utterances_of(lang);
        let u = pool[rng.gen_range(0..pool.len())];
        let frames = set.frames(u);
        let (start, len) = if frames.num_frames() > crop_frames {
            (rng.gen_range(0..=frames.num_frames() - crop_frames), crop_frames)
        } else {
            (0, frames.num_frames())
        };
        let dst = &mut data[slot * crop_frames * dim..];
        dst[..len * dim].copy_from_slice(&frames.values()[start * dim..(start + len) * dim]);
        valid_lengths.push(len);
        language_ids.push(lang);
        utterance_ids.push(set.utterance_id(u).to_string());
    }
    Ok(Batch { features: Tensor::new([batch_size, crop_frames, dim], data)?, valid_lengths, language_ids, utterance_ids })
}

/// Codes assigned to synthetic languages, in generation order.
pub const LANGUAGE_CODES: [&str; 25] = [
    "en", "es", "ar", "id", "vi", "pt", "th", "hi", "it", "fr", "tr", "tl", "ur", "de", "zh", "ml", "bn", "ru", "my",
    "ms", "ta", "mr", "kn", "si", "ja",
];

pub fn language_code(index: usize) -> String {
    LANGUAGE_CODES.get(index).map_or_else(|| format!("x{index:02}"), |c| (*c).to_string())
}

/// Parameters of the synthetic multilingual corpus.
///
/// Each language owns a disjoint set of tone frequencies (interleaved on a
/// shared log-spaced grid) and a characteristic noise tilt. Utterances are
/// sequences of short tone bursts whose order follows a language-specific
/// first-order chain over the inventory: after tone `k` the next burst is
/// tone `k + 1` (cyclically) with probability `sequence_regularity`, and
/// any tone otherwise.
/// Every utterance additionally gets its own recording conditions: a
/// first-order channel filter and a background-noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub num_languages: usize,
    pub utterances_per_language: usize,
    pub duration_seconds: f64,
    pub seed: u64,
    pub sample_rate: u32,
    pub tones_per_language: usize,
    pub min_tone_hz: f64,
    pub max_tone_hz: f64,
    /// Largest magnitude of the per-utterance channel coefficient `c` in
    /// `y[n] = x[n] - c x[n-1]` (0 disables).
    pub channel_variation: f64,
    /// Background-noise gain is drawn from `[0.01, max_noise_gain]`.
    pub max_noise_gain: f64,
    pub sequence_regularity: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            num_languages: 5,
            utterances_per_language: 50,
            duration_seconds: 8.0,
            seed: 1,
            sample_rate: 16_000,
            tones_per_language: 4,
            min_tone_hz: 250.0,
            max_tone_hz: 5000.0,
            channel_variation: 0.9,
            max_noise_gain: 0.1,
            sequence_regularity: 0.8,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_languages == 0 {
            return Err(Error::Config("num_languages must be at least 1".into()));
        }
        if !(self.duration_seconds > 0.0) || self.tones_per_language == 0 || self.sample_rate == 0 {
            return Err(Error::Config("duration, tone count and sample rate must be positive".into()));
        }
        if !(self.min_tone_hz > 0.0 && self.min_tone_hz < self.max_tone_hz) {
            return Err(Error::Config("tone range must satisfy 0 < min < max".into()));
        }
        if !(0.0..=1.0).contains(&self.sequence_regularity) {
            return Err(Error::Config(format!("sequence_regularity must lie in [0, 1], got {}", self.sequence_regularity)));
        }
        if !(0.0..1.0).contains(&self.channel_variation) || !(self.max_noise_gain >= 0.01) {
            return Err(Error::Config("channel_variation must lie in [0, 1) and max_noise_gain be at least 0.01".into()));
        }
        if self.max_tone_hz * 1.05 >= f64::from(self.sample_rate) / 2.0 {
            return Err(Error::Config(format!("max tone {} Hz too close to Nyquist", self.max_tone_hz)));
        }
        Ok(())
    }

    /// Tone inventory of language `lang`: every `num_languages`-th point of the grid.
    pub fn tones(&self, lang: usize) -> Vec<f64> {
        let n = self.num_languages * self.tones_per_language;
        let ratio = if n > 1 { (self.max_tone_hz / self.min_tone_hz).powf(1.0 / (n - 1) as f64) } else { 1.0 };
        (0..self.tones_per_language).map(|k| self.min_tone_hz * ratio.powi((k * self.num_languages + lang) as i32)).collect()
    }

    /// One-pole coefficient of the language's background noise.
    pub fn tilt(&self, lang: usize) -> f64 {
        if self.num_languages == 1 {
            0.5
        } else {
            0.9 * lang as f64 / (self.num_languages - 1) as f64
        }
    }

    pub fn synthesize(&self, lang: usize, index: usize) -> Result<AudioBuffer> {
        let sr = f64::from(self.sample_rate);
        let n = (self.duration_seconds * sr).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((lang as u64) << 32) | index as u64);
        let tones = self.tones(lang);
        let tilt = self.tilt(lang);
        let noise_gain = rng.gen_range(0.01..=self.max_noise_gain);
        let channel = if self.channel_variation > 0.0 {
            rng.gen_range(-self.channel_variation..self.channel_variation)
        } else {
            0.0
        };
        let mut samples = vec![0f64; n];

        let mut prev = 0.0;
        for s in samples.iter_mut() {
            prev = tilt * prev + rng.gen_range(-1.0..1.0);
            *s = noise_gain * prev * (1.0 - tilt * tilt).sqrt();
        }

        let mut pos = rng.gen_range(0..(0.1 * sr) as usize);
        let mut current = rng.gen_range(0..tones.len());
        while pos < n {
            let len = rng.gen_range((0.06 * sr) as usize..(0.2 * sr) as usize);
            let voices = rng.gen_range(1..=2.min(tones.len()));
            for v in 0..voices {
                let k = if v == 0 { current } else { rng.gen_range(0..tones.len()) };
                let freq = tones[k] * rng.gen_range(0.98..1.02);
                let amp = rng.gen_range(0.08..0.3);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                for i in 0..len.min(n - pos) {
                    let env = (std::f64::consts::PI * i as f64 / len as f64).sin();
                    samples[pos + i] += amp * env * (std::f64::consts::TAU * freq * i as f64 / sr + phase).sin();
                }
            }
            current = if rng.gen_bool(self.sequence_regularity) {
                (current + 1) % tones.len()
            } else {
                rng.gen_range(0..tones.len())
            };
            pos += len + rng.gen_range(0..(0.05 * sr) as usize);
        }
        let mut prev = 0.0;
        for s in samples.iter_mut() {
            let x = *s;
            *s = (x - channel * prev) / (1.0 + channel.abs());
            prev = x;
        }
        AudioBuffer::new(samples.iter().map(|&s| s.clamp(-1.0, 1.0) as f32).collect(), self.sample_rate)
    }
}

/// Writes `<out>/<lang>/<lang>_<index>.wav` for every utterance plus
/// `<out>/manifest.tsv`, and returns the manifest.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for lang in 0..spec.num_languages {
        let code = language_code(lang);
        let dir = out_dir.join(&code);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.utterances_per_language {
            let audio = spec.synthesize(lang, i)?;
            let path = dir.join(format!("{code}_{i:04}.wav"));
            features::write_wav(&path, &audio)?;
            entries.push(ManifestEntry { path, language: code.clone(), duration_seconds: audio.duration_seconds() });
        }
    }
    let manifest = Manifest::new(entries)?;
    manifest.save(&out_dir.join("manifest.tsv"), out_dir)?;
    Ok(manifest)
}

/// Count of draws per language, for diagnostics.
pub fn language_histogram(ids: &[usize], num_languages: usize) -> Vec<usize> {
    let mut h = vec![0; num_languages];
    for &i in ids {
        h[i] += 1;
    }
    h
}

/// In-memory synthetic corpus: `(manifest with virtual paths, raw frames)`.
pub fn synthesize_features(spec: &SyntheticCorpusSpec, extractor: &LogMelExtractor) -> Result<(Manifest, Vec<LogMelFrames>)> {
    spec.validate()?;
    let mut entries = Vec::new();
    let mut frames = Vec::new();
    for lang in 0..spec.num_languages {
        let code = language_code(lang);
        for i in 0..spec.utterances_per_language {
            let audio = spec.synthesize(lang, i)?;
            frames.push(extractor.extract(&audio)?);
            entries.push(ManifestEntry {
                path: PathBuf::from(format!("{code}/{code}_{i:04}.wav")),
                language: code.clone(),
                duration_seconds: audio.duration_seconds(),
            });
        }
    }
    Ok((Manifest::new(entries)?, frames))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::features::FeatureConfig;

    #[test]
    fn sampling_distribution_examples() {
        let d = build_sampling_distribution(&[100.0, 100.0], 0.5).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
        let d = build_sampling_distribution(&[400.0, 100.0], 1.0).unwrap();
        assert!((d.probs()[0] - 0.8).abs() < 1e-12 && (d.probs()[1] - 0.2).abs() < 1e-12);
        let d = build_sampling_distribution(&[400.0, 100.0], 0.5).unwrap();
        // sqrt(0.8) : sqrt(0.2) = 2 : 1
        let (a, b) = (0.8f64.sqrt(), 0.2f64.sqrt());
        assert!((d.probs()[0] - a / (a + b)).abs() < 1e-12);
        assert!((d.probs()[0] - 2.0 / 3.0).abs() < 1e-12 && (d.probs()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_distribution_errors() {
        assert!(build_sampling_distribution(&[1.0, 0.0], 0.5).is_err());
        assert!(build_sampling_distribution(&[1.0, -2.0], 0.5).is_err());
        assert!(build_sampling_distribution(&[1.0, 2.0], 0.0).is_err());
        assert!(build_sampling_distribution(&[1.0, 2.0], 1.5).is_err());
    }

    #[test]
    fn flattening_is_monotone_in_alpha() {
        let hours = [900.0, 30.0, 120.0, 5.0];
        let mut last = f64::INFINITY;
        for alpha in [1.0, 0.8, 0.6, 0.4, 0.2, 0.05, 0.001] {
            let d = build_sampling_distribution(&hours, alpha).unwrap();
            let ratio = d.probs().iter().cloned().fold(0.0, f64::max) / d.probs().iter().cloned().fold(1.0, f64::min);
            assert!(ratio < last, "alpha {alpha}: {ratio} !< {last}");
            last = ratio;
        }
        assert!(last < 1.01, "near-uniform as alpha → 0");
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one_and_permute(hours in prop::collection::vec(0.01f64..1e4, 1..10), alpha in 0.01f64..=1.0) {
            let d = build_sampling_distribution(&hours, alpha).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(d.probs().iter().all(|&p| p > 0.0));
            let mut rev = hours.clone();
            rev.reverse();
            let r = build_sampling_distribution(&rev, alpha).unwrap();
            for (a, b) in d.probs().iter().zip(r.probs().iter().rev()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn toy_set(lens: &[(usize, &str)]) -> (Manifest, FeatureSet) {
        let entries = lens
            .iter()
            .enumerate()
            .map(|(i, (_, l))| ManifestEntry { path: format!("u{i}.wav").into(), language: l.to_string(), duration_seconds: 1.0 })
            .collect();
        let m = Manifest::new(entries).unwrap();
        let frames = lens
            .iter()
            .enumerate()
            .map(|(i, (t, _))| LogMelFrames::new((0..t * 2).map(|k| (i * 1000 + k + 1) as f32).collect(), *t, 2).unwrap())
            .collect();
        let set = FeatureSet::new(&m, frames, None).unwrap();
        (m, set)
    }

    #[test]
    fn batches_crop_pad_and_label() {
        let (_, set) = toy_set(&[(10, "aa"), (3, "aa"), (12, "bb")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single = SamplingDistribution::from_probs(vec![1.0, 0.0]).unwrap();
        for _ in 0..50 {
            let b = sample_batch(&set, &single, 4, 5, &mut rng).unwrap();
            assert_eq!(b.features.shape(), &[4, 5, 2]);
            assert!(b.language_ids.iter().all(|&l| l == 0));
            for slot in 0..4 {
                let valid = b.valid_lengths[slot];
                assert!(valid == 5 || valid == 3);
                for t in valid..5 {
                    assert!(b.is_padding(slot, t));
                    let row = &b.features.data()[(slot * 5 + t) * 2..(slot * 5 + t + 1) * 2];
                    assert_eq!(row, &[0.0, 0.0]);
                }
                // crop is a contiguous run of the source utterance
                let u = b.utterance(slot);
                for t in 1..u.num_frames() {
                    assert_eq!(u.frame(t)[0], u.frame(t - 1)[0] + 2.0);
                }
            }
        }
    }

    #[test]
    fn empirical_language_frequencies_follow_distribution() {
        let (_, set) = toy_set(&[(4, "aa"), (4, "bb")]);
        for (alpha, expected) in [(0.5, [2.0 / 3.0, 1.0 / 3.0]), (1.0, [0.8, 0.2])] {
            let dist = build_sampling_distribution(&[400.0, 100.0], alpha).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut ids = Vec::new();
            for _ in 0..1000 {
                ids.extend(sample_batch(&set, &dist, 30, 2, &mut rng).unwrap().language_ids);
            }
            let h = language_histogram(&ids, 2);
            for l in 0..2 {
                let f = h[l] as f64 / ids.len() as f64;
                assert!((f - expected[l]).abs() < 0.01, "alpha {alpha}: lang {l} freq {f}");
            }
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "b/x.wav\tzz\t2.5\na/y.wav\taa\t1\n").unwrap();
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.languages(), &["aa".to_string(), "zz".to_string()]);
        assert_eq!(m.entries()[0].path, dir.path().join("b/x.wav"));
        assert!(m.validate().is_err(), "files do not exist");
        fs::write(&p, "b/x.wav\tzz\n").unwrap();
        assert!(Manifest::load(&p).is_err());
        fs::write(&p, "b/x.wav\tzz\t0\n").unwrap();
        assert!(Manifest::load(&p).is_err());
        assert!(Manifest::default().validate().is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_separable() {
        let spec = SyntheticCorpusSpec { num_languages: 2, utterances_per_language: 6, duration_seconds: 2.0, ..Default::default() };
        for a in 0..2 {
            for b in 0..2 {
                if a != b {
                    assert!(spec.tones(a).iter().all(|f| !spec.tones(b).contains(f)));
                }
            }
        }
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&spec, d1.path()).unwrap();
        generate_synthetic_corpus(&spec, d2.path()).unwrap();
        assert_eq!(m.len(), 12);
        for e in m.entries() {
            let rel = e.path.strip_prefix(d1.path()).unwrap();
            assert_eq!(fs::read(&e.path).unwrap(), fs::read(d2.path().join(rel)).unwrap());
        }
        assert_eq!(fs::read(d1.path().join("manifest.tsv")).unwrap(), fs::read(d2.path().join("manifest.tsv")).unwrap());

        // per-utterance mean log-mel vectors; compare language means against within-language
        // spread, with the channel nuisance switched off
        let clean = SyntheticCorpusSpec { channel_variation: 0.0, ..spec.clone() };
        let d3 = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&clean, d3.path()).unwrap();
        let ex = LogMelExtractor::new(FeatureConfig::default()).unwrap();
        let frames = extract_manifest(&m, &ex).unwrap();
        let means: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| (0..80).map(|d| (0..f.num_frames()).map(|t| f64::from(f.frame(t)[d])).sum::<f64>() / f.num_frames() as f64).collect())
            .collect();
        let separated = (0..80).map(|d| {
            let col = |l: usize| -> Vec<f64> { (0..6).map(|i| means[l * 6 + i][d]).collect() };
            let stat = |v: &[f64]| {
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                (mu, (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
            };
            let ((m0, s0), (m1, s1)) = (stat(&col(0)), stat(&col(1)));
            (m0 - m1).abs() / s0.max(s1)
        }).fold(0.0, f64::max);
        assert!(separated > 3.0, "{separated}");
    }

    #[test]
    fn channel_nuisance_varies_per_utterance() {
        let tilt = |spec: &SyntheticCorpusSpec| -> Vec<f64> {
            // high-minus-low energy ratio of the first-difference signal
            (0..4)
                .map(|i| {
                    let a = spec.synthesize(0, i).unwrap();
                    let x = a.samples();
                    let e: f64 = x.iter().map(|v| f64::from(*v).powi(2)).sum();
                    let d: f64 = x.windows(2).map(|w| f64::from(w[1] - w[0]).powi(2)).sum();
                    d / e
                })
                .collect()
        };
        let base = SyntheticCorpusSpec { num_languages: 1, duration_seconds: 1.0, ..Default::default() };
        let spread = |v: Vec<f64>| v.iter().cloned().fold(f64::MIN, f64::max) / v.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread(tilt(&base)) > 1.5);
        assert!(SyntheticCorpusSpec { sequence_regularity: 1.5, ..base.clone() }.validate().is_err());
        assert!(SyntheticCorpusSpec { channel_variation: 1.0, ..base }.validate().is_err());
    }

    #[test]
    fn empty_synthetic_corpus_fails_validation() {
        let spec = SyntheticCorpusSpec { utterances_per_language: 0, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        assert!(m.is_empty());
        assert!(m.validate().is_err());
        let bad = SyntheticCorpusSpec { num_languages: 0, ..Default::default() };
        assert!(generate_synthetic_corpus(&bad, dir.path()).is_err());
    }

    #[test]
    fn subsampling_is_seeded() {
        let entries = (0..20)
            .map(|i| ManifestEntry {
                path: format!("u{i}.wav").into(),
                language: if i % 2 == 0 { "aa" } else { "bb" }.into(),
                duration_seconds: 30.0,
            })
            .collect();
        let m = Manifest::new(entries).unwrap();
        let (a, short) = m.subsample_minutes(1.0, 3).unwrap();
        let (b, _) = m.subsample_minutes(1.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(short.is_empty());
        let (all, short) = m.subsample_minutes(100.0, 3).unwrap();
        assert_eq!(all.len(), 20);
        assert_eq!(short.len(), 2);
        assert_eq!(m.subsample_count(3, 1).unwrap().len(), 6);
    }
}
