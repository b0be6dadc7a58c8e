//! Utterance-level language identification on top of the context encoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::features::LogMelFrames;
use crate::model::{context_encode, feature_encode, Bound, ContextOptions, ModelConfig, ParamStore};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Average,
    Max,
    AvgMax,
    AvgMaxMin,
    ClsToken,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 5] = [Self::Average, Self::Max, Self::AvgMaxMin, Self::AvgMax, Self::ClsToken];

    pub fn pooled_dim(self, d: usize) -> usize {
        match self {
            Self::AvgMax => 2 * d,
            Self::AvgMaxMin => 3 * d,
            _ => d,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Max => "max",
            Self::AvgMax => "avg_max",
            Self::AvgMaxMin => "avg_max_min",
            Self::ClsToken => "cls_token",
        }
    }

    pub fn uses_cls(self) -> bool {
        self == Self::ClsToken
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling mode `{s}` (expected one of average, max, avg_max, avg_max_min, cls_token)")))
    }
}

/// Summarizes `[T', D]` context rows into a `[1, pooled_dim]` vector.
///
/// Rows at or beyond `valid_len` are padding and never read. In
/// `ClsToken` mode `c` must carry the prepended token at row 0, which is
/// returned as is.
pub fn pool<T: Real>(tape: &Tape<T>, c: Var, valid_len: usize, mode: PoolingMode) -> Result<Var> {
    let shape = tape.shape(c);
    if shape.len() != 2 {
        return Err(Error::Shape(format!("pooling expects [T, D], got {shape:?}")));
    }
    if valid_len == 0 || valid_len > shape[0] {
        return Err(Error::Invalid(format!("valid length {valid_len} outside 1..={}", shape[0])));
    }
    if mode == PoolingMode::ClsToken {
        return tape.slice_rows(c, 0, 1);
    }
    let rows = if valid_len == shape[0] { c } else { tape.slice_rows(c, 0, valid_len)? };
    match mode {
        PoolingMode::Average => tape.mean_rows(rows),
        PoolingMode::Max => tape.max_rows(rows),
        PoolingMode::AvgMax => tape.concat_cols(&[tape.mean_rows(rows)?, tape.max_rows(rows)?]),
        PoolingMode::AvgMaxMin => tape.concat_cols(&[tape.mean_rows(rows)?, tape.max_rows(rows)?, tape.min_rows(rows)?]),
        PoolingMode::ClsToken => unreachable!(),
    }
}

/// Which representation feeds the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub pooling: PoolingMode,
    /// 1-based transformer block whose output is pooled.
    pub layer: usize,
    pub num_languages: usize,
}

impl HeadSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer == 0 || self.layer > cfg.num_layers {
            return Err(Error::Invalid(format!("layer {} outside 1..={}", self.layer, cfg.num_layers)));
        }
        if self.num_languages < 2 {
            return Err(Error::Config(format!("need at least two languages, got {}", self.num_languages)));
        }
        Ok(())
    }
}

/// Adds a freshly initialized classifier (`head.norm`, a random linear
/// layer `head.w`/`head.b`, and `head.cls` for the class-token mode),
/// replacing any existing head.
pub fn init_head<T: Real>(params: &mut ParamStore<T>, cfg: &ModelConfig, spec: &HeadSpec, rng: &mut impl Rng) -> Result<()> {
    spec.validate(cfg)?;
    for name in ["head.norm.g", "head.norm.b", "head.w", "head.b", "head.cls"] {
        params.remove(name);
    }
    params.insert("head.norm.g", Tensor::full([cfg.c_dim], T::one()));
    params.insert("head.norm.b", Tensor::zeros([cfg.c_dim]));
    params.add_linear(rng, "head", spec.pooling.pooled_dim(cfg.c_dim), spec.num_languages);
    if spec.pooling.uses_cls() {
        params.insert("head.cls", Tensor::from_fn([cfg.c_dim], |_| T::of(rng.gen_range(-1.0..1.0))));
    }
    Ok(())
}

/// Pooled `[1, pooled_dim]` representation of one utterance's frames
/// `[T, F]`: block `spec.layer`'s output, layer-normalized by the head's own
/// norm, then pooled.
pub fn pooled_representation<T: Real>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    p: &Bound,
    spec: &HeadSpec,
    frames: Var,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let z = feature_encode(tape, cfg, p, frames)?;
    let steps = tape.shape(z)[0];
    let cls = if spec.pooling.uses_cls() { Some(p.get("head.cls")?) } else { None };
    let out = context_encode(tape, cfg, p, z, ContextOptions { up_to_layer: Some(spec.layer), project: false, cls, dropout_rng })?;
    let h = tape.layer_norm(out.last(), p.get("head.norm.g")?, p.get("head.norm.b")?, cfg.layer_norm_eps)?;
    let rows = steps + usize::from(spec.pooling.uses_cls());
    pool(tape, h, rows, spec.pooling)
}

/// Language logits `[1, L]` for one utterance's frames `[T, F]`.
pub fn utterance_logits<T: Real>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    p: &Bound,
    spec: &HeadSpec,
    frames: Var,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let pooled = pooled_representation(tape, cfg, p, spec, frames, dropout_rng)?;
    tape.linear(pooled, p.get("head.w")?, p.get("head.b")?)
}

/// Softmax over the head's output for a pooled `[1, D]` vector.
pub fn classify<T: Real>(tape: &Tape<T>, p: &Bound, pooled: Var) -> Result<Var> {
    Ok(tape.softmax(tape.linear(pooled, p.get("head.w")?, p.get("head.b")?)?))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Deterministic prediction (no dropout); returns the id and probabilities.
pub fn predict<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, spec: &HeadSpec, frames: &LogMelFrames) -> Result<(usize, Vec<f64>)> {
    let min = cfg.stack;
    if frames.num_frames() < min {
        return Err(Error::Invalid(format!("utterance has {} frames, need at least {min}", frames.num_frames())));
    }
    let tape = Tape::new();
    let p = params.bind(&tape, |_| false);
    let x = tape.constant(frames.to_tensor().cast::<T>());
    let logits = utterance_logits(&tape, cfg, &p, spec, x, None)?;
    let probs: Vec<f64> = tape.value(tape.softmax(logits)).data().iter().map(|v| v.as_f64()).collect();
    Ok((argmax(&probs), probs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub languages: Vec<String>,
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(languages: Vec<String>) -> Self {
        let n = languages.len();
        Self { languages, counts: vec![vec![0; n]; n] }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    /// Rows are true languages, columns predictions; the header names the
    /// predicted-language columns.
    pub fn to_csv(&self) -> String {
        let mut s = format!("language,{}\n", self.languages.join(","));
        for (lang, row) in self.languages.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("{lang},{}\n", cells.join(",")));
        }
        s
    }
}

/// Accuracy and confusion matrix over every utterance of `set`, whose
/// labels are mapped onto `languages` (the head's label order) by code.
pub fn evaluate<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    spec: &HeadSpec,
    languages: &[String],
    set: &FeatureSet,
) -> Result<ConfusionMatrix> {
    if set.is_empty() {
        return Err(Error::Invalid("evaluation split is empty".into()));
    }
    if languages.len() != spec.num_languages {
        return Err(Error::Config(format!("{} language codes for a {}-way head", languages.len(), spec.num_languages)));
    }
    let map: Vec<usize> = set
        .languages()
        .iter()
        .map(|code| {
            languages
                .iter()
                .position(|l| l == code)
                .ok_or_else(|| Error::Invalid(format!("label `{code}` is not among the trained languages {languages:?}")))
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(languages.to_vec());
    for i in 0..set.len() {
        let (pred, _) = predict(params, cfg, spec, set.frames(i))?;
        confusion.record(map[set.language_id(i)], pred);
    }
    Ok(confusion)
}
