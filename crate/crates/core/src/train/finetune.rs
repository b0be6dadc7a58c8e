//! Supervised language-ID fine-tuning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, LidMeta, RngState};
use super::optim::{adam_step, clip_global_norm, AdamState};
use super::schedule::TrainSchedule;
use super::{collect_grads, HEAD_STREAM, INIT_STREAM, TRAIN_STREAM};
use crate::data::{build_sampling_distribution, sample_batch, FeatureSet};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureStats};
use crate::lid::{evaluate, init_head, utterance_logits, HeadSpec, PoolingMode};
use crate::losses::cross_entropy;
use crate::model::{ModelConfig, ParamStore};
use crate::numerics::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    /// Random crop length (600 frames = 6 s at a 10 ms hop).
    pub crop_frames: usize,
    pub pooling: PoolingMode,
    /// Transformer block feeding the classifier; `None` uses the last one.
    pub layer: Option<usize>,
    /// Train only the classifier (and class token).
    pub freeze_encoder: bool,
    /// Held-out evaluation interval in updates (0: only at the end).
    pub eval_every: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::finetune(1e-4, 100),
            batch_size: 8,
            crop_frames: 600,
            pooling: PoolingMode::Average,
            layer: None,
            freeze_encoder: false,
            eval_every: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 || self.crop_frames < model.stack {
            return Err(Error::Config("batch_size and crop_frames must be positive".into()));
        }
        if let Some(k) = self.layer {
            if k == 0 || k > model.num_layers {
                return Err(Error::Config(format!("layer {k} outside 1..={}", model.num_layers)));
            }
        }
        Ok(())
    }

    pub fn layer_or_last(&self, model: &ModelConfig) -> usize {
        self.layer.unwrap_or(model.num_layers)
    }
}

/// Starting point for the encoder.
pub enum Init {
    Scratch,
    Pretrained(Checkpoint),
}

impl Init {
    pub fn name(&self) -> &'static str {
        match self {
            Init::Scratch => "scratch",
            Init::Pretrained(_) => "pretrained",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f64,
    /// Accuracy on the update's own training batch.
    pub accuracy: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_accuracy: Option<f64>,
}

pub struct FinetuneInputs<'a> {
    pub model: &'a ModelConfig,
    pub features: &'a FeatureConfig,
    pub stats: &'a FeatureStats,
    pub config: &'a FinetuneConfig,
    pub train: &'a FeatureSet,
    /// Must share `train`'s language order.
    pub heldout: Option<&'a FeatureSet>,
    pub seed: u64,
}

/// Trains a classifier over `train.languages()` and returns the fine-tuned
/// checkpoint (encoder, head, and LID metadata). Pre-training-only
/// parameters are carried along untouched.
pub fn finetune(
    inputs: FinetuneInputs<'_>,
    init: Init,
    mut on_step: impl FnMut(&FinetuneMetrics) -> Result<()>,
) -> Result<Checkpoint> {
    let FinetuneInputs { model, features, stats, config, train, heldout, seed } = inputs;
    model.validate()?;
    config.validate(model)?;
    let languages = train.languages().to_vec();
    if let Some(h) = heldout {
        if h.languages() != languages.as_slice() {
            return Err(Error::Invalid(format!("held-out languages {:?} differ from training languages {languages:?}", h.languages())));
        }
    }
    let spec = HeadSpec { pooling: config.pooling, layer: config.layer_or_last(model), num_languages: languages.len() };
    let mut params = match init {
        Init::Scratch => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(INIT_STREAM);
            ParamStore::<f32>::init_model(model, &mut r)?
        }
        Init::Pretrained(ck) => {
            ck.check_model(model)?;
            ck.params
        }
    };
    let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
    head_rng.set_stream(HEAD_STREAM);
    init_head(&mut params, model, &spec, &mut head_rng)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TRAIN_STREAM);
    let dist = build_sampling_distribution(&train.hours_per_language(features.frames_per_second()), 1.0)?;
    let mut opt = AdamState::default();
    let freeze = config.freeze_encoder;
    let total = config.schedule.total_updates;
    for step in 0..total {
        let lr = config.schedule.lr_at(step)?;
        let batch = sample_batch(train, &dist, config.batch_size, config.crop_frames, &mut rng)?;
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape, |name| !freeze || name.starts_with("head."));
        let mut logits: Vec<Var> = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let x = tape.constant(batch.utterance(b).to_tensor());
            logits.push(utterance_logits(&tape, model, &p, &spec, x, Some(&mut rng))?);
        }
        let stacked = tape.concat_rows(&logits)?;
        let loss = cross_entropy(&tape, stacked, &batch.language_ids)?;
        let loss_value = f64::from(tape.value(loss).item());
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: "cross-entropy".into() });
        }
        let lv = tape.value(stacked);
        let l = languages.len();
        let correct = lv
            .data()
            .chunks(l)
            .zip(&batch.language_ids)
            .filter(|(row, &y)| {
                let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
                best == y
            })
            .count();
        let mut grads = collect_grads(&tape, &p, loss)?;
        let grad_norm = clip_global_norm(&mut grads, config.schedule.grad_clip, step)?;
        adam_step(&mut params, &grads, &mut opt, lr, &config.schedule)?;
        let done = step + 1;
        let heldout_accuracy = match heldout {
            Some(h) if (config.eval_every > 0 && done % config.eval_every == 0) || done == total => {
                Some(evaluate(&params, model, &spec, &languages, h)?.accuracy())
            }
            _ => None,
        };
        on_step(&FinetuneMetrics {
            step,
            lr,
            loss_ce: loss_value,
            accuracy: correct as f64 / batch.len() as f64,
            grad_norm,
            heldout_accuracy,
        })?;
    }
    Ok(Checkpoint {
        feature_stats: Some(stats.clone()),
        step: total,
        rng: Some(RngState::capture(&rng)),
        optimizer: Some(opt),
        lid: Some(LidMeta { languages, head: spec }),
        ..Checkpoint::new(model.clone(), features.clone(), params)
    })
}
