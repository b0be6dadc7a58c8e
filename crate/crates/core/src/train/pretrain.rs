//! Self-supervised pre-training loop.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::optim::{adam_step, clip_global_norm, AdamState};
use super::schedule::TrainSchedule;
use super::{collect_grads, INIT_STREAM, TRAIN_STREAM};
use crate::data::{build_sampling_distribution, sample_batch, FeatureSet};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureStats, LogMelFrames};
use crate::losses::{contrastive_loss, diversity_loss, pretrain_loss, ContrastiveConfig, ContrastiveItem, LossWeights};
use crate::model::{apply_mask, context_encode, feature_encode, sample_mask, Bound, ContextOptions, MaskSpec, ModelConfig, ParamStore};
use crate::numerics::{Real, Tape, Var};
use crate::quantizer::{quantize, CodebookUsage, GumbelSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub schedule: TrainSchedule,
    /// Utterance crops per update.
    pub batch_size: usize,
    pub crop_frames: usize,
    /// Language sampling exponent: 1 follows the data, smaller values flatten.
    pub alpha: f64,
    pub contrastive: ContrastiveConfig,
    pub loss: LossWeights,
    pub gumbel: GumbelSchedule,
    /// Write an intermediate checkpoint every this many updates (0: final only).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::toy_pretrain(),
            batch_size: 4,
            crop_frames: 400,
            alpha: 0.5,
            contrastive: ContrastiveConfig::default(),
            loss: LossWeights::default(),
            gumbel: GumbelSchedule::default(),
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        self.contrastive.validate()?;
        self.loss.validate()?;
        self.gumbel.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.crop_frames < 2 * model.stack {
            return Err(Error::Config(format!("crop_frames {} leaves fewer than two stacked steps", self.crop_frames)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_diversity: f64,
    pub tau: f64,
    pub grad_norm: f64,
    /// Mean per-group entropy of the batch's hard codebook selections (nats).
    pub codebook_entropy: f64,
    /// Mean fraction of entries selected at least once in the batch.
    pub codebook_coverage: f64,
    pub masked_steps: usize,
}

pub struct Objective {
    pub total: Var,
    pub contrastive: Var,
    pub diversity: Var,
    pub selections: Vec<Vec<Vec<usize>>>,
    pub masked_steps: usize,
}

/// Loss for a list of utterances: mask, encode, quantize, contrast.
///
/// With `dropout` set, the context encoder runs in training mode; Gumbel
/// noise is always drawn (the quantizer's training behavior).
pub fn objective<T: Real>(
    tape: &Tape<T>,
    model: &ModelConfig,
    p: &Bound,
    cfg: &PretrainConfig,
    utterances: &[Var],
    tau: f64,
    dropout: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    let mut masks: Vec<MaskSpec> = Vec::with_capacity(utterances.len());
    let mut cs = Vec::with_capacity(utterances.len());
    let mut qs = Vec::with_capacity(utterances.len());
    let mut probs: Vec<Vec<Var>> = vec![Vec::new(); model.codebook_groups];
    let mut selections = Vec::with_capacity(utterances.len());
    let mask_emb = p.get("mask_emb")?;
    for &x in utterances {
        let z = feature_encode(tape, model, p, x)?;
        let steps = tape.shape(z)[0];
        let mask = sample_mask(steps, model.mask_prob, model.mask_span, rng)?;
        let zm = apply_mask(tape, z, &mask, mask_emb)?;
        let dropout_rng = if dropout { Some(&mut *rng) } else { None };
        let out = context_encode(tape, model, p, zm, ContextOptions { project: true, dropout_rng, ..Default::default() })?;
        let q = quantize(tape, model, p, z, tau, true, rng)?;
        for (g, pr) in q.probs.iter().enumerate() {
            probs[g].push(*pr);
        }
        selections.push(q.selections);
        cs.push(out.projected.expect("projection requested"));
        qs.push(q.q);
        masks.push(mask);
    }
    let items: Vec<ContrastiveItem> = (0..utterances.len()).map(|i| ContrastiveItem { c: cs[i], q: qs[i], mask: &masks[i] }).collect();
    let con = contrastive_loss(tape, &items, &cfg.contrastive, rng)?;
    let per_group: Vec<Var> = probs.iter().map(|ps| if ps.len() == 1 { Ok(ps[0]) } else { tape.concat_rows(ps) }).collect::<Result<_>>()?;
    let div = diversity_loss(tape, &per_group)?;
    let loss = pretrain_loss(tape, con.loss, div, &cfg.loss)?;
    Ok(Objective {
        total: loss.total,
        contrastive: loss.contrastive,
        diversity: loss.diversity,
        selections,
        masked_steps: con.targets.len(),
    })
}

/// Everything a pre-training run needs besides the hooks.
pub struct PretrainInputs<'a> {
    pub model: &'a ModelConfig,
    pub features: &'a FeatureConfig,
    pub stats: &'a FeatureStats,
    pub config: &'a PretrainConfig,
    pub data: &'a FeatureSet,
    pub seed: u64,
}

/// Runs (or resumes from `resume`) pre-training up to
/// `schedule.total_updates`. `on_step` sees every update's metrics,
/// `on_checkpoint` every intermediate checkpoint.
pub fn pretrain(
    inputs: PretrainInputs<'_>,
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&PretrainMetrics) -> Result<()>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let PretrainInputs { model, features, stats, config, data, seed } = inputs;
    model.validate()?;
    config.validate(model)?;
    if data.frames(0).dim() != model.feature_dim {
        return Err(Error::Config(format!("features have {} bins, model expects {}", data.frames(0).dim(), model.feature_dim)));
    }
    let fps = features.frames_per_second();
    let dist = build_sampling_distribution(&data.hours_per_language(fps), config.alpha)?;

    let (mut params, mut opt, mut rng, start) = match resume {
        Some(ck) => {
            ck.check_model(model)?;
            let rng = match &ck.rng {
                Some(r) => r.restore()?,
                None => return Err(Error::Integrity("checkpoint has no rng state to resume from".into())),
            };
            (ck.params, ck.optimizer.unwrap_or_default(), rng, ck.step)
        }
        None => {
            let mut init = ChaCha8Rng::seed_from_u64(seed);
            init.set_stream(INIT_STREAM);
            let params = ParamStore::<f32>::init_model(model, &mut init)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(TRAIN_STREAM);
            (params, AdamState::default(), rng, 0)
        }
    };

    let snapshot = |params: &ParamStore<f32>, opt: &AdamState<f32>, rng: &ChaCha8Rng, step: usize| Checkpoint {
        feature_stats: Some(stats.clone()),
        step,
        rng: Some(RngState::capture(rng)),
        optimizer: Some(opt.clone()),
        ..Checkpoint::new(model.clone(), features.clone(), params.clone())
    };

    for step in start..config.schedule.total_updates {
        let lr = config.schedule.lr_at(step)?;
        let tau = config.gumbel.tau_at(step);
        let batch = sample_batch(data, &dist, config.batch_size, config.crop_frames, &mut rng)?;
        let tape = Tape::<f32>::new();
        let p = params.bind(&tape, |_| true);
        let utterances: Vec<Var> = (0..batch.len())
            .map(|b| batch.utterance(b))
            .filter(|u: &LogMelFrames| u.num_frames() >= 2 * model.stack)
            .map(|u| tape.constant(u.to_tensor()))
            .collect();
        if utterances.is_empty() {
            return Err(Error::Invalid(format!("step {step}: every sampled utterance is too short to encode")));
        }
        let obj = objective(&tape, model, &p, config, &utterances, tau, true, &mut rng)?;
        let (total, lc, ld) = (tape.value(obj.total).item(), tape.value(obj.contrastive).item(), tape.value(obj.diversity).item());
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("contrastive {lc}, diversity {ld}") });
        }
        let mut grads: BTreeMap<String, _> = collect_grads(&tape, &p, obj.total)?;
        let grad_norm = clip_global_norm(&mut grads, config.schedule.grad_clip, step)?;
        adam_step(&mut params, &grads, &mut opt, lr, &config.schedule)?;
        let usage = CodebookUsage::from_selections(model.codebook_groups, model.codebook_entries, &obj.selections)?;
        let coverage = usage.coverage();
        on_step(&PretrainMetrics {
            step,
            lr,
            loss_total: f64::from(total),
            loss_contrastive: f64::from(lc),
            loss_diversity: f64::from(ld),
            tau,
            grad_norm,
            codebook_entropy: usage.mean_entropy(),
            codebook_coverage: coverage.iter().sum::<f64>() / coverage.len() as f64,
            masked_steps: obj.masked_steps,
        })?;
        let done = step + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.schedule.total_updates {
            on_checkpoint(&snapshot(&params, &opt, &rng, done))?;
        }
    }
    Ok(snapshot(&params, &opt, &rng, config.schedule.total_updates.max(start)))
}
