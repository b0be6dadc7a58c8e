//! Single-run experiment drivers behind the command-line tool: data splits,
//! fine-tune-then-evaluate, layer probing, and the pooling ablation.

use crate::config::RunConfig;
use crate::data::{extract_manifest, FeatureSet, Manifest};
use crate::error::{Error, Result};
use crate::features::{compute_feature_stats, FeatureStats, LogMelExtractor};
use crate::lid::{evaluate, ConfusionMatrix, PoolingMode};
use crate::train::{finetune, Checkpoint, FinetuneConfig, FinetuneInputs, FinetuneMetrics, Init};

/// Normalized features for a fine-tuning run.
pub struct LabeledSplits {
    pub stats: FeatureStats,
    pub train: FeatureSet,
    pub heldout: FeatureSet,
    /// Languages with less labeled audio than requested (all of it is used).
    pub short_languages: Vec<String>,
}

/// Loads the pre-training corpus and computes its normalization statistics.
pub fn load_pretrain_set(cfg: &RunConfig) -> Result<(FeatureSet, FeatureStats)> {
    let manifest = Manifest::load(cfg.require("data.manifest")?)?;
    let extractor = LogMelExtractor::new(cfg.features.clone())?;
    FeatureSet::load(&manifest, &extractor, None, cfg.data.stats_utterances, None)
}

/// Loads the labeled pool (optionally cut to `minutes` per language with the
/// run seed) and the held-out split. Without `stats`, statistics come from
/// the labeled subset.
pub fn load_labeled_splits(cfg: &RunConfig, stats: Option<&FeatureStats>, minutes: Option<f64>) -> Result<LabeledSplits> {
    let pool = Manifest::load(cfg.require("data.labeled_manifest")?)?;
    let (labeled, short_languages) = match minutes {
        Some(m) if !(m > 0.0) => return Err(Error::Config(format!("labeled minutes per language must be positive, got {m}"))),
        Some(m) => pool.subsample_minutes(m, cfg.seed)?,
        None => (pool, Vec::new()),
    };
    let heldout = Manifest::load(cfg.require("data.heldout_manifest")?)?;
    labeled.validate()?;
    heldout.validate()?;
    let extractor = LogMelExtractor::new(cfg.features.clone())?;
    let raw = extract_manifest(&labeled, &extractor)?;
    let stats = match stats {
        Some(s) => s.clone(),
        None => {
            let stride = match cfg.data.stats_utterances {
                0 => 1,
                n => raw.len().div_ceil(n).max(1),
            };
            compute_feature_stats(raw.iter().step_by(stride))?
        }
    };
    let normalize = |raw: Vec<_>| raw.iter().map(|f| stats.normalize(f)).collect::<Result<Vec<_>>>();
    let train = FeatureSet::new(&labeled, normalize(raw)?, None)?;
    let heldout = FeatureSet::new(&heldout, normalize(extract_manifest(&heldout, &extractor)?)?, Some(train.languages()))?;
    Ok(LabeledSplits { stats, train, heldout, short_languages })
}

pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub heldout: ConfusionMatrix,
}

/// Fine-tunes from `init` (a pre-trained checkpoint or scratch) and scores
/// the held-out split.
pub fn finetune_and_evaluate(
    cfg: &RunConfig,
    finetune_cfg: &FinetuneConfig,
    splits: &LabeledSplits,
    init: Option<&Checkpoint>,
    on_step: impl FnMut(&FinetuneMetrics) -> Result<()>,
) -> Result<FinetuneOutcome> {
    let init = match init {
        Some(ck) => Init::Pretrained(ck.clone()),
        None => Init::Scratch,
    };
    let checkpoint = finetune(
        FinetuneInputs {
            model: &cfg.model,
            features: &cfg.features,
            stats: &splits.stats,
            config: finetune_cfg,
            train: &splits.train,
            heldout: (finetune_cfg.eval_every > 0).then_some(&splits.heldout),
            seed: cfg.seed,
        },
        init,
        on_step,
    )?;
    let lid = checkpoint.lid.as_ref().expect("fine-tuned checkpoints carry a head");
    let heldout = evaluate(&checkpoint.params, &cfg.model, &lid.head, &lid.languages, &splits.heldout)?;
    Ok(FinetuneOutcome { checkpoint, heldout })
}

/// Held-out accuracy of a classifier fed by each block in `layers` (1-based),
/// each with a freshly initialized head.
pub fn probe_layers(cfg: &RunConfig, splits: &LabeledSplits, init: Option<&Checkpoint>, layers: &[usize]) -> Result<Vec<(usize, f64)>> {
    if layers.is_empty() {
        return Err(Error::Config("no layers to probe".into()));
    }
    layers
        .iter()
        .map(|&k| {
            let fc = FinetuneConfig { layer: Some(k), ..cfg.finetune.clone() };
            fc.validate(&cfg.model)?;
            let out = finetune_and_evaluate(cfg, &fc, splits, init, |_| Ok(()))?;
            Ok((k, out.heldout.accuracy()))
        })
        .collect()
}

/// Held-out accuracy for every pooling strategy, in `PoolingMode::ALL` order.
pub fn ablate_pooling(cfg: &RunConfig, splits: &LabeledSplits, init: Option<&Checkpoint>) -> Result<Vec<(PoolingMode, f64)>> {
    PoolingMode::ALL
        .iter()
        .map(|&mode| {
            let fc = FinetuneConfig { pooling: mode, ..cfg.finetune.clone() };
            let out = finetune_and_evaluate(cfg, &fc, splits, init, |_| Ok(()))?;
            Ok((mode, out.heldout.accuracy()))
        })
        .collect()
}
