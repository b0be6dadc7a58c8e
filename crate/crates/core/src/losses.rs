//! Pre-training and fine-tuning objectives.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MaskSpec;
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub num_distractors: usize,
    /// Draw distractors only from the target's own utterance. When false,
    /// any masked step in the batch may serve.
    pub restrict_to_same_utterance: bool,
    /// Divides the cosine similarities. 1.0 leaves them untouched.
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { num_distractors: 20, restrict_to_same_utterance: true, temperature: 1.0 }
    }
}

impl ContrastiveConfig {
    pub fn paper() -> Self {
        Self { num_distractors: 100, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_distractors == 0 {
            return Err(Error::Config("num_distractors must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("contrastive temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_diversity: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_diversity >= 0.0 && self.lambda_diversity.is_finite()) {
            return Err(Error::Config(format!("lambda_diversity must be >= 0, got {}", self.lambda_diversity)));
        }
        Ok(())
    }
}

/// Draws `k` distractors uniformly from `masked \ {t}`: without replacement
/// when enough candidates exist, with replacement otherwise.
pub fn sample_distractors(masked: &[usize], t: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if masked.is_empty() {
        return Err(Error::Invalid("no masked steps to draw distractors from".into()));
    }
    let pool: Vec<usize> = masked.iter().copied().filter(|&m| m != t).collect();
    if pool.is_empty() {
        return Err(Error::DegenerateMask(t));
    }
    if pool.len() >= k {
        Ok(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
    } else {
        Ok((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }
}

/// One utterance's context outputs `c` and targets `q` (both `[T, D]`).
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveItem<'a> {
    pub c: Var,
    pub q: Var,
    pub mask: &'a MaskSpec,
}

pub struct ContrastiveOutput {
    pub loss: Var,
    /// `(item, step)` of every scored target.
    pub targets: Vec<(usize, usize)>,
    /// Distractors drawn for each target, as `(item, step)`.
    pub distractors: Vec<Vec<(usize, usize)>>,
}

/// Mean over all masked steps in the batch of the negative log-softmax of
/// the true target's cosine similarity against its `K + 1` candidates.
///
/// With same-utterance distractors, an utterance whose mask has a single
/// step cannot form candidates and is skipped; the call fails only when no
/// utterance contributes.
pub fn contrastive_loss<T: Real>(
    tape: &Tape<T>,
    items: &[ContrastiveItem<'_>],
    cfg: &ContrastiveConfig,
    rng: &mut impl Rng,
) -> Result<ContrastiveOutput> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Invalid("contrastive loss over an empty batch".into()));
    }
    for (i, it) in items.iter().enumerate() {
        let (cs, qs) = (tape.shape(it.c), tape.shape(it.q));
        if cs != qs || cs.len() != 2 || cs[0] != it.mask.len() {
            return Err(Error::Shape(format!("item {i}: context {cs:?}, targets {qs:?}, mask length {}", it.mask.len())));
        }
    }
    let all_masked: Vec<(usize, usize)> =
        items.iter().enumerate().flat_map(|(i, it)| it.mask.masked_indices().into_iter().map(move |s| (i, s))).collect();
    if all_masked.is_empty() {
        return Err(Error::Invalid("no masked steps in batch".into()));
    }
    let k = cfg.num_distractors;
    let mut targets = Vec::new();
    let mut distractors: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut last_degenerate = None;
    if cfg.restrict_to_same_utterance {
        for (i, it) in items.iter().enumerate() {
            let masked = it.mask.masked_indices();
            for &t in &masked {
                match sample_distractors(&masked, t, k, rng) {
                    Ok(d) => {
                        targets.push((i, t));
                        distractors.push(d.into_iter().map(|s| (i, s)).collect());
                    }
                    Err(Error::DegenerateMask(s)) => last_degenerate = Some(s),
                    Err(e) => return Err(e),
                }
            }
        }
    } else {
        let flat: Vec<usize> = (0..all_masked.len()).collect();
        for (n, &(i, t)) in all_masked.iter().enumerate() {
            match sample_distractors(&flat, n, k, rng) {
                Ok(d) => {
                    targets.push((i, t));
                    distractors.push(d.into_iter().map(|m| all_masked[m]).collect());
                }
                Err(Error::DegenerateMask(_)) => last_degenerate = Some(t),
                Err(e) => return Err(e),
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::DegenerateMask(last_degenerate.unwrap_or(0)));
    }
    let loss = score_candidates(tape, items, &targets, &distractors, cfg.temperature)?;
    Ok(ContrastiveOutput { loss, targets, distractors })
}

/// The contrastive loss for explicitly given targets and distractors, all
/// as `(item, step)` pairs; every target needs the same number of
/// distractors.
pub fn score_candidates<T: Real>(
    tape: &Tape<T>,
    items: &[ContrastiveItem<'_>],
    targets: &[(usize, usize)],
    distractors: &[Vec<(usize, usize)>],
    temperature: f64,
) -> Result<Var> {
    if targets.is_empty() || targets.len() != distractors.len() {
        return Err(Error::Invalid(format!("{} targets with {} distractor lists", targets.len(), distractors.len())));
    }
    let k = distractors[0].len();
    if k == 0 || distractors.iter().any(|d| d.len() != k) {
        return Err(Error::Invalid("every target needs the same positive number of distractors".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    let mut offsets = Vec::with_capacity(items.len());
    let mut total = 0;
    for it in items {
        offsets.push(total);
        total += tape.shape(it.c)[0];
    }
    let in_range = |&(i, s): &(usize, usize)| i < items.len() && s < tape.shape(items[i].c)[0];
    if !targets.iter().chain(distractors.iter().flatten()).all(in_range) {
        return Err(Error::Invalid("candidate index outside the batch".into()));
    }
    let (c_all, q_all) = if items.len() == 1 {
        (items[0].c, items[0].q)
    } else {
        let cs: Vec<Var> = items.iter().map(|it| it.c).collect();
        let qs: Vec<Var> = items.iter().map(|it| it.q).collect();
        (tape.concat_rows(&cs)?, tape.concat_rows(&qs)?)
    };
    let mut c_idx = Vec::with_capacity(targets.len() * (k + 1));
    let mut q_idx = Vec::with_capacity(targets.len() * (k + 1));
    for (&(i, t), ds) in targets.iter().zip(distractors) {
        let row = offsets[i] + t;
        c_idx.extend(std::iter::repeat(row).take(k + 1));
        q_idx.push(row);
        q_idx.extend(ds.iter().map(|&(j, s)| offsets[j] + s));
    }
    let c_rep = tape.gather_rows(c_all, &c_idx)?;
    let q_cand = tape.gather_rows(q_all, &q_idx)?;
    let sims = tape.reshape(tape.cosine_rows(c_rep, q_cand)?, &[targets.len(), k + 1])?;
    let sims = if temperature == 1.0 { sims } else { tape.scale(sims, T::of(1.0 / temperature)) };
    tape.nll_mean(tape.log_softmax(sims), &vec![0; targets.len()])
}

const ROW_SUM_TOL: f64 = 1e-4;

/// `(1 / GV) Σ_g Σ_v p̄_gv ln p̄_gv` where `p̄_g` is the mean over rows of
/// `probs[g]` (`[N, V]`, rows summing to one).
pub fn diversity_loss<T: Real>(tape: &Tape<T>, probs: &[Var]) -> Result<Var> {
    if probs.is_empty() {
        return Err(Error::Invalid("diversity loss needs at least one group".into()));
    }
    let v = tape.shape(probs[0])[1];
    let mut acc: Option<Var> = None;
    for (g, &p) in probs.iter().enumerate() {
        let pv = tape.value(p);
        if pv.ndim() != 2 || pv.cols() != v || pv.rows() == 0 {
            return Err(Error::Shape(format!("group {g} probabilities have shape {:?}", pv.shape())));
        }
        for (r, row) in pv.data().chunks(v).enumerate() {
            let s: f64 = row.iter().map(|x| x.as_f64()).sum();
            if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|x| x.as_f64() < 0.0) {
                return Err(Error::Invalid(format!("group {g} row {r} is not a distribution (sum {s})")));
            }
        }
        let term = tape.sum(tape.xlogx(tape.mean_rows(p)?));
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), T::of(1.0 / (probs.len() * v) as f64)))
}

pub struct PretrainLoss {
    pub total: Var,
    pub contrastive: Var,
    pub diversity: Var,
}

/// `L_m + λ L_d`.
pub fn pretrain_loss<T: Real>(tape: &Tape<T>, contrastive: Var, diversity: Var, weights: &LossWeights) -> Result<PretrainLoss> {
    weights.validate()?;
    let total = tape.add(contrastive, tape.scale(diversity, T::of(weights.lambda_diversity)))?;
    Ok(PretrainLoss { total, contrastive, diversity })
}

/// Mean negative log-likelihood of `targets` under softmax(`logits`).
pub fn cross_entropy<T: Real>(tape: &Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.nll_mean(tape.log_softmax(logits), targets)
}

/// Cross-entropy of already-normalized `[B, L]` probabilities.
pub fn cross_entropy_from_probs(probs: &Tensor<f64>, targets: &[usize]) -> Result<f64> {
    if probs.ndim() != 2 || probs.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Shape(format!("probabilities {:?} for {} targets", probs.shape(), targets.len())));
    }
    let l = probs.cols();
    let mut total = 0.0;
    for (r, (&t, row)) in targets.iter().zip(probs.data().chunks(l)).enumerate() {
        if t >= l {
            return Err(Error::Invalid(format!("target {t} outside [0, {l})")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invalid(format!("row {r} sums to {s}")));
        }
        total -= row[t].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / targets.len() as f64)
}
