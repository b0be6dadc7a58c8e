//! Product quantization of latent steps with Gumbel-softmax selection.
//!
//! `Z` is projected to `proj_dim`, split into `G` groups, and each group
//! slice scores the `V` entries of its codebook by dot product. In training
//! the forward pass takes the hard one-hot of the noisy scores while the
//! gradient follows the soft Gumbel sample (straight-through). The chosen
//! entries are concatenated and projected again to give the targets `Q`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, ModelConfig};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Multiplicatively decayed Gumbel temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub decay_per_update: f64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self { tau_start: 2.0, tau_end: 0.5, decay_per_update: 0.999 }
    }
}

impl GumbelSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) || !(self.decay_per_update > 0.0 && self.decay_per_update <= 1.0) {
            return Err(Error::Config(format!("invalid Gumbel schedule {self:?}")));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        (self.tau_start * self.decay_per_update.powf(step as f64)).max(self.tau_end)
    }
}

pub struct QuantizerOutput {
    /// `[T, proj_dim]` quantized targets.
    pub q: Var,
    /// Noise-free softmax over entries, one `[T, V]` per group.
    pub probs: Vec<Var>,
    /// Soft Gumbel samples (training) or one-hot selections (eval), per group.
    pub soft: Vec<Var>,
    /// Scores before noise, per group.
    pub logits: Vec<Var>,
    /// Selected entry per group and time step: `selections[g][t]`.
    pub selections: Vec<Vec<usize>>,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    // lowest index wins ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn one_hot<T: Real>(rows: usize, cols: usize, idx: &[usize]) -> Tensor<T> {
    let mut t = Tensor::zeros([rows, cols]);
    for (r, &c) in idx.iter().enumerate() {
        t.data_mut()[r * cols + c] = T::one();
    }
    t
}

/// Quantizes the rows of `z` (`[T, z_dim]`).
pub fn quantize<T: Real>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    p: &Bound,
    z: Var,
    tau: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<QuantizerOutput> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let x = tape.linear(z, p.get("quant.pre.w")?, p.get("quant.pre.b")?)?;
    let rows = tape.shape(x)[0];
    let (groups, entries, dg) = (cfg.codebook_groups, cfg.codebook_entries, cfg.codebook_entry_dim());
    let codebook = p.get("quant.codebook")?;
    let mut out = QuantizerOutput { q: x, probs: Vec::new(), soft: Vec::new(), logits: Vec::new(), selections: Vec::new() };
    let mut chosen = Vec::with_capacity(groups);
    for g in 0..groups {
        let table = tape.slice_rows(codebook, g * entries, entries)?;
        let xg = tape.slice_cols(x, g * dg, dg)?;
        let logits = tape.matmul_t(xg, table)?;
        out.probs.push(tape.softmax(logits));
        out.logits.push(logits);
        let (sel, idx) = if train {
            let noise = Tensor::from_fn([rows, entries], |_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                T::of(-(-u.ln()).ln())
            });
            let noisy = tape.add(logits, tape.constant(noise))?;
            let idx: Vec<usize> = tape.value(noisy).data().chunks(entries).map(argmax).collect();
            let soft = tape.softmax(tape.scale(noisy, T::of(1.0 / tau)));
            out.soft.push(soft);
            (tape.straight_through(soft, one_hot(rows, entries, &idx))?, idx)
        } else {
            let idx: Vec<usize> = tape.value(logits).data().chunks(entries).map(argmax).collect();
            let hard = tape.constant(one_hot(rows, entries, &idx));
            out.soft.push(hard);
            (hard, idx)
        };
        chosen.push(tape.matmul(sel, table)?);
        out.selections.push(idx);
    }
    let concat = tape.concat_cols(&chosen)?;
    out.q = tape.linear(concat, p.get("quant.post.w")?, p.get("quant.post.b")?)?;
    Ok(out)
}

/// Empirical selection frequencies per group.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookUsage {
    /// `G × V`, each row sums to 1.
    pub freq: Vec<Vec<f64>>,
}

impl CodebookUsage {
    /// Accumulates `selections[g][t]` lists from any number of utterances.
    pub fn from_selections<'a>(groups: usize, entries: usize, batch: impl IntoIterator<Item = &'a Vec<Vec<usize>>>) -> Result<Self> {
        let mut counts = vec![vec![0usize; entries]; groups];
        for sel in batch {
            if sel.len() != groups {
                return Err(Error::Shape(format!("{} selection groups, expected {groups}", sel.len())));
            }
            for (g, idx) in sel.iter().enumerate() {
                for &v in idx {
                    counts[g][v] += 1;
                }
            }
        }
        let total: usize = counts[0].iter().sum();
        if total == 0 {
            return Err(Error::Invalid("codebook usage over an empty batch".into()));
        }
        let freq = counts.iter().map(|row| row.iter().map(|&c| c as f64 / total as f64).collect()).collect();
        Ok(Self { freq })
    }

    /// Fraction of entries used at least once, per group.
    pub fn coverage(&self) -> Vec<f64> {
        self.freq.iter().map(|row| row.iter().filter(|&&f| f > 0.0).count() as f64 / row.len() as f64).collect()
    }

    /// Mean over groups of the selection entropy (nats).
    pub fn mean_entropy(&self) -> f64 {
        let h: f64 = self.freq.iter().map(|row| -row.iter().filter(|&&f| f > 0.0).map(|f| f * f.ln()).sum::<f64>()).sum();
        h / self.freq.len() as f64
    }
}
