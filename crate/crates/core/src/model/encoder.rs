//! Feature encoder (time stacking + linear), span masking, and the
//! transformer context encoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};

/// Concatenates `stack` consecutive rows; trailing `T mod stack` rows are dropped.
pub fn time_stack<T: Real>(tape: &Tape<T>, x: Var, stack: usize) -> Result<Var> {
    let shape = tape.shape(x);
    let [t_len, f] = shape[..] else {
        return Err(Error::Shape(format!("time_stack expects a [T, F] matrix, got {shape:?}")));
    };
    if stack == 0 || t_len < stack {
        return Err(Error::Shape(format!("cannot stack {stack} frames out of {t_len}")));
    }
    let out_len = t_len / stack;
    let kept = tape.slice_rows(x, 0, out_len * stack)?;
    tape.reshape(kept, &[out_len, f * stack])
}

/// `X: [T, F] → Z: [T / stack, z_dim]`.
pub fn feature_encode<T: Real>(tape: &Tape<T>, cfg: &ModelConfig, p: &Bound, x: Var) -> Result<Var> {
    let cols = tape.shape(x).get(1).copied().unwrap_or(0);
    if cols != cfg.feature_dim {
        return Err(Error::Shape(format!("input has {cols} feature dims, model expects {}", cfg.feature_dim)));
    }
    let stacked = time_stack(tape, x, cfg.stack)?;
    tape.linear(stacked, p.get("fe.w")?, p.get("fe.b")?)
}

/// Masked time steps of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    mask: Vec<bool>,
}

impl MaskSpec {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        Self { mask }
    }

    pub fn none(len: usize) -> Self {
        Self { mask: vec![false; len] }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Every index is a span start with probability `prob`; spans of `span`
/// steps are unioned and clipped at the end. Draws with no start at all are
/// redrawn so at least one step is masked.
pub fn sample_mask(seq_len: usize, prob: f64, span: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    if seq_len == 0 {
        return Err(Error::Invalid("cannot mask an empty sequence".into()));
    }
    if !(prob > 0.0 && prob <= 1.0) || span == 0 {
        return Err(Error::Invalid(format!("mask probability {prob} / span {span} out of range")));
    }
    loop {
        let mut mask = vec![false; seq_len];
        let mut any = false;
        for s in 0..seq_len {
            if rng.gen_bool(prob) {
                any = true;
                mask[s..(s + span).min(seq_len)].iter_mut().for_each(|m| *m = true);
            }
        }
        if any {
            return Ok(MaskSpec { mask });
        }
    }
}

/// Replaces masked rows of `z` with the shared `mask_embedding` vector.
pub fn apply_mask<T: Real>(tape: &Tape<T>, z: Var, spec: &MaskSpec, mask_embedding: Var) -> Result<Var> {
    let rows = tape.shape(z)[0];
    if spec.len() != rows {
        return Err(Error::Shape(format!("mask covers {} steps, sequence has {rows}", spec.len())));
    }
    tape.mask_rows(z, mask_embedding, spec.mask())
}

/// Options for one context-encoder pass.
#[derive(Default)]
pub struct ContextOptions<'r> {
    /// Stop after this many transformer blocks (1-based); `None` runs all of them.
    pub up_to_layer: Option<usize>,
    /// Apply the final projection to `proj_dim` (only when every block ran).
    pub project: bool,
    /// Learned vector prepended as position 0 in front of the transformer blocks.
    pub cls: Option<Var>,
    /// Enables dropout inside the blocks.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

pub struct ContextOutput {
    /// Output of each evaluated block, in order.
    pub layers: Vec<Var>,
    /// Final projection `C`, when requested.
    pub projected: Option<Var>,
    /// Attention probabilities `[T, T]` per block and head.
    pub attention: Vec<Var>,
}

impl ContextOutput {
    /// Output of block `k` (1-based).
    pub fn layer(&self, k: usize) -> Result<Var> {
        if k == 0 || k > self.layers.len() {
            return Err(Error::Invalid(format!("layer {k} outside 1..={}", self.layers.len())));
        }
        Ok(self.layers[k - 1])
    }

    pub fn last(&self) -> Var {
        *self.layers.last().expect("at least one block")
    }

    pub fn blocks_evaluated(&self) -> usize {
        self.layers.len()
    }
}

fn dropout<T: Real>(tape: &Tape<T>, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep: Vec<bool> = (0..tape.value(x).numel()).map(|_| !rng.gen_bool(rate)).collect();
            tape.dropout(x, &keep, T::of(rate))
        }
        _ => Ok(x),
    }
}

fn attention<T: Real>(tape: &Tape<T>, cfg: &ModelConfig, p: &Bound, prefix: &str, x: Var, probs_out: &mut Vec<Var>) -> Result<Var> {
    let q = tape.linear(x, p.get(&format!("{prefix}.q.w"))?, p.get(&format!("{prefix}.q.b"))?)?;
    let k = tape.linear(x, p.get(&format!("{prefix}.k.w"))?, p.get(&format!("{prefix}.k.b"))?)?;
    let v = tape.linear(x, p.get(&format!("{prefix}.v.w"))?, p.get(&format!("{prefix}.v.b"))?)?;
    let dh = cfg.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.scale(tape.matmul_t(qh, kh)?, scale);
        let probs = tape.softmax(scores);
        probs_out.push(probs);
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    tape.linear(merged, p.get(&format!("{prefix}.o.w"))?, p.get(&format!("{prefix}.o.b"))?)
}

fn norm<T: Real>(tape: &Tape<T>, cfg: &ModelConfig, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.get(&format!("{prefix}.g"))?, p.get(&format!("{prefix}.b"))?, cfg.layer_norm_eps)
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + ffn(LN(x))`.
fn block<T: Real>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    p: &Bound,
    l: usize,
    x: Var,
    rng: &mut Option<&mut ChaCha8Rng>,
    probs_out: &mut Vec<Var>,
) -> Result<Var> {
    let b = format!("ctx.block{l}");
    let h = norm(tape, cfg, p, &format!("{b}.norm1"), x)?;
    let a = attention(tape, cfg, p, &format!("{b}.attn"), h, probs_out)?;
    let x = tape.add(x, dropout(tape, a, cfg.dropout, rng)?)?;
    let h = norm(tape, cfg, p, &format!("{b}.norm2"), x)?;
    let h = tape.gelu(tape.linear(h, p.get(&format!("{b}.ffn1.w"))?, p.get(&format!("{b}.ffn1.b"))?)?);
    let h = tape.linear(h, p.get(&format!("{b}.ffn2.w"))?, p.get(&format!("{b}.ffn2.b"))?)?;
    tape.add(x, dropout(tape, h, cfg.dropout, rng)?)
}

/// `Z → C`: linear, layer norm, convolutional positional stem with GELU,
/// residual and layer norm, the transformer blocks, and the final projection.
pub fn context_encode<T: Real>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    p: &Bound,
    z: Var,
    opts: ContextOptions<'_>,
) -> Result<ContextOutput> {
    let ContextOptions { up_to_layer, project, cls, mut dropout_rng } = opts;
    let depth = up_to_layer.unwrap_or(cfg.num_layers);
    if depth == 0 || depth > cfg.num_layers {
        return Err(Error::Invalid(format!("layer {depth} outside 1..={}", cfg.num_layers)));
    }
    let zdim = tape.shape(z).get(1).copied().unwrap_or(0);
    if zdim != cfg.z_dim {
        return Err(Error::Shape(format!("latent width {zdim} does not match z_dim {}", cfg.z_dim)));
    }
    let h = tape.linear(z, p.get("ctx.in.w")?, p.get("ctx.in.b")?)?;
    let h = norm(tape, cfg, p, "ctx.in_norm", h)?;
    let pos = tape.conv1d_grouped(h, p.get("ctx.pos_conv.w")?, Some(p.get("ctx.pos_conv.b")?), cfg.conv_groups)?;
    let h = tape.add(h, tape.gelu(pos))?;
    let mut h = norm(tape, cfg, p, "ctx.pos_norm", h)?;
    if let Some(cls) = cls {
        let token = tape.reshape(cls, &[1, cfg.c_dim])?;
        h = tape.concat_rows(&[token, h])?;
    }

    let mut layers = Vec::with_capacity(depth);
    let mut attention = Vec::new();
    for l in 0..depth {
        h = block(tape, cfg, p, l, h, &mut dropout_rng, &mut attention)?;
        layers.push(h);
    }
    let projected = if project && depth == cfg.num_layers {
        Some(tape.linear(h, p.get("ctx.out.w")?, p.get("ctx.out.b")?)?)
    } else {
        None
    };
    Ok(ContextOutput { layers, projected, attention })
}
