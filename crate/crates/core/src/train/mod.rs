//! Optimization loops, learning-rate schedule, Adam, and checkpoints.

mod checkpoint;
mod finetune;
mod optim;
mod pretrain;
mod schedule;

use std::collections::BTreeMap;

pub use checkpoint::{Checkpoint, LidMeta, RngState, FORMAT_VERSION, MAGIC};
pub use finetune::{finetune, FinetuneConfig, FinetuneInputs, FinetuneMetrics, Init};
pub use optim::{adam_step, clip_global_norm, decays, AdamState};
pub use pretrain::{objective, pretrain, Objective, PretrainConfig, PretrainInputs, PretrainMetrics};
pub use schedule::{Decay, TrainSchedule};

use crate::error::Result;
use crate::model::Bound;
use crate::numerics::{Real, Tape, Tensor, Var};

// Independent ChaCha8 streams derived from one run seed.
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

/// Back-propagates `loss` and returns gradients by parameter name. Frozen
/// or unused parameters are absent.
fn collect_grads<T: Real>(tape: &Tape<T>, p: &Bound, loss: Var) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut g = tape.backward(loss)?;
    Ok(p.iter().filter_map(|(name, var)| g.take(var).map(|t| (name.to_string(), t))).collect())
}
